"""Numerical certification of the boundedness guarantee.

The constrained implicit recursion admits an explicit per-coordinate
trajectory bound built from three worst-case constants: the smallest
diagonal magnitude P, the largest coupling magnitude Q, and the largest
bias magnitude B.  Coordinate m (0-based, m earlier coordinates) satisfies

    |x_n^(m)| <= |x0^(m)| + (m*Q*S_(m-1) + B) * (1+P)/P   for all n,

where S is the running-max envelope over earlier coordinates.  This module
computes that bound, drives long rollouts against it, checks the
closed-form comparison sequence against its defining recursion, produces
divergence witnesses for the unconstrained case, and measures forecast
error against the exact PDE solvers step by step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import SeededRng
from .grad_engine import finite_diff_check
from .implicit_block import (
    StabilityConstants,
    TriangularBlock,
    _direct_core,
    block_as_lists,
    solve_broyden,
    solve_direct,
)
from .network import ForecastNet, build_forecast_net, forecast_autoregressive, forecast_latent
from .pde_data import (
    Field1D,
    InitialConditionConfig,
    TrajectoryDataset,
    advect_exact,
    burgers_solve,
    sample_initial_condition,
)


@dataclass
class AuxSequence:
    """Comparison sequence v_n plus the frozen comparison value u = x0."""

    v: np.ndarray
    u: float


@dataclass
class StabilityReport:
    constants: StabilityConstants
    certified: np.ndarray
    observed: np.ndarray
    steps: int
    passed: bool


@dataclass
class SuiteResult:
    name: str
    cases: int
    passed: bool
    worst: float
    detail: str


def stability_constants(blocks: list[TriangularBlock]) -> tuple[float, float, float]:
    """Worst-case (min diagonal, max |coupling|, max |bias|) across a stack."""
    if not blocks:
        raise ValueError("empty block stack")
    p = min(float(np.min(b.diag_neg)) for b in blocks)
    q = max(float(np.max(np.abs(b.coupling))) for b in blocks)
    b_max = max(float(np.max(np.abs(b.bias))) for b in blocks)
    return p, q, b_max


def certified_bound(blocks: list[TriangularBlock], x0: np.ndarray) -> np.ndarray:
    """Per-coordinate envelope no trajectory from x0 can leave.

    Built coordinate by coordinate: each level adds the worst cross-term
    its predecessors can feed it, with the geometric tail of the diagonal
    contraction majorized by (1+P)/P.  Taking the running max keeps the
    envelope valid as the cross-term budget of the next level.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    p, q, b_max = stability_constants(blocks)
    if p <= 0:
        raise ValueError("hypothesis violated: smallest diagonal magnitude must be > 0")
    factor = (1.0 + p) / p
    envelope = np.empty(x0.shape[0])
    running = 0.0
    for m in range(x0.shape[0]):
        raw = abs(x0[m]) + (m * q * running + b_max) * factor
        running = max(running, raw)
        envelope[m] = running
    return envelope


def constants_with_envelope(blocks, x0) -> StabilityConstants:
    p, q, b_max = stability_constants(blocks)
    return StabilityConstants(p, q, b_max, certified_bound(blocks, x0))


def aux_sequence(lambdas, cross_terms, x0: float) -> AuxSequence:
    """v_{k+1} = (v_k + cross_k + b_k)/(1 + lambda_{k+1}), v_0 = x0.

    lambdas[k] is the diagonal magnitude used in step k -> k+1 and
    cross_terms[k] the full additive term (couplings dotted with the
    realized trajectory, plus bias) of that step.
    """
    v = np.empty(len(lambdas) + 1)
    v[0] = x0
    for k in range(len(lambdas)):
        v[k + 1] = (v[k] + cross_terms[k]) / (1.0 + lambdas[k])
    return AuxSequence(v, x0)


def lemma_vn_check(
    lambdas: np.ndarray,
    alphas: np.ndarray,
    biases: np.ndarray,
    x_path: np.ndarray,
    x0: float,
    n: int,
) -> tuple[float, float, float]:
    """Evaluate the comparison sequence both ways and return the difference.

    lambdas[k-1] is the diagonal magnitude of step k (k = 1..n);
    alphas[k-1] / x_path[k-1] hold the coupling row applied at step k and
    the realized earlier-coordinate values it multiplies; biases[k-1] is
    that step's bias.  Returns (recursive value, closed-form value,
    absolute difference).

    The closed form telescopes the recursion: the initial value decays
    through the product of all n gains 1/(1+lambda), and each step's
    additive term decays through the gains after it.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)[:n]
    biases = np.asarray(biases, dtype=np.float64)[:n]
    alphas = np.asarray(alphas, dtype=np.float64)[:n]
    x_path = np.asarray(x_path, dtype=np.float64)[:n]
    if np.any(lambdas <= 0):
        raise ValueError("diagonal magnitudes must be > 0")
    cross = (
        np.sum(alphas * x_path, axis=1)
        if alphas.ndim == 2
        else alphas * x_path
    )

    recursive = aux_sequence(lambdas, cross + biases, x0).v[n]

    gains = 1.0 / (1.0 + lambdas)
    # suffix[k] = prod of gains from step k+1 through step n
    suffix = np.cumprod(gains[::-1])[::-1]
    closed = x0 * suffix[0] + float(np.sum(suffix * (cross + biases)))
    return float(recursive), float(closed), abs(float(recursive) - closed)


def rollout_certify(
    blocks: list[TriangularBlock], x0: np.ndarray, steps: int
) -> StabilityReport:
    """Iterate the stack from x0 and compare every visited state to the bound.

    Every single block application counts as one visited state (the bound
    holds for all of them, not only once per full stack sweep).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    certified = certified_bound(blocks, x0)
    prepared = [block_as_lists(b) for b in blocks]
    dim = x0.shape[0]
    x = x0.tolist()
    observed = [abs(v) for v in x]
    for _ in range(steps):
        for lam, rows, bias in prepared:
            x = _direct_core(lam, rows, bias, x)
            for m in range(dim):
                a = x[m] if x[m] >= 0 else -x[m]
                if a > observed[m]:
                    observed[m] = a
    observed = np.array(observed)
    constants = StabilityConstants(*stability_constants(blocks), certified)
    passed = bool(np.all(observed <= certified))
    return StabilityReport(constants, certified, observed, steps, passed)


def random_constrained_block(dim: int, rng: SeededRng, delta: float = 0.01) -> TriangularBlock:
    """Couplings and biases uniform in [-1, 1]; diagonal drawn then projected to [delta, 1]."""
    gen = rng.generator()
    diag = np.clip(-gen.uniform(-1.0, 1.0, dim), delta, 1.0)
    coupling = np.tril(gen.uniform(-1.0, 1.0, (dim, dim)), -1)
    bias = gen.uniform(-1.0, 1.0, dim)
    return TriangularBlock(diag, coupling, bias)


def random_constrained_stack(
    rng: SeededRng, max_dim: int = 16, max_blocks: int = 8, delta: float = 0.01
) -> tuple[list[TriangularBlock], np.ndarray]:
    """A random stack plus a start state, dimensions drawn uniformly."""
    gen = rng.generator()
    dim = int(gen.integers(1, max_dim + 1))
    k = int(gen.integers(1, max_blocks + 1))
    blocks = [random_constrained_block(dim, rng.child(i), delta) for i in range(k)]
    x0 = rng.child(1000).generator().uniform(-1.0, 1.0, dim)
    return blocks, x0


def divergence_witness(
    blocks: list[TriangularBlock],
    x0: np.ndarray,
    bad_diag: float = 0.5,
    drive_bias: float = 1.0,
    threshold: float = 1e12,
    max_steps: int = 1000,
) -> tuple[bool, int]:
    """Break the constraint on one coordinate and iterate the stack explicitly.

    The first block's first diagonal entry is replaced by +bad_diag and its
    bias set to +drive_bias, then x <- x + relu(Wx + b) runs through the
    stack until the state magnitude crosses the threshold.  Returns
    (diverged, steps taken).
    """
    weights = [b.weight_matrix() for b in blocks]
    biases = [b.bias.copy() for b in blocks]
    weights[0][0, 0] = bad_diag
    biases[0][0] = drive_bias
    x = np.asarray(x0, dtype=np.float64).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, max_steps + 1):
            for w, b in zip(weights, biases):
                x = x + np.maximum(0.0, w @ x + b)
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > threshold:
                return True, step
    return False, max_steps


@dataclass
class ErrorCurve:
    """Forecast error against the exact solver, per rollout step."""

    steps: np.ndarray
    times: np.ndarray
    mse: np.ndarray
    relative_error_pct: np.ndarray


def make_truth_stepper(dataset: TrajectoryDataset, substeps: int = 16):
    """One-step ground-truth advance matching the dataset's equation."""
    if dataset.equation == "advection":
        return lambda u: advect_exact(u, dataset.dt)
    nu = dataset.viscosity
    return lambda u: burgers_solve(u, dataset.dt, nu, substeps)


def error_curve(
    net: ForecastNet,
    forecast_set: TrajectoryDataset,
    n_steps: int,
    oracle_step,
    mode: str | None = None,
) -> ErrorCurve:
    """Average per-step forecast error over every sample of a forecast split.

    Predictions roll out in latent space for the implicit kind and
    auto-regressively for the explicit baselines (overridable via mode).
    Diverged predictions enter the averages as infinity.
    """
    if mode is None:
        mode = "latent" if net.kind == "implicit_relu" else "autoregressive"
    if mode not in ("latent", "autoregressive"):
        raise ValueError(f"unknown forecast mode {mode!r}")
    roll = forecast_latent if mode == "latent" else forecast_autoregressive

    n = len(forecast_set)
    sq_err = np.zeros((n_steps, n))
    rel = np.zeros((n_steps, n))
    with np.errstate(over="ignore", invalid="ignore"):
        for j, (u0, _) in enumerate(forecast_set.pairs):
            result = roll(net, u0, n_steps, forecast_set.dt)
            truth = u0
            for step in range(n_steps):
                truth = oracle_step(truth)
                pred = result.fields[step].values
                if np.all(np.isfinite(pred)):
                    diff = pred - truth.values
                    sq_err[step, j] = np.mean(diff**2)
                    rel[step, j] = 100.0 * np.linalg.norm(diff) / np.linalg.norm(truth.values)
                else:
                    sq_err[step, j] = np.inf
                    rel[step, j] = np.inf
    steps = np.arange(1, n_steps + 1)
    return ErrorCurve(
        steps=steps,
        times=steps * forecast_set.dt,
        mse=sq_err.mean(axis=1),
        relative_error_pct=rel.mean(axis=1),
    )


# ---------------------------------------------------------------------------
# Named verification suites (shared by the CLI and the acceptance tests)
# ---------------------------------------------------------------------------


def run_theorem_suite(cases: int = 100, seed: int = 0, steps: int = 10_000) -> SuiteResult:
    """Random constrained stacks never leave their certified envelope."""
    root = SeededRng(seed)
    worst = np.inf
    failures = 0
    for i in range(cases):
        blocks, x0 = random_constrained_stack(root.child(i))
        report = rollout_certify(blocks, x0, steps)
        margin = float(np.min(report.certified - report.observed))
        worst = min(worst, margin)
        if not report.passed:
            failures += 1
    return SuiteResult(
        "theorem", cases, failures == 0, worst, f"{failures} of {cases} rollouts left the bound"
    )


def run_divergence_suite(
    cases: int = 100, seed: int = 0, threshold: float = 1e12, max_steps: int = 1000
) -> SuiteResult:
    """With the constraint broken on one coordinate, explicit rollouts blow up."""
    root = SeededRng(seed)
    diverged = 0
    worst_steps = 0
    for i in range(cases):
        blocks, x0 = random_constrained_stack(root.child(i))
        hit, steps = divergence_witness(blocks, x0, threshold=threshold, max_steps=max_steps)
        if hit:
            diverged += 1
            worst_steps = max(worst_steps, steps)
    frac = diverged / cases
    return SuiteResult(
        "divergence",
        cases,
        frac >= 0.95,
        frac,
        f"{diverged} of {cases} witnesses crossed {threshold:g} (slowest in {worst_steps} steps)",
    )


def run_lemma_suite(cases: int = 1000, seed: int = 0, max_n: int = 100) -> SuiteResult:
    """Closed form of the comparison sequence agrees with its recursion."""
    root = SeededRng(seed)
    worst = 0.0
    failures = 0
    for i in range(cases):
        gen = root.child(i).generator()
        n = int(gen.integers(1, max_n + 1))
        width = int(gen.integers(0, 6))
        lambdas = gen.uniform(0.01, 1.0, n)
        alphas = gen.uniform(-1.0, 1.0, (n, width))
        x_path = gen.uniform(-1.0, 1.0, (n, width))
        biases = gen.uniform(-1.0, 1.0, n)
        x0 = float(gen.uniform(-1.0, 1.0))
        recursive, _, abs_diff = lemma_vn_check(lambdas, alphas, biases, x_path, x0, n)
        rel = abs_diff / max(1.0, abs(recursive))
        worst = max(worst, rel)
        if rel > 1e-10:
            failures += 1
    return SuiteResult(
        "lemma", cases, failures == 0, worst, f"worst relative recursion/closed-form gap {worst:.3e}"
    )


def run_sandwich_suite(cases: int = 1000, seed: int = 0, steps: int = 200) -> SuiteResult:
    """1-D trajectories stay between the frozen start and the comparison sequence.

    Checked for a single constant-coefficient block iterated in time, where
    the two-sided envelope is exact: the trajectory either tracks the
    comparison sequence or freezes at the start value.
    """
    root = SeededRng(seed)
    worst = 0.0
    failures = 0
    slack = 1e-10
    for i in range(cases):
        gen = root.child(i).generator()
        lam = float(np.clip(-gen.uniform(-1.0, 1.0), 0.01, 1.0))
        bias = float(gen.uniform(-1.0, 1.0))
        x0 = float(gen.uniform(-2.0, 2.0))
        block = TriangularBlock(np.array([lam]), np.zeros((1, 1)), np.array([bias]))
        x = np.array([x0])
        v = x0
        for _ in range(steps):
            x, _ = solve_direct(block, x)
            v = (v + bias) / (1.0 + lam)
            lo = min(x0, v) - slack
            hi = max(x0, v) + slack
            violation = max(lo - x[0], x[0] - hi, 0.0)
            worst = max(worst, violation)
            if violation > 0:
                failures += 1
                break
    return SuiteResult(
        "sandwich", cases, failures == 0, worst, f"worst envelope violation {worst:.3e}"
    )


def run_solver_suite(cases: int = 1000, seed: int = 0, max_dim: int = 32) -> SuiteResult:
    """Direct and quasi-Newton solvers agree; direct residuals stay at rounding level."""
    root = SeededRng(seed)
    worst_gap = 0.0
    worst_residual = 0.0
    failures = 0
    stalled = 0
    for i in range(cases):
        gen = root.child(i).generator()
        dim = int(gen.integers(1, max_dim + 1))
        block = random_constrained_block(dim, root.child(i, 1))
        x_in = gen.uniform(-1.0, 1.0, dim)
        x_direct, report = solve_direct(block, x_in)
        x_broyden, b_report = solve_broyden(block, x_in, tol=1e-10, max_iter=50)
        gap = float(np.max(np.abs(x_direct - x_broyden)))
        worst_gap = max(worst_gap, gap)
        worst_residual = max(worst_residual, report.final_residual)
        if not b_report.converged:
            stalled += 1  # allowed: agreement is the binding check
        if gap > 1e-8 or report.final_residual > 1e-12:
            failures += 1
    return SuiteResult(
        "solvers",
        cases,
        failures == 0,
        worst_gap,
        f"worst solver gap {worst_gap:.3e}, worst direct residual {worst_residual:.3e}"
        f", {stalled} runs hit the iteration cap",
    )


def run_gradcheck_suite(cases: int = 5, seed: int = 0, epsilon: float = 1e-6) -> SuiteResult:
    """Finite differences confirm the implicit-function-theorem gradients."""
    root = SeededRng(seed)
    worst = 0.0
    skipped = 0
    failures = 0
    grid, latent, depth = 12, 8, 2
    for i in range(cases):
        net = build_forecast_net("implicit_relu", grid, latent, depth, rng=root.child(i))
        gen = root.child(i, 1).generator()
        cfg = InitialConditionConfig(max_mode=3, amplitude_scale=1.0, seed=0)
        u0 = sample_initial_condition(cfg, root.child(i, 2), grid)
        target = Field1D(grid, u0.domain_length, gen.uniform(-1.0, 1.0, grid))
        report = finite_diff_check(net, u0, target, epsilon)
        worst = max(worst, report.max_relative_error)
        skipped += report.skipped
        if report.max_relative_error > 1e-5:
            failures += 1
    return SuiteResult(
        "gradcheck",
        cases,
        failures == 0,
        worst,
        f"worst relative gradient error {worst:.3e} ({skipped} gate-boundary entries skipped)",
    )


SUITES = {
    "theorem": run_theorem_suite,
    "lemma": run_lemma_suite,
    "sandwich": run_sandwich_suite,
    "gradcheck": run_gradcheck_suite,
    "solvers": run_solver_suite,
}
