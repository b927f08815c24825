"""The implicit residual layer and its fixed-point solvers.

A block applies x_out = x_in + relu(W x_out + b) where W couples each
coordinate only to strictly earlier ones (triangular) and carries a
negative diagonal -diag_neg.  That structure makes the fixed point exact
to solve coordinate-by-coordinate: per coordinate the ReLU gate is either
closed (identity) or open (one division), decided by the sign of a single
pre-activation.  A quasi-Newton root finder is kept alongside as an
independent route to the same solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import pf_eigenvalue, relu

BROYDEN_TOL = 1e-10
BROYDEN_MAX_ITER = 50

ACTIVATIONS = ("relu", "tanh")


@dataclass
class TriangularBlock:
    """One implicit residual layer.

    diag_neg holds the magnitudes lambda of the (negative) diagonal of W;
    coupling holds the strictly lower triangle (anything else passed in is
    zeroed on construction, so coordinate m depends only on coordinates
    before it).
    """

    diag_neg: np.ndarray
    coupling: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.diag_neg = np.asarray(self.diag_neg, dtype=np.float64)
        self.coupling = np.tril(np.asarray(self.coupling, dtype=np.float64), -1)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        m = self.diag_neg.shape[0]
        if self.coupling.shape != (m, m) or self.bias.shape != (m,):
            raise ValueError("inconsistent block shapes")
        if not (
            np.all(np.isfinite(self.diag_neg))
            and np.all(np.isfinite(self.coupling))
            and np.all(np.isfinite(self.bias))
        ):
            raise ValueError("block parameters must be finite")
        if np.any(self.diag_neg <= 0):
            raise ValueError("diagonal magnitudes must be strictly positive")

    @property
    def dim(self) -> int:
        return self.diag_neg.shape[0]

    def weight_matrix(self) -> np.ndarray:
        """The full W: strictly lower couplings plus diagonal -diag_neg."""
        return self.coupling - np.diag(self.diag_neg)


@dataclass
class DenseLayer:
    """Unconstrained residual layer for the explicit baselines."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[0] != self.weight.shape[1]:
            raise ValueError("weight must be square")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias length must match weight")

    @property
    def dim(self) -> int:
        return self.bias.shape[0]


@dataclass
class SolveReport:
    method: str
    iterations: int
    final_residual: float
    converged: bool


@dataclass
class StabilityConstants:
    """Worst-case parameter magnitudes of a block stack plus the derived envelope.

    min_diag is the smallest diagonal magnitude anywhere, max_coupling the
    largest off-diagonal magnitude, max_bias the largest bias magnitude;
    envelope is the per-coordinate trajectory bound built from them.
    """

    min_diag: float
    max_coupling: float
    max_bias: float
    envelope: np.ndarray


def fixed_point_residual(block: TriangularBlock, x_in: np.ndarray, x_out: np.ndarray) -> float:
    """Infinity norm of x_out - x_in - relu(W x_out + b)."""
    w = block.weight_matrix()
    return float(np.max(np.abs(x_out - x_in - relu(w @ x_out + block.bias))))


def _direct_core(lam, rows, bias, x):
    # Pure-python forward substitution; plain floats keep long rollouts cheap.
    out = [0.0] * len(lam)
    for m in range(len(lam)):
        row = rows[m]
        acc = 0.0
        for j in range(m):
            acc += row[j] * out[j]
        s = acc + bias[m] - lam[m] * x[m]
        if s <= 0.0:
            out[m] = x[m]
        else:
            out[m] = (x[m] + acc + bias[m]) / (1.0 + lam[m])
    return out


def block_as_lists(block: TriangularBlock):
    """Block parameters as python lists for the scalar solver core."""
    return (
        block.diag_neg.tolist(),
        [row[:m].tolist() for m, row in enumerate(block.coupling)],
        block.bias.tolist(),
    )


def solve_direct(block: TriangularBlock, x_in: np.ndarray) -> tuple[np.ndarray, SolveReport]:
    """Exact fixed point by coordinate-wise two-case substitution.

    For each coordinate in dependency order, the pre-activation
    s = -lam*x_in + coupling . x_out + b decides the gate: s <= 0 leaves
    the coordinate at x_in, s > 0 gives (x_in + coupling . x_out + b)/(1+lam).
    """
    x_in = np.asarray(x_in, dtype=np.float64)
    if x_in.shape != (block.dim,):
        raise ValueError(f"expected input of shape ({block.dim},), got {x_in.shape}")
    lam, rows, bias = block_as_lists(block)
    x_out = np.array(_direct_core(lam, rows, bias, x_in.tolist()))
    residual = fixed_point_residual(block, x_in, x_out)
    return x_out, SolveReport("direct", 1, residual, True)


def solve_direct_batch(block: TriangularBlock, x_in: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized direct solve over a batch of columns.

    x_in has shape (dim, batch); returns (x_out, gate mask) of the same
    shape.  Same two-case formula as solve_direct, evaluated per coordinate
    across the whole batch.
    """
    lam = block.diag_neg
    coupling = block.coupling
    x_out = np.empty_like(x_in)
    mask = np.empty(x_in.shape, dtype=bool)
    # pre-activation offset that does not depend on solved coordinates
    base = block.bias[:, None] - lam[:, None] * x_in
    gain = 1.0 / (1.0 + lam)
    for m in range(block.dim):
        s = coupling[m, :m] @ x_out[:m, :] + base[m] if m else base[m]
        # branch-free form of the two-case solve: the open gate gives
        # (x_in + acc + b)/(1+lam) = x_in + s/(1+lam), the closed one x_in
        x_out[m, :] = x_in[m, :] + np.maximum(s, 0.0) * gain[m]
        mask[m, :] = s > 0.0
    return x_out, mask


def solve_broyden(
    block: TriangularBlock,
    x_in: np.ndarray,
    tol: float = BROYDEN_TOL,
    max_iter: int = BROYDEN_MAX_ITER,
) -> tuple[np.ndarray, SolveReport]:
    """Fixed point via Broyden's first (good) quasi-Newton method.

    Solves g(x) = x - x_in - relu(W x + b) = 0 starting from x_in with the
    identity as initial inverse-Jacobian approximation, applying the
    rank-one inverse update every step.  No line search; the direct solver
    is the fallback when this does not converge.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    x_in = np.asarray(x_in, dtype=np.float64)
    w = block.weight_matrix()
    b = block.bias

    def g(x):
        return x - x_in - relu(w @ x + b)

    x = x_in.copy()
    gx = g(x)
    h_inv = np.eye(block.dim)
    iterations = 0
    while np.max(np.abs(gx)) > tol and iterations < max_iter:
        step = -h_inv @ gx
        x_new = x + step
        g_new = g(x_new)
        dg = g_new - gx
        h_dg = h_inv @ dg
        denom = float(step @ h_dg)
        if abs(denom) > 1e-300:
            h_inv += np.outer(step - h_dg, step @ h_inv) / denom
        x, gx = x_new, g_new
        iterations += 1
    residual = float(np.max(np.abs(gx)))
    return x, SolveReport("broyden", iterations, residual, residual <= tol)


def check_existence(block: TriangularBlock) -> tuple[bool, float]:
    """Fixed-point existence test: dominant eigenvalue of |W| below 1.

    Power iteration resolves a repeated triangular diagonal only slowly, so
    its estimate is floored at max(diag_neg), which is always an eigenvalue
    of |W|.  The combined estimate never undershoots, making a True verdict
    trustworthy and a False one conservative near the boundary.
    """
    estimate = pf_eigenvalue(np.abs(block.weight_matrix()))
    lam_pf = max(estimate, float(np.max(block.diag_neg)))
    return lam_pf < 1.0, lam_pf


def explicit_step(
    weight: np.ndarray, bias: np.ndarray, x_in: np.ndarray, activation: str = "relu"
) -> np.ndarray:
    """One explicit residual update x_in + activation(W x_in + b).

    x_in may be a vector (dim,) or a batch (dim, n).
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    pre = weight @ x_in + (bias[:, None] if x_in.ndim == 2 else bias)
    return x_in + (relu(pre) if activation == "relu" else np.tanh(pre))
