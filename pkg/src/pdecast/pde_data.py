"""One-step supervised datasets for two periodic 1-D transport equations.

The physical state lives on the uniform grid z_i = 2*pi*i/G (left endpoint
included, right excluded), which is the natural sampling for the discrete
Fourier transform.  Ground truth comes from spectral solvers:

* advection  psi_t = -(1/4) psi_z        -- exact phase shift per mode
* Burgers    psi_t = -(1/2)(psi^2)_z + nu psi_zz
             -- pseudo-spectral, 2/3-rule dealiasing, exact integrating
                factor for the diffusion, classical RK4 in time

Datasets are plain UTF-8 text so they diff cleanly; values are printed with
17 significant digits, which round-trips float64 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import SeededRng

TWO_PI = 2.0 * np.pi

DATASET_MAGIC = "#pdecast-dataset v1"

EQUATIONS = ("advection", "burgers")
SPLITS = ("train", "val", "forecast")

DEFAULT_VISCOSITY = 1.0
DEFAULT_SUBSTEPS = 16


class DatasetFormatError(ValueError):
    """Raised when a dataset file violates the documented layout."""


class SolverBlowupError(RuntimeError):
    """Raised when the time stepper produces non-finite values (substepping too coarse)."""


@dataclass
class Field1D:
    """A real function sampled on a periodic uniform grid."""

    grid_size: int
    domain_length: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid_size,):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid_size {self.grid_size}"
            )


def grid_points(grid_size: int, domain_length: float = TWO_PI) -> np.ndarray:
    return domain_length * np.arange(grid_size) / grid_size


@dataclass
class InitialConditionConfig:
    """Distribution of initial states: a random truncated Fourier series."""

    max_mode: int = 5
    amplitude_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_mode < 1:
            raise ValueError("max_mode must be >= 1")
        if self.amplitude_scale <= 0:
            raise ValueError("amplitude_scale must be > 0")


@dataclass
class TrajectoryDataset:
    """Supervised one-step pairs (u at t=0, u at t=dt) plus generation metadata."""

    equation: str
    dt: float
    grid_size: int
    split: str
    seed: int
    pairs: list = field(default_factory=list)
    viscosity: float | None = None
    domain_length: float = TWO_PI

    def __post_init__(self):
        if self.equation not in EQUATIONS:
            raise ValueError(f"unknown equation {self.equation!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        for u0, u1 in self.pairs:
            if u0.grid_size != self.grid_size or u1.grid_size != self.grid_size:
                raise ValueError("pair grid size does not match dataset grid size")

    def __len__(self) -> int:
        return len(self.pairs)

    def u0_matrix(self) -> np.ndarray:
        """Inputs stacked as columns, shape (grid_size, n_samples)."""
        return np.stack([p[0].values for p in self.pairs], axis=1)

    def u1_matrix(self) -> np.ndarray:
        """Targets stacked as columns, shape (grid_size, n_samples)."""
        return np.stack([p[1].values for p in self.pairs], axis=1)


def fourier_field(
    grid_size: int,
    cos_coeffs: np.ndarray,
    sin_coeffs: np.ndarray,
    domain_length: float = TWO_PI,
) -> Field1D:
    """Field sum_k (cos_coeffs[k-1] cos(kz) + sin_coeffs[k-1] sin(kz)), k starting at 1.

    No k=0 term, so the spatial mean is zero by construction.
    """
    cos_coeffs = np.asarray(cos_coeffs, dtype=np.float64)
    sin_coeffs = np.asarray(sin_coeffs, dtype=np.float64)
    z = grid_points(grid_size, domain_length)
    values = np.zeros(grid_size)
    for k in range(1, len(cos_coeffs) + 1):
        values += cos_coeffs[k - 1] * np.cos(k * z) + sin_coeffs[k - 1] * np.sin(k * z)
    return Field1D(grid_size, domain_length, values)


def sample_initial_condition(
    cfg: InitialConditionConfig, rng: SeededRng, grid_size: int
) -> Field1D:
    """Random zero-mean field: modes 1..max_mode with uniform coefficients damped by 1/k."""
    if grid_size < 4 * cfg.max_mode:
        raise ValueError(
            f"grid_size {grid_size} under-resolves max_mode {cfg.max_mode}"
            f" (need grid_size >= {4 * cfg.max_mode})"
        )
    gen = rng.generator()
    ks = np.arange(1, cfg.max_mode + 1)
    cos_coeffs = gen.uniform(-cfg.amplitude_scale, cfg.amplitude_scale, cfg.max_mode) / ks
    sin_coeffs = gen.uniform(-cfg.amplitude_scale, cfg.amplitude_scale, cfg.max_mode) / ks
    return fourier_field(grid_size, cos_coeffs, sin_coeffs)


def advect_exact(u0: Field1D, t: float) -> Field1D:
    """Advance psi_t = -(1/4) psi_z by t: each Fourier mode k picks up exp(-i k t/4).

    Exact translation u0(z - t/4) for band-limited fields.  For even grids
    the Nyquist mode has no well-defined phase shift on the grid; it is
    damped by cos(k t/4), which keeps the output real and the mean exact.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    spectrum = np.fft.rfft(u0.values)
    k = np.arange(spectrum.size, dtype=np.float64)
    shift = np.exp(-1j * k * t / 4.0)
    if u0.grid_size % 2 == 0:
        shift[-1] = np.cos(k[-1] * t / 4.0)
    values = np.fft.irfft(spectrum * shift, n=u0.grid_size)
    return Field1D(u0.grid_size, u0.domain_length, values)


def _dealias_mask(n_modes: int, grid_size: int) -> np.ndarray:
    # 2/3 rule: zero the upper third of the spectrum before forming products.
    k = np.arange(n_modes)
    return k <= grid_size // 3


def burgers_solve(
    u0: Field1D, t: float, viscosity: float, substeps: int = DEFAULT_SUBSTEPS
) -> Field1D:
    """Advance psi_t = -(1/2)(psi^2)_z + nu psi_zz by t.

    Pseudo-spectral in space: the quadratic flux is formed in physical
    space and dealiased with the 2/3 rule; the diffusion term is integrated
    exactly through the integrating factor exp(-nu k^2 h); the remaining
    nonlinearity is advanced with classical RK4 using step h = t/substeps.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if viscosity <= 0:
        raise ValueError("viscosity must be > 0")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    g = u0.grid_size
    if t == 0:
        return Field1D(g, u0.domain_length, u0.values.copy())

    spectrum = np.fft.rfft(u0.values)
    k = np.arange(spectrum.size, dtype=np.float64)
    mask = _dealias_mask(spectrum.size, g)
    h = t / substeps
    half_decay = np.exp(-viscosity * k**2 * (h / 2.0))
    full_decay = half_decay**2

    def nonlinear(spec):
        u = np.fft.irfft(spec, n=g)
        flux = np.fft.rfft(u * u)
        return -0.5j * k * np.where(mask, flux, 0.0)

    for _ in range(substeps):
        k1 = nonlinear(spectrum)
        stage_a = half_decay * (spectrum + 0.5 * h * k1)
        k2 = nonlinear(stage_a)
        stage_b = half_decay * spectrum + 0.5 * h * k2
        k3 = nonlinear(stage_b)
        stage_c = full_decay * spectrum + h * half_decay * k3
        k4 = nonlinear(stage_c)
        spectrum = full_decay * spectrum + (h / 6.0) * (
            full_decay * k1 + 2.0 * half_decay * (k2 + k3) + k4
        )
        if not np.all(np.isfinite(spectrum)):
            raise SolverBlowupError(
                f"non-finite state while stepping to t={t} with {substeps} substeps"
            )
    values = np.fft.irfft(spectrum, n=g)
    return Field1D(g, u0.domain_length, values)


def _solve_pair(equation, u0, dt, viscosity, substeps):
    if equation == "advection":
        return advect_exact(u0, dt)
    return burgers_solve(u0, dt, viscosity, substeps)


def build_dataset(
    equation: str,
    n_train: int,
    n_val: int,
    n_forecast: int,
    dt: float,
    grid_size: int,
    cfg: InitialConditionConfig,
    rng: SeededRng,
    viscosity: float = DEFAULT_VISCOSITY,
    substeps: int = DEFAULT_SUBSTEPS,
) -> tuple[TrajectoryDataset, TrajectoryDataset, TrajectoryDataset]:
    """Generate disjoint train/val/forecast splits of one-step pairs.

    Every sample draws its initial condition from an independently derived
    child seed, so the result does not depend on generation order.
    """
    if equation not in EQUATIONS:
        raise ValueError(f"unknown equation {equation!r}")
    counts = {"train": n_train, "val": n_val, "forecast": n_forecast}
    for name, count in counts.items():
        if count < 1:
            raise ValueError(f"n_{name} must be >= 1")
    nu = viscosity if equation == "burgers" else None
    datasets = []
    for split_index, split in enumerate(SPLITS):
        pairs = []
        for i in range(counts[split]):
            u0 = sample_initial_condition(cfg, rng.child(split_index, i), grid_size)
            u1 = _solve_pair(equation, u0, dt, viscosity, substeps)
            pairs.append((u0, u1))
        datasets.append(
            TrajectoryDataset(
                equation=equation,
                dt=dt,
                grid_size=grid_size,
                split=split,
                seed=rng.seed,
                pairs=pairs,
                viscosity=nu,
            )
        )
    return tuple(datasets)


def _format_value(v: float) -> str:
    return f"{v:.17g}"


def save_dataset(dataset: TrajectoryDataset, path) -> None:
    """Write the documented plain-text format; load_dataset inverts it bit-exactly."""
    lines = [DATASET_MAGIC]
    lines.append(f"#equation={dataset.equation}")
    lines.append(f"#dt={_format_value(dataset.dt)}")
    lines.append(f"#grid_size={dataset.grid_size}")
    lines.append(f"#domain_length={_format_value(dataset.domain_length)}")
    if dataset.equation == "burgers":
        lines.append(f"#viscosity={_format_value(dataset.viscosity)}")
    lines.append(f"#split={dataset.split}")
    lines.append(f"#seed={dataset.seed}")
    lines.append(f"#count={len(dataset.pairs)}")
    for u0, u1 in dataset.pairs:
        lines.append("u0: " + ",".join(_format_value(v) for v in u0.values))
        lines.append("u1: " + ",".join(_format_value(v) for v in u1.values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_record_line(line: str, tag: str, grid_size: int, domain_length: float) -> Field1D:
    if not line.startswith(tag + ": "):
        raise DatasetFormatError(f"expected a {tag!r} record line, got {line[:40]!r}")
    values = np.array([float(tok) for tok in line[len(tag) + 2 :].split(",")])
    if values.size != grid_size:
        raise DatasetFormatError(
            f"record length {values.size} does not match grid_size {grid_size}"
        )
    if not np.all(np.isfinite(values)):
        raise DatasetFormatError("record contains non-finite values")
    return Field1D(grid_size, domain_length, values)


def load_dataset(path) -> TrajectoryDataset:
    """Read a dataset file, validating header, metadata, and record lengths."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != DATASET_MAGIC:
        raise DatasetFormatError(f"missing magic header {DATASET_MAGIC!r}")
    meta = {}
    body_start = 1
    for i, line in enumerate(lines[1:], start=1):
        if not line.startswith("#"):
            body_start = i
            break
        key, sep, value = line[1:].partition("=")
        if not sep:
            raise DatasetFormatError(f"malformed metadata line {line!r}")
        meta[key] = value
        body_start = i + 1

    required = {"equation", "dt", "grid_size", "domain_length", "split", "seed", "count"}
    missing = required - meta.keys()
    if missing:
        raise DatasetFormatError(f"missing metadata keys: {sorted(missing)}")
    equation = meta["equation"]
    if equation not in EQUATIONS:
        raise DatasetFormatError(f"unknown equation tag {equation!r}")
    if equation == "advection" and "viscosity" in meta:
        raise DatasetFormatError("viscosity is not valid for the advection equation")
    if equation == "burgers" and "viscosity" not in meta:
        raise DatasetFormatError("burgers dataset is missing viscosity")

    grid_size = int(meta["grid_size"])
    domain_length = float(meta["domain_length"])
    count = int(meta["count"])
    record_lines = [ln for ln in lines[body_start:] if ln.strip()]
    if len(record_lines) != 2 * count:
        raise DatasetFormatError(
            f"expected {2 * count} record lines for count={count}, found {len(record_lines)}"
        )
    pairs = []
    for i in range(count):
        u0 = _parse_record_line(record_lines[2 * i], "u0", grid_size, domain_length)
        u1 = _parse_record_line(record_lines[2 * i + 1], "u1", grid_size, domain_length)
        pairs.append((u0, u1))
    return TrajectoryDataset(
        equation=equation,
        dt=float(meta["dt"]),
        grid_size=grid_size,
        split=meta["split"],
        seed=int(meta["seed"]),
        pairs=pairs,
        viscosity=float(meta["viscosity"]) if equation == "burgers" else None,
        domain_length=domain_length,
    )
