"""Seeded randomness, initialization, activations, and spectral estimation.

Everything here operates on plain float64 numpy arrays.  All functions are
pure: identical inputs (including the seed value carried by SeededRng)
produce bit-identical outputs across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PF_MAX_ITER = 1000
PF_RAYLEIGH_TOL = 1e-10


@dataclass(frozen=True)
class SeededRng:
    """A reproducible random source: a 64-bit seed plus the generator name.

    The object is a value, not a stream: every ``generator()`` call starts
    the same sequence from scratch.  Independent substreams are obtained
    with ``child``, which derives a new seed from the parent seed and an
    integer key path, so parallel and serial consumers see identical draws.
    """

    seed: int
    algorithm: str = "pcg64"

    def __post_init__(self):
        if self.algorithm != "pcg64":
            raise ValueError(f"unsupported rng algorithm: {self.algorithm!r}")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *key: int) -> "SeededRng":
        """Derive an independent child source from an integer key path."""
        seq = np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in key))
        derived = int(seq.generate_state(1, np.uint64)[0])
        return SeededRng(derived, self.algorithm)


def relu(x: np.ndarray) -> np.ndarray:
    """Componentwise max(0, x)."""
    return np.maximum(0.0, np.asarray(x, dtype=np.float64))


def xavier_init(rows: int, cols: int, gain: float, rng: SeededRng) -> np.ndarray:
    """Uniform Xavier/Glorot matrix: entries in [-a, a], a = gain*sqrt(6/(rows+cols))."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be >= 1, got {rows}x{cols}")
    if gain <= 0:
        raise ValueError(f"gain must be > 0, got {gain}")
    bound = gain * np.sqrt(6.0 / (rows + cols))
    return rng.generator().uniform(-bound, bound, size=(rows, cols))


def pf_eigenvalue(m: np.ndarray) -> float:
    """Dominant (Perron) eigenvalue of a nonnegative square matrix.

    Power iteration from the all-ones vector, with the Rayleigh quotient as
    the running estimate; stops once the estimate changes by less than
    1e-10 between sweeps.  Convergence is linear in the spectral gap, so a
    defective dominant eigenvalue (repeated diagonal of a triangular
    matrix) is resolved only to a few digits; the estimate then errs on
    the large side.  A nilpotent matrix drives the iterate to zero and
    yields exactly 0.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if np.any(m < 0):
        raise ValueError("matrix has negative entries")
    n = m.shape[0]
    x = np.ones(n)
    estimate = 0.0
    for _ in range(PF_MAX_ITER):
        y = m @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        new_estimate = float(x @ y) / float(x @ x)
        x = y / norm
        if abs(new_estimate - estimate) <= PF_RAYLEIGH_TOL:
            return new_estimate
        estimate = new_estimate
    return estimate
