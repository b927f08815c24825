"""Forecasting models: constrained implicit residual net and explicit baselines.

All three kinds share the shape linear encoder -> K residual blocks ->
linear decoder.  The implicit kind keeps its blocks inside the hard
constraint (diagonal magnitudes in [delta, 1]) so the latent recursion is
provably bounded; forecasting then applies the block stack N times inside
the latent space with a single encode and per-step decodes.  The explicit
kinds forecast auto-regressively through the full network and are allowed
to diverge: the first non-finite state poisons the rest of the trajectory
with an infinity sentinel instead of aborting.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad_engine
from .core_math import SeededRng, relu, xavier_init
from .implicit_block import DenseLayer, TriangularBlock, explicit_step, solve_direct_batch
from .pde_data import TWO_PI, Field1D

MODEL_MAGIC = "#pdecast-model v1"

KINDS = ("implicit_relu", "explicit_relu", "explicit_tanh")

DEFAULT_DELTA = 0.01


class CheckpointFormatError(ValueError):
    """Raised when a model file violates the documented layout."""


@dataclass
class ForecastNet:
    kind: str
    grid_size: int
    latent_dim: int
    enc_weight: np.ndarray
    enc_bias: np.ndarray
    blocks: list
    dec_weight: np.ndarray
    dec_bias: np.ndarray
    delta: float = DEFAULT_DELTA
    seed: int = 0
    rng_algorithm: str = "pcg64"
    domain_length: float = TWO_PI

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.enc_weight.shape != (self.latent_dim, self.grid_size):
            raise ValueError("encoder weight shape mismatch")
        if self.dec_weight.shape != (self.grid_size, self.latent_dim):
            raise ValueError("decoder weight shape mismatch")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)


@dataclass
class ForecastResult:
    """Predictions at times n*dt plus the latent infinity norm per step."""

    times: np.ndarray
    fields: list
    latent_norms: np.ndarray
    final_latent: np.ndarray | None = None

    def diverged(self) -> bool:
        return not np.all(np.isfinite(self.latent_norms))


@dataclass
class BlockRecord:
    block: object
    z_in: np.ndarray
    z_out: np.ndarray
    mask: np.ndarray | None  # ReLU activity; None for tanh blocks
    act: np.ndarray | None  # activation output; explicit blocks only


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    records: list = field(default_factory=list)
    z_final: np.ndarray | None = None


def build_forecast_net(
    kind: str,
    grid_size: int,
    latent_dim: int,
    num_blocks: int,
    gain: float = 1.0,
    delta: float = DEFAULT_DELTA,
    rng: SeededRng = SeededRng(0),
) -> ForecastNet:
    """Xavier-initialized model; implicit diagonals start inside [delta, 1].

    Block weights draw a full square matrix; the implicit kind keeps only
    the strict lower triangle as couplings and clamps the (negated)
    diagonal into the constraint, mirroring the projection applied after
    every training step.  Biases start at zero.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    enc_weight = xavier_init(latent_dim, grid_size, gain, rng.child(0))
    dec_weight = xavier_init(grid_size, latent_dim, gain, rng.child(1))
    blocks = []
    for i in range(num_blocks):
        w = xavier_init(latent_dim, latent_dim, gain, rng.child(2, i))
        if kind == "implicit_relu":
            diag_neg = np.clip(-np.diag(w), delta, 1.0)
            blocks.append(TriangularBlock(diag_neg, np.tril(w, -1), np.zeros(latent_dim)))
        else:
            blocks.append(DenseLayer(w, np.zeros(latent_dim)))
    return ForecastNet(
        kind=kind,
        grid_size=grid_size,
        latent_dim=latent_dim,
        enc_weight=enc_weight,
        enc_bias=np.zeros(latent_dim),
        blocks=blocks,
        dec_weight=dec_weight,
        dec_bias=np.zeros(grid_size),
        delta=delta,
        seed=rng.seed,
        rng_algorithm=rng.algorithm,
    )


def parameters(net: ForecastNet) -> list[tuple[str, np.ndarray]]:
    """Named live parameter arrays, in checkpoint order."""
    params = [("encoder.weight", net.enc_weight), ("encoder.bias", net.enc_bias)]
    for i, block in enumerate(net.blocks):
        if isinstance(block, TriangularBlock):
            params.append((f"block.{i}.diag", block.diag_neg))
            params.append((f"block.{i}.couplings", block.coupling))
        else:
            params.append((f"block.{i}.weight", block.weight))
        params.append((f"block.{i}.bias", block.bias))
    params.append(("decoder.weight", net.dec_weight))
    params.append(("decoder.bias", net.dec_bias))
    return params


def _activation_name(kind: str) -> str:
    return "tanh" if kind == "explicit_tanh" else "relu"


def _apply_block_batch(net: ForecastNet, block, z: np.ndarray) -> np.ndarray:
    if isinstance(block, TriangularBlock):
        z_out, _ = solve_direct_batch(block, z)
        return z_out
    return explicit_step(block.weight, block.bias, z, _activation_name(net.kind))


def forward_batch(net: ForecastNet, inputs: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Full forward pass on a (grid_size, batch) matrix, recording what backward needs."""
    trace = ForwardTrace(inputs=inputs)
    z = net.enc_weight @ inputs + net.enc_bias[:, None]
    for block in net.blocks:
        if isinstance(block, TriangularBlock):
            z_out, mask = solve_direct_batch(block, z)
            trace.records.append(BlockRecord(block, z, z_out, mask, None))
        else:
            pre = block.weight @ z + block.bias[:, None]
            if net.kind == "explicit_tanh":
                act = np.tanh(pre)
                trace.records.append(BlockRecord(block, z, z + act, None, act))
            else:
                act = relu(pre)
                trace.records.append(BlockRecord(block, z, z + act, pre > 0.0, act))
            z_out = z + act
        z = z_out
    trace.z_final = z
    out = net.dec_weight @ z + net.dec_bias[:, None]
    return out, trace


def backward_batch(
    net: ForecastNet, trace: ForwardTrace, d_out: np.ndarray
) -> tuple[dict, np.ndarray]:
    """Gradients of every parameter plus the input, given d(loss)/d(output)."""
    grads = {}
    d_w, d_b, g = grad_engine.backward_linear(net.dec_weight, net.dec_bias, trace.z_final, d_out)
    grads["decoder.weight"] = d_w
    grads["decoder.bias"] = d_b
    for i in range(len(trace.records) - 1, -1, -1):
        rec = trace.records[i]
        block = rec.block
        if isinstance(block, TriangularBlock):
            bundle = grad_engine.backward_implicit(block, rec.z_in, rec.z_out, rec.mask, g)
            grads[f"block.{i}.diag"] = bundle.d_diag
            grads[f"block.{i}.couplings"] = bundle.d_couplings
            grads[f"block.{i}.bias"] = bundle.d_bias
            g = bundle.d_input
        else:
            act_prime = rec.mask if rec.mask is not None else 1.0 - rec.act**2
            d_pre = act_prime * g
            d_w, d_b, d_in = grad_engine.backward_linear(block.weight, block.bias, rec.z_in, d_pre)
            grads[f"block.{i}.weight"] = d_w
            grads[f"block.{i}.bias"] = d_b
            g = g + d_in
    d_w, d_b, d_input = grad_engine.backward_linear(net.enc_weight, net.enc_bias, trace.inputs, g)
    grads["encoder.weight"] = d_w
    grads["encoder.bias"] = d_b
    return grads, d_input


def forward_train(net: ForecastNet, u0: Field1D) -> Field1D:
    """Single-sample forward pass (one step of the learned dynamics)."""
    if u0.grid_size != net.grid_size:
        raise ValueError(f"field grid {u0.grid_size} does not match model grid {net.grid_size}")
    out, _ = forward_batch(net, u0.values[:, None])
    return Field1D(net.grid_size, u0.domain_length, out[:, 0].copy())


def encode(net: ForecastNet, u0: Field1D) -> np.ndarray:
    # Column-shaped matmul so the result is bit-identical to forward_batch.
    return (net.enc_weight @ u0.values[:, None] + net.enc_bias[:, None])[:, 0]


def _inf_field(net: ForecastNet) -> Field1D:
    return Field1D(net.grid_size, net.domain_length, np.full(net.grid_size, np.inf))


def forecast_from_latent(
    net: ForecastNet, z0: np.ndarray, steps: int, dt: float = 1.0
) -> ForecastResult:
    """Apply the block stack repeatedly in latent space, decoding every step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.asarray(z0, dtype=np.float64).copy()[:, None]
    times = dt * np.arange(1, steps + 1)
    fields = []
    norms = np.empty(steps)
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(steps):
            if not diverged:
                for block in net.blocks:
                    z = _apply_block_batch(net, block, z)
                pred = net.dec_weight @ z + net.dec_bias[:, None]
                if not (np.all(np.isfinite(z)) and np.all(np.isfinite(pred))):
                    diverged = True
            if diverged:
                fields.append(_inf_field(net))
                norms[n] = np.inf
            else:
                fields.append(Field1D(net.grid_size, net.domain_length, pred[:, 0].copy()))
                norms[n] = np.max(np.abs(z))
    final = None if diverged else z[:, 0].copy()
    return ForecastResult(times, fields, norms, final)


def forecast_latent(net: ForecastNet, u0: Field1D, steps: int, dt: float = 1.0) -> ForecastResult:
    """Encode once, roll the latent recursion N steps, decode each step."""
    if u0.grid_size != net.grid_size:
        raise ValueError(f"field grid {u0.grid_size} does not match model grid {net.grid_size}")
    return forecast_from_latent(net, encode(net, u0), steps, dt)


def forecast_autoregressive(
    net: ForecastNet, u0: Field1D, steps: int, dt: float = 1.0
) -> ForecastResult:
    """Feed each full-network output back as the next input (baseline mode)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if u0.grid_size != net.grid_size:
        raise ValueError(f"field grid {u0.grid_size} does not match model grid {net.grid_size}")
    u = u0.values.copy()[:, None]
    times = dt * np.arange(1, steps + 1)
    fields = []
    norms = np.empty(steps)
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(steps):
            if not diverged:
                z = net.enc_weight @ u + net.enc_bias[:, None]
                for block in net.blocks:
                    z = _apply_block_batch(net, block, z)
                u = net.dec_weight @ z + net.dec_bias[:, None]
                if not (np.all(np.isfinite(z)) and np.all(np.isfinite(u))):
                    diverged = True
            if diverged:
                fields.append(_inf_field(net))
                norms[n] = np.inf
            else:
                fields.append(Field1D(net.grid_size, net.domain_length, u[:, 0].copy()))
                norms[n] = np.max(np.abs(z))
    final = None if diverged else z[:, 0].copy()
    return ForecastResult(times, fields, norms, final)


def project_weights(net: ForecastNet, delta: float) -> int:
    """Clamp every implicit diagonal magnitude into [delta, 1]; returns entries changed.

    Idempotent; couplings and biases are untouched.  A no-op (with a
    warning) on explicit kinds, which carry no constraint.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if net.kind != "implicit_relu":
        warnings.warn(f"weight projection is a no-op for kind {net.kind!r}", stacklevel=2)
        return 0
    clipped = 0
    for block in net.blocks:
        before = block.diag_neg.copy()
        np.clip(block.diag_neg, delta, 1.0, out=block.diag_neg)
        clipped += int(np.count_nonzero(before != block.diag_neg))
    return clipped


def _format_value(v: float) -> str:
    return f"{v:.17g}"


def _write_array(lines: list, name: str, array: np.ndarray) -> None:
    lines.append(f"[{name}]")
    rows = array if array.ndim == 2 else array[None, :]
    for row in rows:
        lines.append(" ".join(_format_value(v) for v in row))


def save_checkpoint(net: ForecastNet, path) -> None:
    """Plain-text checkpoint; values round-trip float64 exactly."""
    lines = [MODEL_MAGIC]
    lines.append(f"#kind={net.kind}")
    lines.append(f"#grid_size={net.grid_size}")
    lines.append(f"#latent_dim={net.latent_dim}")
    lines.append(f"#num_blocks={net.num_blocks}")
    lines.append(f"#delta={_format_value(net.delta)}")
    lines.append(f"#seed={net.seed}")
    lines.append(f"#rng_algorithm={net.rng_algorithm}")
    for name, array in parameters(net):
        _write_array(lines, name, array)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ForecastNet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MODEL_MAGIC:
        raise CheckpointFormatError(f"missing magic header {MODEL_MAGIC!r}")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, sep, value = lines[i][1:].partition("=")
        if not sep:
            raise CheckpointFormatError(f"malformed metadata line {lines[i]!r}")
        meta[key] = value
        i += 1

    required = {"kind", "grid_size", "latent_dim", "num_blocks", "delta", "seed", "rng_algorithm"}
    missing = required - meta.keys()
    if missing:
        raise CheckpointFormatError(f"missing metadata keys: {sorted(missing)}")

    sections: dict[str, np.ndarray] = {}
    name = None
    rows: list[list[float]] = []

    def finish():
        if name is not None:
            if not rows:
                raise CheckpointFormatError(f"section [{name}] is empty")
            sections[name] = np.array(rows)

    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            finish()
            name = line[1:-1]
            rows = []
        else:
            if name is None:
                raise CheckpointFormatError(f"value line outside any section: {line[:40]!r}")
            rows.append([float(tok) for tok in line.split()])
    finish()

    kind = meta["kind"]
    grid_size = int(meta["grid_size"])
    latent_dim = int(meta["latent_dim"])
    num_blocks = int(meta["num_blocks"])

    def take(section, shape):
        if section not in sections:
            raise CheckpointFormatError(f"missing section [{section}]")
        array = sections.pop(section)
        flat_target = shape if len(shape) == 2 else (1, shape[0])
        if array.shape != flat_target:
            raise CheckpointFormatError(
                f"section [{section}] has shape {array.shape}, expected {flat_target}"
            )
        return array if len(shape) == 2 else array[0]

    enc_w = take("encoder.weight", (latent_dim, grid_size))
    enc_b = take("encoder.bias", (latent_dim,))
    blocks = []
    for k in range(num_blocks):
        if kind == "implicit_relu":
            diag = take(f"block.{k}.diag", (latent_dim,))
            coupling = take(f"block.{k}.couplings", (latent_dim, latent_dim))
            bias = take(f"block.{k}.bias", (latent_dim,))
            blocks.append(TriangularBlock(diag, coupling, bias))
        else:
            weight = take(f"block.{k}.weight", (latent_dim, latent_dim))
            bias = take(f"block.{k}.bias", (latent_dim,))
            blocks.append(DenseLayer(weight, bias))
    dec_w = take("decoder.weight", (grid_size, latent_dim))
    dec_b = take("decoder.bias", (grid_size,))
    if sections:
        raise CheckpointFormatError(f"unexpected sections: {sorted(sections)}")
    return ForecastNet(
        kind=kind,
        grid_size=grid_size,
        latent_dim=latent_dim,
        enc_weight=enc_w,
        enc_bias=enc_b,
        blocks=blocks,
        dec_weight=dec_w,
        dec_bias=dec_b,
        delta=float(meta["delta"]),
        seed=int(meta["seed"]),
        rng_algorithm=meta["rng_algorithm"],
    )
