"""Reverse-mode gradients for the fixed architecture.

The implicit layer is differentiated through its fixed point rather than
through solver iterations: with the ReLU activity mask D at the solution,
the adjoint y solves (I - (D W)^T) y = upstream, a triangular system with
unit-or-larger diagonal.  Linear layers get the usual affine adjoints.  A
central finite-difference checker validates whole models end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .implicit_block import TriangularBlock


@dataclass
class GradBundle:
    """Gradients of one implicit block: parameters plus the input."""

    d_diag: np.ndarray
    d_couplings: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray


def gate_mask(block: TriangularBlock, x_out: np.ndarray) -> np.ndarray:
    """ReLU activity at the fixed point: pre-activation strictly positive.

    Ties at exactly zero count as inactive, matching the forward solver's
    branch rule, so forward branch and backward mask always coincide.
    """
    pre = block.weight_matrix() @ x_out + (
        block.bias[:, None] if x_out.ndim == 2 else block.bias
    )
    return pre > 0.0


def backward_implicit(
    block: TriangularBlock,
    x_in: np.ndarray,
    x_out: np.ndarray,
    mask: np.ndarray,
    upstream: np.ndarray,
) -> GradBundle:
    """Adjoints of x_out = x_in + relu(W x_out + b) at a converged solve.

    Solves (I - D W)^T y = upstream by back substitution (the transposed
    system is upper triangular with diagonal 1 + mask*lam >= 1), then reads
    off d_input = y, d_bias = D y and dW[m, j] = mask[m] y[m] x_out[j] on
    the stored entries.  Vector arguments of shape (dim,) or batches of
    shape (dim, n) are both accepted; parameter gradients are summed over
    the batch.
    """
    single = upstream.ndim == 1
    x_out2 = x_out[:, None] if single else x_out
    up2 = upstream[:, None] if single else upstream
    mask2 = mask[:, None] if single else mask

    lam = block.diag_neg
    coupling = block.coupling
    m_dim = block.dim

    masked_y = np.empty_like(up2)
    y = np.empty_like(up2)
    for m in range(m_dim - 1, -1, -1):
        acc = coupling[m + 1 :, m] @ masked_y[m + 1 :, :] if m < m_dim - 1 else 0.0
        y[m, :] = (up2[m, :] + acc) / (1.0 + lam[m] * mask2[m, :])
        masked_y[m, :] = mask2[m, :] * y[m, :]

    d_w = masked_y @ x_out2.T
    d_diag = -np.diag(d_w).copy()
    d_couplings = np.tril(d_w, -1)
    d_bias = masked_y.sum(axis=1)
    d_input = y[:, 0] if single else y
    return GradBundle(d_diag, d_couplings, d_bias, d_input)


def backward_linear(
    weight: np.ndarray, bias: np.ndarray, x_in: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoints of the affine map weight @ x_in + bias.

    Accepts vectors or (dim, n) batches; weight/bias gradients are summed
    over the batch.
    """
    if upstream.ndim != x_in.ndim or (
        x_in.ndim == 2 and upstream.shape[1] != x_in.shape[1]
    ):
        raise ValueError("upstream and x_in batch shapes disagree")
    if weight.shape != (upstream.shape[0], x_in.shape[0]):
        raise ValueError(
            f"weight shape {weight.shape} does not map {x_in.shape[0]} -> {upstream.shape[0]}"
        )
    if x_in.ndim == 1:
        d_weight = np.outer(upstream, x_in)
        d_bias = upstream.copy()
    else:
        d_weight = upstream @ x_in.T
        d_bias = upstream.sum(axis=1)
    d_input = weight.T @ upstream
    return d_weight, d_bias, d_input


@dataclass
class FiniteDiffReport:
    max_relative_error: float
    checked: int
    skipped: int


def finite_diff_check(net, input_field, target_field, epsilon: float) -> FiniteDiffReport:
    """Compare analytic model gradients against central finite differences.

    Perturbs every parameter entry and every input entry by +/-epsilon
    under the grid-mean squared-error loss.  Perturbations that flip any
    ReLU gate land on a non-differentiable seam; those entries are skipped
    and counted instead of compared.  The error metric per entry is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    from . import network  # deferred: network builds on this module

    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")

    u = np.asarray(input_field.values, dtype=np.float64).copy()
    target = np.asarray(target_field.values, dtype=np.float64)
    grid = u.shape[0]

    def forward(values):
        out, trace = network.forward_batch(net, values[:, None])
        gates = [rec.mask for rec in trace.records if rec.mask is not None]
        signature = np.concatenate(gates).ravel() if gates else np.zeros(0, dtype=bool)
        loss = float(np.mean((out[:, 0] - target) ** 2))
        return loss, signature, out, trace

    _, base_sig, out, trace = forward(u)
    d_out = (2.0 / grid) * (out - target[:, None])
    grads, d_input = network.backward_batch(net, trace, d_out)

    max_err = 0.0
    checked = 0
    skipped = 0

    def probe(array, index, analytic):
        nonlocal max_err, checked, skipped
        orig = array[index]
        array[index] = orig + epsilon
        loss_plus, sig_plus, _, _ = forward(u)
        array[index] = orig - epsilon
        loss_minus, sig_minus, _, _ = forward(u)
        array[index] = orig
        if not (np.array_equal(sig_plus, base_sig) and np.array_equal(sig_minus, base_sig)):
            skipped += 1
            return
        numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        max_err = max(max_err, err)
        checked += 1

    for name, array in network.parameters(net):
        grad = grads[name]
        for index in np.ndindex(array.shape):
            probe(array, index, float(grad[index]))
    for i in range(grid):
        probe(u, i, float(d_input[i, 0]))

    return FiniteDiffReport(max_err, checked, skipped)
