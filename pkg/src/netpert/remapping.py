"""Constraint-enforcement layer for raw perturbations.

Raw generator outputs are unconstrained real vectors; these remapping
functions turn them into domain-legal traffic modifications:

  * delay vectors bounded in mean and standard deviation, with perturbed
    delays kept non-negative,
  * packet-size padding quantized to protocol cell multiples under total
    and per-packet byte budgets,
  * dummy-packet insertion that shifts later packets and trims back to
    the model's fixed input length.

Size padding and insertion are step functions of the raw perturbation,
so their true input gradients vanish; training instead routes custom
straight-through gradients (batch sums, and for insertion value vectors
a copy of the output gradient at the selected positions). The numpy
cores here are shared by the public operations and by the torch
autograd wrappers used during generator training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

STD_FLOOR = 1e-8  # keeps the delay rescale finite when std(g) -> 0


@dataclass(frozen=True)
class TimingBudget:
    """Caps on the mean and standard deviation of added delay, seconds."""

    mu: float
    sigma: float

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")


@dataclass(frozen=True)
class SizeBudget:
    """Byte budgets for size padding.

    total: max bytes added per flow; per_packet: max bytes added to one
    packet; cell: protocol size quantum (1 when unconstrained).
    """

    total: int
    per_packet: int
    cell: int = 1

    def __post_init__(self):
        if self.total < 0 or self.per_packet < 1 or self.cell < 1:
            raise ValueError("need total >= 0, per_packet >= 1, cell >= 1")
        if self.per_packet < self.cell:
            raise ValueError("per_packet must be >= cell")


@dataclass
class InsertionPlan:
    """Where and what to inject.

    position_scores rank candidate insertion slots (top |score| wins);
    value_vectors supply the injected values for non-direction channels;
    count is the number of packets to inject.
    """

    position_scores: np.ndarray
    count: int
    value_vectors: list = field(default_factory=list)

    def __post_init__(self):
        self.position_scores = np.asarray(self.position_scores, dtype=np.float64)
        self.value_vectors = [np.asarray(v, dtype=np.float64) for v in self.value_vectors]
        if not 0 <= self.count <= len(self.position_scores):
            raise ValueError(f"count={self.count} out of range for length {len(self.position_scores)}")
        for v in self.value_vectors:
            if len(v) != len(self.position_scores):
                raise ValueError("value vectors must match position_scores length")

    def positions(self) -> np.ndarray:
        """Selected insertion positions, ascending original coordinates."""
        return select_positions(self.position_scores, self.count)


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


def constrain_delays(g, budget: TimingBudget) -> np.ndarray:
    """Rescale a raw delay perturbation to satisfy the timing budget.

    Shifts the vector so its mean magnitude is at most mu, then scales by
    min(std, sigma)/std so the standard deviation is at most sigma
    (population std; floored at STD_FLOOR for degenerate inputs).
    """
    g = np.asarray(g, dtype=np.float64)
    mean = g.mean()
    shifted = g - max(mean - budget.mu, 0.0) - min(mean + budget.mu, 0.0)
    std = max(g.std(), STD_FLOOR)
    return shifted * (min(std, budget.sigma) / std)


def remap_timing(x, g, budget: TimingBudget) -> np.ndarray:
    """Add a budget-constrained delay perturbation to an IPD vector.

    The budget bounds hold before the final non-negativity clamp; clamping
    can only reduce how far the perturbed delays stray.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape[-1] != g.shape[-1]:
        raise ValueError(f"length mismatch: x has {x.shape[-1]}, g has {g.shape[-1]}")
    return np.maximum(x + constrain_delays(g, budget), 0.0)


def constrain_delays_t(g: torch.Tensor, budget: TimingBudget) -> torch.Tensor:
    """Torch twin of constrain_delays; differentiable end to end."""
    mean = g.mean()
    shifted = g - (mean - budget.mu).clamp_min(0.0) - (mean + budget.mu).clamp_max(0.0)
    std = g.std(unbiased=False).clamp_min(STD_FLOOR)
    return shifted * (torch.minimum(std, std.new_tensor(budget.sigma)) / std)


def remap_timing_t(x: torch.Tensor, g: torch.Tensor, budget: TimingBudget) -> torch.Tensor:
    return (x + constrain_delays_t(g, budget)).clamp_min(0.0)


# ---------------------------------------------------------------------------
# Sizes
# ---------------------------------------------------------------------------


def size_additions(a, budget: SizeBudget) -> np.ndarray:
    """Per-packet byte additions for a raw size perturbation.

    Visits indices in descending order of a (ties: lower index first) and
    adds cell-quantized bytes until the total budget runs out. Every
    addition is a multiple of the cell size and at most per_packet bytes.
    """
    a = np.asarray(a, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError("size perturbation entries must be finite")
    delta = np.zeros(len(a), dtype=np.int64)
    remaining = budget.total
    for i in np.argsort(-a, kind="stable"):
        if remaining <= 0:
            break
        d = budget.cell * math.floor(min(a[i], budget.per_packet, remaining) / budget.cell)
        if d <= 0:
            continue
        delta[i] = d
        remaining -= d
    return delta


def remap_size(x, a, budget: SizeBudget) -> np.ndarray:
    """Pad packet sizes according to a raw perturbation and a byte budget."""
    x = np.asarray(x)
    a = np.asarray(a, dtype=np.float64)
    if x.shape[-1] != a.shape[-1]:
        raise ValueError(f"length mismatch: x has {x.shape[-1]}, a has {a.shape[-1]}")
    return x + size_additions(a, budget)


def size_gradient(batch_grads) -> np.ndarray:
    """Straight-through gradient for size padding: the batch sum.

    batch_grads holds one loss gradient w.r.t. the remapped sizes per
    batch input; the element-wise sum is routed to the raw perturbation.
    """
    grads = np.asarray(batch_grads, dtype=np.float64)
    if grads.size == 0:
        raise ValueError("empty gradient batch")
    if grads.ndim == 1:
        grads = grads[None]
    return grads.sum(axis=0)


# ---------------------------------------------------------------------------
# Insertion
# ---------------------------------------------------------------------------


def select_positions(position_scores, count: int) -> np.ndarray:
    """Top-`count` positions by |score|, ascending (ties: lower index)."""
    scores = np.asarray(position_scores, dtype=np.float64)
    if not 0 <= count <= len(scores):
        raise ValueError(f"count={count} out of range for length {len(scores)}")
    if count == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-np.abs(scores), kind="stable")
    return np.sort(order[:count])


def insertion_layout(position_scores, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Output-slot source map for inserting at the selected positions.

    Returns (positions, source) where source[j] = i >= 0 copies original
    entry i into output slot j, and source[j] = -(k+1) places the k-th
    inserted packet there. Insertions land at their original-coordinate
    index; later entries shift right, and the result is trimmed to the
    original length.
    """
    positions = select_positions(position_scores, count)
    length = len(np.asarray(position_scores))
    source = np.empty(length, dtype=np.int64)
    j = 0
    k = 0
    for i in range(length):
        if k < count and positions[k] == i and j < length:
            source[j] = -(k + 1)
            j += 1
            k += 1
        if j >= length:
            break
        source[j] = i
        j += 1
        if j >= length:
            break
    return positions, source


def insert_packets(x, plan: InsertionPlan, channel_kinds=None):
    """Inject `plan.count` packets into one or more feature channels.

    x is one feature vector or a sequence of aligned vectors. Each channel
    is either "direction" (insert +1 where the selected score is positive,
    else -1) or "value" (insert the matching value vector's entry at the
    selected position). channel_kinds defaults to a single direction
    channel when x is one vector and no value vectors are supplied, and to
    one "value" channel per value vector otherwise.
    """
    single = isinstance(x, np.ndarray) and x.ndim == 1 or (
        not isinstance(x, np.ndarray) and x and np.isscalar(x[0])
    )
    channels = [np.asarray(x)] if single else [np.asarray(c) for c in x]
    if channel_kinds is None:
        if len(channels) == 1 and not plan.value_vectors:
            channel_kinds = ("direction",)
        else:
            channel_kinds = ("value",) * len(channels)
    if len(channel_kinds) != len(channels):
        raise ValueError("one channel kind per channel required")
    n_value = sum(1 for kind in channel_kinds if kind == "value")
    if n_value > len(plan.value_vectors):
        raise ValueError(f"plan supplies {len(plan.value_vectors)} value vectors, {n_value} needed")
    length = len(plan.position_scores)
    for c in channels:
        if len(c) != length:
            raise ValueError("channel length must match position_scores length")

    positions, source = insertion_layout(plan.position_scores, plan.count)
    orig_idx = np.maximum(source, 0)
    insert_slot = source < 0
    insert_k = -(source + 1)

    out_channels = []
    value_i = 0
    for c, kind in zip(channels, channel_kinds):
        out = c[orig_idx].copy()
        if plan.count:
            if kind == "direction":
                inserted = np.where(plan.position_scores[positions] > 0, 1, -1)
            else:
                inserted = plan.value_vectors[value_i][positions]
            out[insert_slot] = inserted[insert_k[insert_slot]].astype(out.dtype, copy=False)
        if kind == "value":
            value_i += 1
        out_channels.append(out)
    return out_channels[0] if single else out_channels


def insertion_position_gradient(batch_grads) -> np.ndarray:
    """Straight-through gradient for insertion position scores.

    A (batch, length) array is summed over the batch. A stacked
    (channel, batch, length) array — one gradient batch per injected
    feature channel — returns the average of the per-channel batch sums.
    """
    grads = np.asarray(batch_grads, dtype=np.float64)
    if grads.size == 0:
        raise ValueError("empty gradient batch")
    if grads.ndim == 1:
        return grads.copy()
    if grads.ndim == 2:
        return grads.sum(axis=0)
    if grads.ndim == 3:
        return grads.sum(axis=1).mean(axis=0)
    raise ValueError(f"expected at most 3 dims, got {grads.ndim}")


def insertion_value_gradient(plan: InsertionPlan, grad_out) -> np.ndarray:
    """Gradient for an injected value vector: copy at selected positions.

    Zero everywhere except the plan's selected positions, where the
    output gradient entry at the same index passes through.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape[-1] != len(plan.position_scores):
        raise ValueError("gradient length must match position_scores length")
    out = np.zeros_like(grad_out)
    p = plan.positions()
    out[..., p] = grad_out[..., p]
    if out.ndim > 1:
        out = out.sum(axis=tuple(range(out.ndim - 1)))
    return out


# ---------------------------------------------------------------------------
# Torch autograd wrappers (used by generator training)
# ---------------------------------------------------------------------------


class _SizeRemapFn(torch.autograd.Function):
    """Size padding with the batch-sum straight-through gradient."""

    @staticmethod
    def forward(ctx, a, x, total, per_packet, cell):
        budget = SizeBudget(total, per_packet, cell)
        delta = size_additions(a.detach().cpu().numpy(), budget)
        return x + torch.as_tensor(delta, dtype=x.dtype, device=x.device)

    @staticmethod
    def backward(ctx, grad_out):
        grad_a = grad_out.sum(dim=0) if grad_out.dim() > 1 else grad_out
        return grad_a, grad_out, None, None, None


def remap_size_t(x: torch.Tensor, a: torch.Tensor, budget: SizeBudget) -> torch.Tensor:
    """Pad a (batch of) size vector(s); gradients flow straight through to a."""
    return _SizeRemapFn.apply(a, x, budget.total, budget.per_packet, budget.cell)


class _InsertFn(torch.autograd.Function):
    """Packet insertion with custom gradients for scores and values.

    Scores receive the channel-averaged batch sum of the output gradient;
    each value vector receives the output gradient copied at the selected
    positions; the input channels receive the true shift/trim adjoint.
    """

    @staticmethod
    def forward(ctx, scores, values, x, count, kinds):
        # x: (channels, batch, length); values: (n_value_channels, length)
        positions, source = insertion_layout(scores.detach().cpu().numpy(), count)
        length = x.shape[-1]
        src = torch.as_tensor(source, device=x.device)
        orig_idx = src.clamp_min(0)
        insert_slot = src < 0
        insert_k = -(src + 1)

        out = x.index_select(-1, orig_idx).clone()
        if count:
            pos_t = torch.as_tensor(positions, device=x.device)
            value_i = 0
            for c, kind in enumerate(kinds):
                if kind == "direction":
                    inserted = torch.where(
                        scores[pos_t] > 0,
                        torch.ones(count, dtype=x.dtype, device=x.device),
                        -torch.ones(count, dtype=x.dtype, device=x.device),
                    )
                else:
                    inserted = values[value_i][pos_t].to(x.dtype)
                    value_i += 1
                out[c, :, insert_slot] = inserted[insert_k[insert_slot]]
        ctx.save_for_backward(src, torch.as_tensor(positions, device=x.device))
        ctx.kinds = kinds
        ctx.length = length
        ctx.x_shape = x.shape
        return out

    @staticmethod
    def backward(ctx, grad_out):
        src, positions = ctx.saved_tensors
        kinds = ctx.kinds
        # straight-through to the position scores: per-channel batch sums, averaged
        grad_scores = grad_out.sum(dim=1).mean(dim=0)
        # value vectors: copy the summed output gradient at the selected positions
        n_value = sum(1 for k in kinds if k == "value")
        grad_values = None
        if n_value:
            grad_values = grad_out.new_zeros((n_value, ctx.length))
            value_i = 0
            for c, kind in enumerate(kinds):
                if kind != "value":
                    continue
                g = grad_out[c].sum(dim=0)
                grad_values[value_i, positions] = g[positions]
                value_i += 1
        # true adjoint of the gather for the original channels
        grad_x = grad_out.new_zeros(ctx.x_shape)
        keep = src >= 0
        grad_x[:, :, src[keep]] = grad_out[:, :, keep]
        return grad_scores, grad_values, grad_x, None, None


def insert_packets_t(x: torch.Tensor, scores: torch.Tensor, values, count: int, kinds) -> torch.Tensor:
    """Inject packets into stacked channels (channels, batch, length)."""
    if values is None:
        values = scores.new_zeros((0, x.shape[-1]))
    return _InsertFn.apply(scores, values, x, count, tuple(kinds))
