"""Context-conditioned, bounded and gated correction of the anchor tensor.

View 0 is always the raw anchor tensor.  Each further view has its own head
that reads the context vector ``[h_global; h_blk]`` and predicts, per channel
and family, an unconstrained scale, bias and gate logit.  These are broadcast
over the features of the family and applied as

    corrected = raw * (1 + s_max*tanh(s)) + b_max*tanh(b)
    gate      = sigmoid(alpha) * sigmoid(g)
    view      = (1 - gate) * raw + gate * corrected
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .anchors import AnchorTensor, FamilyLayout
from .nn import MLP, Linear, Module
from .tensor import Tensor, as_tensor, ops


class BlockContext(Module):
    """Two-layer tanh MLP over the channel-averaged anchors of each block.

    ``pooling="channels"`` averages every channel; ``pooling="groups"``
    averages within each sensor group and concatenates the group means.
    """

    def __init__(self, width: int, out_dim: int, rng: np.random.Generator, hidden: int | None = None,
                 pooling: str = "channels", groups: tuple[tuple[int, ...], ...] | None = None):
        super().__init__()
        if pooling not in ("channels", "groups"):
            raise ValueError(f"block context pooling must be 'channels' or 'groups', got {pooling!r}")
        if pooling == "groups" and not groups:
            raise ValueError("block context pooling='groups' needs sensor groups")
        self.pooling, self.groups = pooling, groups
        n_in = width * (len(groups) if pooling == "groups" else 1)
        self.mlp = self.add_child("mlp", MLP(n_in, hidden or max(out_dim, 16), out_dim, rng))

    def __call__(self, anchors) -> Tensor:
        z = anchors.values if isinstance(anchors, AnchorTensor) else as_tensor(anchors)
        if self.pooling == "channels":
            pooled = ops.mean(z, axis=-2)
        else:
            pooled = ops.concat([ops.mean(z[..., list(g), :], axis=-2) for g in self.groups], axis=-1)
        return self.mlp(pooled)


class CorrectionHead(Module):
    """Predicts (scale, bias, gate) logits for one corrected view."""

    def __init__(self, ctx_dim: int, n_channels: int, n_families: int, rng: np.random.Generator,
                 hidden: int | None = None, alpha_init: float = -2.0):
        super().__init__()
        self.n_channels, self.n_families = n_channels, n_families
        self.trunk = self.add_child("trunk", Linear(ctx_dim, hidden or max(ctx_dim // 2, 1), rng))
        self.out = self.add_child("out", Linear(self.trunk.n_out, 3 * n_channels * n_families, rng))
        self.alpha = self.add_param("alpha", np.array(alpha_init))

    def __call__(self, h_ctx: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return predict_correction(h_ctx, self)


def predict_correction(h_ctx, head: CorrectionHead) -> tuple[Tensor, Tensor, Tensor]:
    """Unbounded (scale, bias, gate) logits, each shaped (..., C, n_families)."""
    h = as_tensor(h_ctx)
    raw = head.out(ops.tanh(head.trunk(h)))
    shaped = ops.reshape(raw, raw.shape[:-1] + (3, head.n_channels, head.n_families))
    return shaped[..., 0, :, :], shaped[..., 1, :, :], shaped[..., 2, :, :]


def broadcast_families(values, layout: FamilyLayout) -> Tensor:
    """(..., n_families) -> (..., D) by repeating each family value over its features."""
    v = as_tensor(values)
    if v.shape[-1] != len(layout):
        raise ValueError(f"family broadcast: expected {len(layout)} families, got shape {v.shape}")
    return ops.matmul(v, layout.expansion_matrix())


def apply_correction(z_raw, s_hat, b_hat, l_hat, alpha, s_max: float = 0.5,
                     b_max: float = 0.5) -> tuple[Tensor, Tensor, Tensor]:
    """Bounded affine correction mixed back into the raw anchors by a gate.

    All of ``s_hat``, ``b_hat``, ``l_hat`` must already broadcast against
    ``z_raw``.  Returns ``(view, gate, view - raw)``.
    """
    if not (s_max > 0 and b_max > 0):
        raise ValueError(f"correction bounds must be positive, got s_max={s_max}, b_max={b_max}")
    z = as_tensor(z_raw)
    target = z * (1.0 + s_max * ops.tanh(as_tensor(s_hat))) + b_max * ops.tanh(as_tensor(b_hat))
    gate = ops.sigmoid(as_tensor(alpha)) * ops.sigmoid(as_tensor(l_hat))
    view = z + gate * (target - z)
    return view, gate, view - z


@dataclass
class CorrectionBundle:
    """Multi-view anchors (B, N, K*C, D), view-major along the third axis."""

    z_multi: Tensor
    gates: list[Tensor]
    deltas: list[Tensor]
    n_views: int
    n_channels: int

    def view(self, k: int) -> Tensor:
        c = self.n_channels
        return self.z_multi[..., k * c:(k + 1) * c, :]


def assemble_views(z_raw: AnchorTensor, heads, h_ctx=None, s_max: float = 0.5,
                   b_max: float = 0.5) -> CorrectionBundle:
    """Identity view followed by one corrected view per head.

    ``h_ctx`` is the (B, N, ctx) context; it is unused when there are no heads.
    """
    raw = z_raw.values
    n_channels = raw.shape[-2]
    views, gates, deltas = [raw], [], []
    for head in heads:
        s_hat, b_hat, l_hat = predict_correction(h_ctx, head)
        s, b, g = (broadcast_families(t, z_raw.layout) for t in (s_hat, b_hat, l_hat))
        view, gate, delta = apply_correction(raw, s, b, g, head.alpha, s_max, b_max)
        views.append(view)
        gates.append(gate)
        deltas.append(delta)
    z_multi = raw if len(views) == 1 else ops.concat(views, axis=-2)
    return CorrectionBundle(z_multi=z_multi, gates=gates, deltas=deltas, n_views=len(views), n_channels=n_channels)


def correction_regularizers(bundle: CorrectionBundle) -> tuple[Tensor, Tensor]:
    """Plain L1 sums of the corrections and of their block-to-block changes.

    Deltas are (B, N, C, D); the block axis is -3.
    """
    l_delta = Tensor(0.0)
    l_tv = Tensor(0.0)
    for delta in bundle.deltas:
        l_delta = l_delta + ops.sum(ops.abs(delta))
        n_blocks = delta.shape[-3]
        if n_blocks >= 2:
            step = delta[..., 1:, :, :] - delta[..., :-1, :, :]
            l_tv = l_tv + ops.sum(ops.abs(step))
    return l_delta, l_tv


def correction_magnitudes(bundle: CorrectionBundle, z_raw: AnchorTensor, eps: float = 1e-8) -> dict[str, float]:
    """Mean |delta| / (|raw| + eps) per family over every corrected view."""
    layout = z_raw.layout
    raw = np.abs(z_raw.values.data)
    out = {}
    for name, start, stop in layout.families:
        if not bundle.deltas:
            out[name] = 0.0
            continue
        rel = [np.abs(d.data[..., start:stop]) / (raw[..., start:stop] + eps) for d in bundle.deltas]
        out[name] = float(np.mean(rel))
    return out


def write_magnitude_csv(path: str, rows) -> None:
    """Rows of (family, dataset, mean_rel_delta), written atomically."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["family", "dataset", "mean_rel_delta"])
        for family, dataset, value in rows:
            writer.writerow([family, dataset, f"{value:.10g}"])
    os.replace(tmp, path)
