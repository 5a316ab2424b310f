"""Boundary-weighted binary cross-entropy, weighted IoU, and the joint
two-head training objective.

Both losses consume raw logits and apply the sigmoid internally in a
numerically stable form; they register a single fused node on the graph
with hand-derived gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, add, stable_sigmoid, tracing

WEIGHT_LAMBDA = 5.0
WEIGHT_KERNEL = 15


@dataclass
class LossBreakdown:
    """Per-head loss terms; total is their plain sum."""

    bce_coarse: float
    iou_coarse: float
    bce_final: float
    iou_final: float

    @property
    def total(self) -> float:
        return self.bce_coarse + self.iou_coarse + self.bce_final + self.iou_final


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _box_sum(g: np.ndarray, k: int) -> np.ndarray:
    pad = (k - 1) // 2
    n, c, h, w = g.shape
    padded = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    table = np.zeros((n, c, h + k, w + k))
    table[:, :, 1:, 1:] = padded.cumsum(axis=2).cumsum(axis=3)
    return (
        table[:, :, k:, k:]
        - table[:, :, :-k, k:]
        - table[:, :, k:, :-k]
        + table[:, :, :-k, :-k]
    )


def _box_mean(g: np.ndarray, k: int) -> np.ndarray:
    """k x k neighborhood average, stride 1, same size, normalized by the
    in-bounds window count so constant masks map to constant means.

    Integer-exact for binary input via summed-area tables.
    """
    counts = _box_sum(np.ones_like(g), k)
    return _box_sum(g, k) / counts


def pixel_weights(gt, lam: float = WEIGHT_LAMBDA, k: int = WEIGHT_KERNEL) -> np.ndarray:
    """Per-pixel attention weights 1 + lam * |box_mean(G) - G|, in [1, 1+lam].

    Boundary pixels, where the local average disagrees with the label, get
    the largest weights.
    """
    g = _as_array(gt)
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("pixel_weights: ground truth must be strictly binary")
    return 1.0 + lam * np.abs(_box_mean(g, k) - g)


def _check_triplet(z, g, w, op):
    if z.shape != g.shape or z.shape != w.shape:
        raise ShapeError(f"{op}: logits {z.shape}, target {g.shape}, weights {w.shape} must match")


def weighted_bce(logits: Tensor, gt, weights, graph=None) -> Tensor:
    """Weight-normalized binary cross-entropy on logits.

    sum(w * [max(z,0) - z*g + log(1+exp(-|z|))]) / sum(w), the stable
    rewrite of -g*log(sigmoid) - (1-g)*log(1-sigmoid).
    """
    z = logits.data
    g = _as_array(gt)
    w = _as_array(weights)
    _check_triplet(z, g, w, "weighted_bce")
    wsum = w.sum()
    per_pixel = np.maximum(z, 0.0) - z * g + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.full((1, 1, 1, 1), (w * per_pixel).sum() / wsum))
    if tracing(graph, (logits,)):
        out.requires_grad = True
        dz = w * (stable_sigmoid(z) - g) / wsum

        def bwd(grad):
            return (grad[0, 0, 0, 0] * dz,)

        graph.record(out, (logits,), bwd)
    return out


def weighted_iou(logits: Tensor, gt, weights, graph=None) -> Tensor:
    """Weighted soft-IoU loss 1 - (inter+1)/(union+1) on sigmoid(logits),
    with union = sum(w*(p+g)) - inter; lies in [0, 1)."""
    z = logits.data
    g = _as_array(gt)
    w = _as_array(weights)
    _check_triplet(z, g, w, "weighted_iou")
    p = stable_sigmoid(z)
    inter = (w * p * g).sum()
    union = (w * (p + g)).sum() - inter
    num = inter + 1.0
    den = union + 1.0
    out = Tensor(np.full((1, 1, 1, 1), 1.0 - num / den))
    if tracing(graph, (logits,)):
        out.requires_grad = True
        # d(den)/dp = w*(1-g), d(num)/dp = w*g
        dp = -(w * g * den - num * w * (1.0 - g)) / (den * den)
        dz = dp * p * (1.0 - p)

        def bwd(grad):
            return (grad[0, 0, 0, 0] * dz,)

        graph.record(out, (logits,), bwd)
    return out


def total_loss(coarse_logits: Tensor, final_logits: Tensor, gt, graph=None):
    """Joint objective: (bce + iou) applied to both prediction heads against
    the same mask, each pixel weighted by its boundary difficulty.

    Returns (scalar Tensor, LossBreakdown).
    """
    g = _as_array(gt)
    w = pixel_weights(g)
    bce_c = weighted_bce(coarse_logits, g, w, graph)
    iou_c = weighted_iou(coarse_logits, g, w, graph)
    bce_f = weighted_bce(final_logits, g, w, graph)
    iou_f = weighted_iou(final_logits, g, w, graph)
    total = add(add(bce_c, iou_c, graph), add(bce_f, iou_f, graph), graph)
    breakdown = LossBreakdown(
        bce_coarse=float(bce_c.data[0, 0, 0, 0]),
        iou_coarse=float(iou_c.data[0, 0, 0, 0]),
        bce_final=float(bce_f.data[0, 0, 0, 0]),
        iou_final=float(iou_f.data[0, 0, 0, 0]),
    )
    return total, breakdown
