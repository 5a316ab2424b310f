"""The five mask-evaluation measures and dataset-level aggregation.

Conventions (degenerate rules, tie-breaking, epsilons) are pinned in
docs/metrics_reference.md; the test suite holds a separate straight-line
transcription of the same document that every measure must match to 1e-9.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-8


class EmptyDatasetError(ValueError):
    """Metric aggregation was asked to average zero samples."""


def thread_cap() -> int:
    """Worker-thread limit from C2F_THREADS (0 or unset = auto)."""
    raw = os.environ.get("C2F_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    return cap if cap > 0 else (os.cpu_count() or 1)


@dataclass
class MaskPair:
    """A real-valued prediction in [0, 1] and a binary ground truth."""

    pred: np.ndarray
    gt: np.ndarray
    name: str = ""

    def __post_init__(self):
        pred = np.asarray(self.pred, dtype=np.float64)
        gt = np.asarray(self.gt)
        if pred.ndim != 2 or gt.ndim != 2:
            raise ValueError("prediction and ground truth must be 2-D maps")
        if pred.shape != gt.shape:
            raise ValueError(f"size mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
        if gt.dtype == np.uint8:
            gt = gt >= 128
        else:
            vals = np.unique(gt)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValueError("ground truth must be binary")
            gt = gt.astype(bool)
        self.pred = np.clip(pred, 0.0, 1.0)
        self.gt = gt


def pair_from_uint8(pred8: np.ndarray, gt8: np.ndarray, name: str = "") -> MaskPair:
    """Ingest 8-bit maps: prediction normalized by 255, truth thresholded at 128."""
    return MaskPair(np.asarray(pred8, dtype=np.float64) / 255.0, np.asarray(gt8, dtype=np.uint8), name)


# ---------------------------------------------------------------------------
# mean absolute error
# ---------------------------------------------------------------------------


def mae(pair: MaskPair) -> float:
    return float(np.abs(pair.pred - pair.gt.astype(np.float64)).mean())


# ---------------------------------------------------------------------------
# structure measure
# ---------------------------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    """2*mean / (mean^2 + 1 + 2*std); population std; denominator >= 1."""
    x = float(values.mean())
    sigma = float(values.std())
    return 2.0 * x / (x * x + 1.0 + 2.0 * sigma)


def _region_ssim(p: np.ndarray, g: np.ndarray) -> float:
    x = float(p.mean())
    y = float(g.mean())
    sx2 = float(((p - x) ** 2).mean())
    sy2 = float(((g - y) ** 2).mean())
    sxy = float(((p - x) * (g - y)).mean())
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx2 + sy2)
    if alpha != 0.0:
        return alpha / beta
    return 1.0 if beta == 0.0 else 0.0


def _centroid_splits(gt: np.ndarray) -> tuple[int, int]:
    """Split row/col (counts of the top/left blocks) at the mask centroid."""
    h, w = gt.shape
    area = gt.sum()
    if area == 0:
        return (h + 1) // 2, (w + 1) // 2
    rows = np.arange(1, h + 1)
    cols = np.arange(1, w + 1)
    cy = int(round(float((gt.sum(axis=1) * rows).sum() / area)))
    cx = int(round(float((gt.sum(axis=0) * cols).sum() / area)))
    return min(max(cy, 1), h), min(max(cx, 1), w)


def s_measure(pair: MaskPair, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term.

    Degenerate masks: empty ground truth scores 1 - mean(P); full scores
    mean(P).
    """
    pred, gt = pair.pred, pair.gt
    n_fg = int(gt.sum())
    n_total = gt.size
    if n_fg == 0:
        return float(1.0 - pred.mean())
    if n_fg == n_total:
        return float(pred.mean())

    o_fg = _object_score(pred[gt])
    o_bg = _object_score((1.0 - pred)[~gt])
    s_object = (n_fg * o_fg + (n_total - n_fg) * o_bg) / n_total

    cy, cx = _centroid_splits(gt)
    gf = gt.astype(np.float64)
    s_region = 0.0
    for rs, re, cs, ce in ((0, cy, 0, cx), (0, cy, cx, None), (cy, None, 0, cx), (cy, None, cx, None)):
        pb = pred[rs:re, cs:ce]
        if pb.size == 0:
            continue
        s_region += (pb.size / n_total) * _region_ssim(pb, gf[rs:re, cs:ce])

    return float(alpha * s_object + (1.0 - alpha) * s_region)


# ---------------------------------------------------------------------------
# adaptive F-measure
# ---------------------------------------------------------------------------


def adaptive_threshold(pred: np.ndarray) -> float:
    return float(min(2.0 * pred.mean(), 1.0))


def _binarize(pred: np.ndarray) -> np.ndarray:
    t = adaptive_threshold(pred)
    if t <= 0.0:  # all-zero prediction selects nothing
        return np.zeros_like(pred, dtype=bool)
    return pred >= t


def f_measure_adaptive(pair: MaskPair, beta2: float = 0.3) -> float:
    binary = _binarize(pair.pred)
    gt = pair.gt
    tp = float(np.logical_and(binary, gt).sum())
    pred_pos = float(binary.sum())
    actual_pos = float(gt.sum())
    precision = tp / pred_pos if pred_pos > EPS else 0.0
    recall = tp / actual_pos if actual_pos > EPS else 0.0
    den = beta2 * precision + recall
    if den <= EPS:
        return 0.0
    return (1.0 + beta2) * precision * recall / den


# ---------------------------------------------------------------------------
# weighted F-measure
# ---------------------------------------------------------------------------

_GAUSS_SIZE = 7
_GAUSS_SIGMA = 5.0
_DECAY_RATE = np.log(0.5) / 5.0


def _gauss_kernel() -> np.ndarray:
    half = _GAUSS_SIZE // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * _GAUSS_SIGMA**2))
    return k / k.sum()


_GAUSS = _gauss_kernel()


def _smooth_replicate(x: np.ndarray) -> np.ndarray:
    """7x7 Gaussian correlation with edge-replicated padding."""
    half = _GAUSS_SIZE // 2
    xp = np.pad(x, half, mode="edge")
    out = np.zeros_like(x)
    for di in range(_GAUSS_SIZE):
        for dj in range(_GAUSS_SIZE):
            out += _GAUSS[di, dj] * xp[di : di + x.shape[0], dj : dj + x.shape[1]]
    return out


def nearest_foreground(gt: np.ndarray, chunk: int = 2048):
    """Squared distance and flat index of the nearest foreground pixel.

    Ties break toward the smallest flat (row-major) index so that any
    reimplementation can reproduce the assignment exactly.
    """
    h, w = gt.shape
    n = h * w
    flat = gt.ravel()
    fg = np.flatnonzero(flat)
    if fg.size == 0:
        raise ValueError("nearest_foreground: mask has no foreground")
    fy, fx = np.divmod(fg.astype(np.int64), w)
    d2 = np.zeros(n, dtype=np.int64)
    idx = np.arange(n, dtype=np.int64)
    bg = np.flatnonzero(~flat)
    for start in range(0, bg.size, chunk):
        b = bg[start : start + chunk]
        by, bx = np.divmod(b.astype(np.int64), w)
        dd = (by[:, None] - fy[None, :]) ** 2 + (bx[:, None] - fx[None, :]) ** 2
        key = dd * n + fg[None, :]
        j = np.argmin(key, axis=1)
        rows = np.arange(b.size)
        d2[b] = dd[rows, j]
        idx[b] = fg[j]
    return d2.reshape(h, w), idx.reshape(h, w)


def weighted_f_measure(pair: MaskPair) -> float:
    """Dependency- and importance-weighted F-score (beta^2 = 1).

    Errors at background pixels are replaced by the error at their nearest
    foreground pixel, smoothed, min-combined at true foreground, and decayed
    with distance in the background before forming weighted precision/recall.
    Empty ground truth degenerates to 0.
    """
    gt = pair.gt
    if not gt.any():
        return 0.0
    gtf = gt.astype(np.float64)
    err = np.abs(pair.pred - gtf)

    d2, nearest = nearest_foreground(gt)
    moved = err.copy()
    moved[~gt] = err.ravel()[nearest[~gt]]
    smoothed = _smooth_replicate(moved)

    combined = err.copy()
    take = gt & (smoothed < err)
    combined[take] = smoothed[take]

    importance = np.ones_like(err)
    importance[~gt] = 2.0 - np.exp(_DECAY_RATE * np.sqrt(d2[~gt].astype(np.float64)))

    weighted_err = combined * importance
    tp_w = gtf.sum() - weighted_err[gt].sum()
    fp_w = weighted_err[~gt].sum()
    recall = 1.0 - weighted_err[gt].mean()
    precision = tp_w / max(tp_w + fp_w, EPS)
    den = max(recall + precision, EPS)
    return float(2.0 * recall * precision / den)


# ---------------------------------------------------------------------------
# adaptive E-measure
# ---------------------------------------------------------------------------


def e_measure_adaptive(pair: MaskPair) -> float:
    """Enhanced-alignment score of the adaptively binarized prediction.

    Degenerate truths: all-zero scores mean(1 - B); all-one scores mean(B).
    """
    gt = pair.gt
    binary = _binarize(pair.pred)
    n_fg = int(gt.sum())
    if n_fg == 0:
        return float((~binary).mean())
    if n_fg == gt.size:
        return float(binary.mean())
    bf = binary.astype(np.float64)
    gf = gt.astype(np.float64)
    phi_p = bf - bf.mean()
    phi_g = gf - gf.mean()
    align = 2.0 * phi_p * phi_g / (phi_p**2 + phi_g**2)
    enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


# ---------------------------------------------------------------------------
# dataset aggregation
# ---------------------------------------------------------------------------


@dataclass
class SampleMetrics:
    name: str
    mae: float
    s: float
    f: float
    fw: float
    e: float


@dataclass
class MetricReport:
    samples: list[SampleMetrics] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.samples)

    def mean(self, key: str) -> float:
        return float(np.mean([getattr(s, key) for s in self.samples]))

    def to_tsv(self) -> str:
        lines = ["name\tM\tS\tF\tFw\tE"]
        for s in self.samples:
            lines.append(f"{s.name}\t{s.mae:.6f}\t{s.s:.6f}\t{s.f:.6f}\t{s.fw:.6f}\t{s.e:.6f}")
        lines.append(
            "MEAN\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}".format(
                self.mean("mae"), self.mean("s"), self.mean("f"), self.mean("fw"), self.mean("e")
            )
        )
        return "\n".join(lines) + "\n"


def score_pair(pair: MaskPair) -> SampleMetrics:
    return SampleMetrics(
        name=pair.name,
        mae=mae(pair),
        s=s_measure(pair),
        f=f_measure_adaptive(pair),
        fw=weighted_f_measure(pair),
        e=e_measure_adaptive(pair),
    )


def evaluate_dataset(pairs) -> MetricReport:
    """Per-sample metrics then arithmetic means, in name order regardless of
    the order pairs arrive in."""
    pairs = sorted(pairs, key=lambda p: p.name)
    if not pairs:
        raise EmptyDatasetError("no mask pairs to evaluate")
    workers = min(thread_cap(), len(pairs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(score_pair, pairs))
    else:
        samples = [score_pair(p) for p in pairs]
    return MetricReport(samples=samples)
