"""Convolution, normalization, pooling, and resize operators.

Convolution is cross-correlation (no kernel flip). Forward and the two
gradient paths share one pair of gather/scatter kernels, so the transposed
convolution is the exact adjoint of the forward convolution by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, tracing


class InvalidSpecError(ValueError):
    """A convolution/pooling specification yields no valid output."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    transposed: bool = False

    def __post_init__(self):
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw, self.stride, self.dilation) < 1:
            raise InvalidSpecError(f"non-positive field in {self}")
        if self.padding < 0:
            raise InvalidSpecError(f"negative padding in {self}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        if self.transposed:
            oh = (h - 1) * self.stride - 2 * self.padding + self.dilation * (kh - 1) + 1
            ow = (w - 1) * self.stride - 2 * self.padding + self.dilation * (kw - 1) + 1
        else:
            oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
            ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if oh < 1 or ow < 1:
            raise InvalidSpecError(f"{self} gives empty {oh}x{ow} output for {h}x{w} input")
        return oh, ow


_OFFSETS_CACHE: dict = {}


def _offsets(kh, kw, stride, dilation, oh, ow):
    """Row/col gather indices, one (oh*ow,) grid per kernel tap."""
    key = (kh, kw, stride, dilation, oh, ow)
    hit = _OFFSETS_CACHE.get(key)
    if hit is not None:
        return hit
    i0 = np.repeat(np.arange(kh) * dilation, kw)
    j0 = np.tile(np.arange(kw) * dilation, kh)
    ii = stride * np.repeat(np.arange(oh), ow)
    jj = stride * np.tile(np.arange(ow), oh)
    rows = i0[:, None] + ii[None, :]
    cols = j0[:, None] + jj[None, :]
    _OFFSETS_CACHE[key] = (rows, cols, i0, j0)
    return rows, cols, i0, j0


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _gather(xp, kh, kw, stride, dilation, oh, ow):
    """(n, c, H, W) padded input -> (n, c*kh*kw, oh*ow) patch matrix.

    Built with one strided slice copy per kernel tap so the reshape is free.
    """
    n, c = xp.shape[:2]
    patches = np.empty((n, c, kh * kw, oh, ow))
    for ki in range(kh):
        for kj in range(kw):
            r, q = ki * dilation, kj * dilation
            patches[:, :, ki * kw + kj] = xp[
                :, :, r : r + stride * (oh - 1) + 1 : stride, q : q + stride * (ow - 1) + 1 : stride
            ]
    return patches.reshape(n, c * kh * kw, oh * ow)


def _scatter(cols_mat, n, c, hp, wp, kh, kw, stride, dilation, oh, ow):
    """Adjoint of _gather: (n, c*K, L) -> (n, c, hp, wp), overlaps summed."""
    out = np.zeros((n, c, hp, wp))
    _, _, i0, j0 = _offsets(kh, kw, stride, dilation, oh, ow)
    cols_mat = cols_mat.reshape(n, c, kh * kw, oh, ow)
    for k in range(kh * kw):
        r, s = int(i0[k]), int(j0[k])
        out[:, :, r : r + stride * oh : stride, s : s + stride * ow : stride] += cols_mat[:, :, k]
    return out


def _corr_forward(x, weight, stride, padding, dilation, oh, ow):
    """y[n,o] = sum_{c,taps} weight[o,c,taps] * x-patches; no bias."""
    co, ci, kh, kw = weight.shape
    xp = _pad_hw(x, padding)
    cols = _gather(xp, kh, kw, stride, dilation, oh, ow)
    out = np.matmul(weight.reshape(co, ci * kh * kw), cols)  # (n, co, L)
    return out.reshape(x.shape[0], co, oh, ow)


def _corr_input_grad(dy, weight, stride, padding, dilation, in_h, in_w):
    co, ci, kh, kw = weight.shape
    n = dy.shape[0]
    oh, ow = dy.shape[2], dy.shape[3]
    cols = np.matmul(weight.reshape(co, ci * kh * kw).T, dy.reshape(n, co, oh * ow))
    hp, wp = in_h + 2 * padding, in_w + 2 * padding
    dxp = _scatter(cols, n, ci, hp, wp, kh, kw, stride, dilation, oh, ow)
    if padding:
        return dxp[:, :, padding : padding + in_h, padding : padding + in_w]
    return dxp


def _corr_weight_grad(x, dy, stride, padding, dilation, kh, kw):
    n, ci = x.shape[:2]
    co = dy.shape[1]
    oh, ow = dy.shape[2], dy.shape[3]
    xp = _pad_hw(x, padding)
    cols = _gather(xp, kh, kw, stride, dilation, oh, ow)  # (n, ci*K, L)
    dw = np.matmul(dy.reshape(n, co, oh * ow), cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(co, ci, kh, kw)


def _check_bias(bias, channels, op):
    if bias is not None and bias.data.shape != (1, channels, 1, 1):
        raise ShapeError(f"{op}: bias shape {bias.data.shape} != (1, {channels}, 1, 1)")


def conv2d(x: Tensor, weight: Tensor, bias, spec: ConvSpec, graph=None) -> Tensor:
    if spec.transposed:
        raise InvalidSpecError("conv2d called with a transposed spec")
    co, ci, kh, kw = weight.data.shape
    if (co, ci) != (spec.out_channels, spec.in_channels) or (kh, kw) != spec.kernel:
        raise ShapeError(f"conv2d: weight shape {weight.data.shape} does not match {spec}")
    if x.data.shape[1] != ci:
        raise ShapeError(f"conv2d: input has {x.data.shape[1]} channels, spec wants {ci}")
    _check_bias(bias, co, "conv2d")
    n, _, h, w = x.data.shape
    oh, ow = spec.out_size(h, w)
    y = _corr_forward(x.data, weight.data, spec.stride, spec.padding, spec.dilation, oh, ow)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    operands = (x, weight) if bias is None else (x, weight, bias)
    if tracing(graph, operands):
        out.requires_grad = True
        xd, wd = x.data, weight.data

        def bwd(g):
            dx = _corr_input_grad(g, wd, spec.stride, spec.padding, spec.dilation, h, w)
            dw = _corr_weight_grad(xd, g, spec.stride, spec.padding, spec.dilation, kh, kw)
            if bias is None:
                return dx, dw
            return dx, dw, g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)

        graph.record(out, operands, bwd)
    return out


def conv_transpose2d(x: Tensor, weight: Tensor, bias, spec: ConvSpec, graph=None) -> Tensor:
    """Adjoint of conv2d under the same weight/stride/padding/dilation.

    Weight layout is (in_channels, out_channels, kh, kw): a weight used by
    conv2d to map ci -> co maps co -> ci here, satisfying
    <conv2d(x, w), y> == <x, conv_transpose2d(y, w)>.
    """
    if not spec.transposed:
        raise InvalidSpecError("conv_transpose2d called with a non-transposed spec")
    ci_t, co_t, kh, kw = weight.data.shape
    if (ci_t, co_t) != (spec.in_channels, spec.out_channels) or (kh, kw) != spec.kernel:
        raise ShapeError(f"conv_transpose2d: weight shape {weight.data.shape} does not match {spec}")
    if x.data.shape[1] != ci_t:
        raise ShapeError(f"conv_transpose2d: input has {x.data.shape[1]} channels, spec wants {ci_t}")
    _check_bias(bias, co_t, "conv_transpose2d")
    n, _, h, w = x.data.shape
    oh, ow = spec.out_size(h, w)
    y = _corr_input_grad(x.data, weight.data, spec.stride, spec.padding, spec.dilation, oh, ow)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    operands = (x, weight) if bias is None else (x, weight, bias)
    if tracing(graph, operands):
        out.requires_grad = True
        xd, wd = x.data, weight.data

        def bwd(g):
            dx = _corr_forward(g, wd, spec.stride, spec.padding, spec.dilation, h, w)
            dw = _corr_weight_grad(g, xd, spec.stride, spec.padding, spec.dilation, kh, kw)
            if bias is None:
                return dx, dw
            return dx, dw, g.sum(axis=(0, 2, 3)).reshape(1, co_t, 1, 1)

        graph.record(out, operands, bwd)
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BatchNormState:
    """Per-channel running mean/variance, updated only in training mode."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def copy(self):
        s = BatchNormState(self.running_mean.size)
        s.running_mean = self.running_mean.copy()
        s.running_var = self.running_var.copy()
        return s


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, graph=None) -> Tensor:
    c = x.data.shape[1]
    if gamma.data.shape != (1, c, 1, 1) or beta.data.shape != (1, c, 1, 1):
        raise ShapeError(f"batch_norm: gamma/beta must be (1, {c}, 1, 1)")
    if state.running_mean.size != c:
        raise ShapeError(f"batch_norm: state has {state.running_mean.size} channels, input {c}")
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased; running stats store the same
        state.running_mean = (1.0 - BN_MOMENTUM) * state.running_mean + BN_MOMENTUM * mu
        state.running_var = (1.0 - BN_MOMENTUM) * state.running_var + BN_MOMENTUM * var
    else:
        mu = state.running_mean
        var = state.running_var
    ivstd = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * ivstd.reshape(1, c, 1, 1)
    out = Tensor(gamma.data * xhat + beta.data)
    if tracing(graph, (x, gamma, beta)):
        out.requires_grad = True
        gd = gamma.data
        iv = ivstd.reshape(1, c, 1, 1)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

        if training:

            def bwd(g):
                dxhat = g * gd
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (iv / m) * (m * dxhat - s1 - xhat * s2)
                dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
                return dx, dgamma, dbeta

        else:

            def bwd(g):
                dx = g * gd * iv
                dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
                return dx, dgamma, dbeta

        graph.record(out, (x, gamma, beta), bwd)
    return out


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def pool(x: Tensor, kind: str, k: int = 2, s: int = 2, padding: int = 0, graph=None) -> Tensor:
    n, c, h, w = x.data.shape
    if kind == "global-average":
        out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
        if tracing(graph, (x,)):
            out.requires_grad = True
            graph.record(out, (x,), lambda g: (np.broadcast_to(g / (h * w), (n, c, h, w)).copy(),))
        return out
    if kind not in ("average", "max"):
        raise InvalidSpecError(f"unknown pool kind {kind!r}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise InvalidSpecError(f"pool kernel {k} larger than padded {h}x{w} input")
    oh = (h + 2 * padding - k) // s + 1
    ow = (w + 2 * padding - k) // s + 1
    xp = _pad_hw(x.data, padding)
    rows, cols, i0, j0 = _offsets(k, k, s, 1, oh, ow)
    windows = xp[:, :, rows, cols]  # (n, c, k*k, L)
    if kind == "average":
        out = Tensor(windows.mean(axis=2).reshape(n, c, oh, ow))
        if tracing(graph, (x,)):
            out.requires_grad = True

            def bwd(g):
                gl = g.reshape(n, c, oh, ow) / (k * k)
                dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
                for t in range(k * k):
                    r, q = int(i0[t]), int(j0[t])
                    dxp[:, :, r : r + s * oh : s, q : q + s * ow : s] += gl
                if padding:
                    dxp = dxp[:, :, padding : padding + h, padding : padding + w]
                return (dxp,)

            graph.record(out, (x,), bwd)
        return out
    # max pool: gradient routed to the first maximum in each window
    amax = windows.argmax(axis=2)  # (n, c, L)
    out = Tensor(np.take_along_axis(windows, amax[:, :, None, :], axis=2)[:, :, 0].reshape(n, c, oh, ow))
    if tracing(graph, (x,)):
        out.requires_grad = True

        def bwd(g):
            gl = g.reshape(n, c, oh * ow)
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
            for t in range(k * k):
                r, q = int(i0[t]), int(j0[t])
                contrib = (gl * (amax == t)).reshape(n, c, oh, ow)
                dxp[:, :, r : r + s * oh : s, q : q + s * ow : s] += contrib
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            return (dxp,)

        graph.record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centers, no corner alignment)
# ---------------------------------------------------------------------------

_INTERP_CACHE: dict = {}


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix applying 1-D bilinear resampling."""
    key = (n_in, n_out)
    hit = _INTERP_CACHE.get(key)
    if hit is not None:
        return hit
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(int)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(int)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    _INTERP_CACHE[key] = m
    return m


def resize_bilinear_array(x: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Resize the trailing two axes of an (n, c, h, w) array."""
    h, w = x.shape[2], x.shape[3]
    if (h, w) == (th, tw):
        return x.copy()
    rh = interp_matrix(h, th)
    rw = interp_matrix(w, tw)
    y = np.einsum("ph,nchw->ncpw", rh, x, optimize=True)
    return np.einsum("qw,ncpw->ncpq", rw, y, optimize=True)


def upsample_bilinear(x: Tensor, target: tuple[int, int], graph=None) -> Tensor:
    th, tw = target
    if th < 1 or tw < 1:
        raise ShapeError(f"upsample_bilinear: bad target {target}")
    n, c, h, w = x.data.shape
    if (h, w) == (th, tw):
        out = Tensor(x.data.copy())
        if tracing(graph, (x,)):
            out.requires_grad = True
            graph.record(out, (x,), lambda g: (g,))
        return out
    rh = interp_matrix(h, th)
    rw = interp_matrix(w, tw)
    y = np.einsum("ph,nchw->ncpw", rh, x.data, optimize=True)
    y = np.einsum("qw,ncpw->ncpq", rw, y, optimize=True)
    out = Tensor(y)
    if tracing(graph, (x,)):
        out.requires_grad = True

        def bwd(g):
            d = np.einsum("hp,ncpq->nchq", rh.T, g, optimize=True)
            d = np.einsum("wq,nchq->nchw", rw.T, d, optimize=True)
            return (d,)

        graph.record(out, (x,), bwd)
    return out
