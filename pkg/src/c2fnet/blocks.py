"""Building blocks of the context-aware cross-level fusion network.

The pipeline: a five-level encoder pyramid feeds receptive-field blocks on
the high levels, two attention-fusion + global-context stages produce a
coarse map, and the coarse map gates the low levels feeding the final
inference head. All blocks are pure forwards over an optional Graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ops import BatchNormState, ConvSpec, batch_norm, conv2d, conv_transpose2d, pool, upsample_bilinear
from .tensor import ShapeError, Tensor


class Module:
    """Composite of named parameters, running-stat buffers, and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, BatchNormState):
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, state in self._buffers.items():
            yield prefix + name + ".running_mean", state.running_mean
            yield prefix + name + ".running_var", state.running_var
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_entries(self):
        """Ordered (name, array) pairs covering parameters and buffers."""
        entries = [(n, p.data) for n, p in self.named_parameters()]
        entries += list(self.named_buffers())
        return entries

    def load_state_entries(self, table: dict):
        for name, p in self.named_parameters():
            if name not in table:
                raise KeyError(f"missing parameter {name!r}")
            src = np.asarray(table[name], dtype=np.float64)
            if src.shape != p.data.shape:
                raise ShapeError(f"parameter {name!r}: stored {src.shape} != model {p.data.shape}")
            p.data = np.ascontiguousarray(src)
        for name, buf in self.named_buffers():
            if name not in table:
                raise KeyError(f"missing buffer {name!r}")
            src = np.asarray(table[name], dtype=np.float64)
            if src.shape != buf.shape:
                raise ShapeError(f"buffer {name!r}: stored {src.shape} != model {buf.shape}")
            buf[...] = src


def _init_conv_weight(rng, co, ci, kh, kw):
    bound = np.sqrt(3.0 / (ci * kh * kw))
    return rng.uniform(-bound, bound, size=(co, ci, kh, kw))


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, dilation=1, bias=True):
        super().__init__()
        self.spec = ConvSpec(cin, cout, (k, k), stride=stride, padding=padding, dilation=dilation)
        self.weight = Tensor(_init_conv_weight(rng, cout, cin, k, k), requires_grad=True)
        self.bias = Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True) if bias else None

    def forward(self, x, graph=None, training=False):
        return conv2d(x, self.weight, self.bias, self.spec, graph)


class ConvTranspose2d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, bias=True):
        super().__init__()
        self.spec = ConvSpec(cin, cout, (k, k), stride=stride, padding=padding, transposed=True)
        self.weight = Tensor(_init_conv_weight(rng, cin, cout, k, k), requires_grad=True)
        self.bias = Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True) if bias else None

    def forward(self, x, graph=None, training=False):
        return conv_transpose2d(x, self.weight, self.bias, self.spec, graph)


class BatchNorm2d(Module):
    def __init__(self, channels):
        super().__init__()
        self.gamma = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.state = BatchNormState(channels)

    def forward(self, x, graph=None, training=False):
        return batch_norm(x, self.gamma, self.beta, self.state, training, graph)


class ConvBNReLU(Module):
    """3x3-style conv -> batch norm -> relu unit used throughout the decoder."""

    def __init__(self, rng, cin, cout, k=3, stride=1, padding=1, dilation=1):
        super().__init__()
        # no conv bias: the following norm would cancel it exactly
        self.conv = Conv2d(rng, cin, cout, k, stride=stride, padding=padding,
                           dilation=dilation, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x, graph=None, training=False):
        return T.relu(self.bn.forward(self.conv.forward(x, graph), graph, training), graph)


class ConvTransposeBNReLU(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, padding=1):
        super().__init__()
        self.conv = ConvTranspose2d(rng, cin, cout, k, stride=stride, padding=padding, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x, graph=None, training=False):
        return T.relu(self.bn.forward(self.conv.forward(x, graph), graph, training), graph)


@dataclass
class FeaturePyramid:
    """Encoder outputs at strides 2/4/8/16/32; f3 sits in both the low and
    high groups."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    f5: Tensor

    def low_levels(self):
        return (self.f1, self.f2, self.f3)

    def high_levels(self):
        return (self.f3, self.f4, self.f5)


@dataclass
class NetOutputs:
    """Coarse-map and final-prediction logits, both at input resolution."""

    f_d: Tensor
    p: Tensor


class ResidualBlock(Module):
    def __init__(self, rng, channels):
        super().__init__()
        self.body = ConvBNReLU(rng, channels, channels, 3, padding=1)
        self.tail_conv = Conv2d(rng, channels, channels, 3, padding=1, bias=False)
        self.tail_bn = BatchNorm2d(channels)

    def forward(self, x, graph=None, training=False):
        y = self.body.forward(x, graph, training)
        y = self.tail_bn.forward(self.tail_conv.forward(y, graph), graph, training)
        return T.relu(T.add(x, y, graph), graph)


class Backbone(Module):
    """Tiny five-stage encoder: each stage halves resolution with a strided
    conv + one residual block, yielding the stride 2/4/8/16/32 pyramid."""

    def __init__(self, rng, widths=(16, 24, 32, 48, 64), in_channels=3):
        super().__init__()
        self.widths = tuple(widths)
        cin = in_channels
        for i, cout in enumerate(self.widths, start=1):
            setattr(self, f"down{i}", ConvBNReLU(rng, cin, cout, 3, stride=2, padding=1))
            setattr(self, f"res{i}", ResidualBlock(rng, cout))
            cin = cout

    def forward(self, image, graph=None, training=False) -> FeaturePyramid:
        n, c, h, w = image.shape
        if h % 32 or w % 32:
            raise ShapeError(f"input spatial dims must be divisible by 32, got {h}x{w}")
        feats = []
        x = image
        for i in range(1, 6):
            x = getattr(self, f"down{i}").forward(x, graph, training)
            x = getattr(self, f"res{i}").forward(x, graph, training)
            feats.append(x)
        return FeaturePyramid(*feats)


class RFB(Module):
    """Receptive field block: parallel branches with growing kernels and
    dilations; the last branch is added residually onto the fused rest.

    Branch k uses a 1x1 channel reduction, then for k >= 2 a (2k-1)x(2k-1)
    conv, then for k > 2 a 3x3 conv with dilation 2k-1. Branches 1..K-1 are
    concatenated and fused by a 1x1 conv; branch K is added, then ReLU.
    """

    def __init__(self, rng, cin, cout, branches=5):
        super().__init__()
        if branches < 2:
            raise ValueError("RFB needs at least two branches")
        self.branches = branches
        for k in range(1, branches + 1):
            setattr(self, f"b{k}_reduce", Conv2d(rng, cin, cout, 1))
            if k >= 2:
                span = 2 * k - 1
                setattr(self, f"b{k}_spread", Conv2d(rng, cout, cout, span, padding=k - 1))
            if k > 2:
                d = 2 * k - 1
                setattr(self, f"b{k}_dilate", Conv2d(rng, cout, cout, 3, padding=d, dilation=d))
        self.fuse = Conv2d(rng, cout * (branches - 1), cout, 1)

    def _branch(self, k, x, graph):
        y = getattr(self, f"b{k}_reduce").forward(x, graph)
        if k >= 2:
            y = getattr(self, f"b{k}_spread").forward(y, graph)
        if k > 2:
            y = getattr(self, f"b{k}_dilate").forward(y, graph)
        return y

    def forward(self, x, graph=None, training=False):
        outs = [self._branch(k, x, graph) for k in range(1, self.branches + 1)]
        fused = self.fuse.forward(T.concat_channels(outs[:-1], graph), graph)
        return T.relu(T.add(fused, outs[-1], graph), graph)


class MSCA(Module):
    """Multi-scale channel attention gate.

    One pointwise bottleneck stack (1x1 down -> BN -> ReLU -> 1x1 up -> BN)
    serves two branches: applied to the feature map directly (local context)
    and to its global average pool (global context, broadcast back over
    space). The sigmoid of the branch sum is the per-element gate in (0, 1).
    """

    def __init__(self, rng, channels, reduction=4):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        mid = channels // reduction
        self.pw1 = Conv2d(rng, channels, mid, 1, bias=False)
        self.bn1 = BatchNorm2d(mid)
        self.pw2 = Conv2d(rng, mid, channels, 1, bias=False)
        self.bn2 = BatchNorm2d(channels)

    def _stack(self, x, graph, training):
        y = self.bn1.forward(self.pw1.forward(x, graph), graph, training)
        y = self.pw2.forward(T.relu(y, graph), graph)
        return self.bn2.forward(y, graph, training)

    def forward(self, x, graph=None, training=False):
        n, c, h, w = x.shape
        local = self._stack(x, graph, training)
        gap = pool(x, "global-average", graph=graph)
        glob = self._stack(gap, graph, training)
        glob = upsample_bilinear(glob, (h, w), graph)
        return T.sigmoid(T.add(local, glob, graph), graph)


class ACFM(Module):
    """Attention-induced cross-level fusion of two adjacent feature levels.

    The smaller input is upsampled, the sum drives the attention gate M, and
    the fused map is the convex combination M * F_a + (1 - M) * up(F_b),
    finished by a 3x3 conv + BN + ReLU.
    """

    def __init__(self, rng, channels, reduction=4):
        super().__init__()
        self.msca = MSCA(rng, channels, reduction)
        self.out = ConvBNReLU(rng, channels, channels, 3, padding=1)

    def fuse(self, fa: Tensor, fb: Tensor, graph=None, training=False) -> Tensor:
        na, ca, ha, wa = fa.shape
        nb, cb, hb, wb = fb.shape
        if (na, ca) != (nb, cb):
            raise ShapeError(f"fusion inputs disagree: {fa.shape} vs {fb.shape}")
        if (hb, wb) != (ha, wa) and (2 * hb, 2 * wb) != (ha, wa):
            raise ShapeError(f"second input must match or be half of {ha}x{wa}, got {hb}x{wb}")
        fb_up = upsample_bilinear(fb, (ha, wa), graph)
        gate = self.msca.forward(T.add(fa, fb_up, graph), graph, training)
        keep = T.mul(gate, fa, graph)
        swap = T.mul(T.one_minus(gate, graph), fb_up, graph)
        return T.add(keep, swap, graph)

    def forward(self, fa, fb, graph=None, training=False):
        return self.out.forward(self.fuse(fa, fb, graph, training), graph, training)


class DGCM(Module):
    """Dual-branch global context refinement with a residual merge.

    A full-resolution branch and a 2x average-pooled branch are each gated
    by their own attention, recombined, and added back onto the input
    through convolutions. Inner convs are conv+BN+ReLU; the outermost conv
    keeps only the ReLU.
    """

    def __init__(self, rng, channels, reduction=4):
        super().__init__()
        self.conv_full = ConvBNReLU(rng, channels, channels, 3, padding=1)
        self.conv_pool = ConvBNReLU(rng, channels, channels, 3, padding=1)
        self.att_full = MSCA(rng, channels, reduction)
        self.att_pool = MSCA(rng, channels, reduction)
        self.conv_mid = ConvBNReLU(rng, channels, channels, 3, padding=1)
        self.conv_out = Conv2d(rng, channels, channels, 3, padding=1)

    def forward(self, x, graph=None, training=False):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"dual-branch refinement needs even spatial dims, got {h}x{w}")
        fc = self.conv_full.forward(x, graph, training)
        fcm = T.mul(fc, self.att_full.forward(fc, graph, training), graph)
        fp = self.conv_pool.forward(pool(x, "average", 2, 2, graph=graph), graph, training)
        fpm = T.mul(fp, self.att_pool.forward(fp, graph, training), graph)
        merged = T.add(fcm, upsample_bilinear(fpm, (h, w), graph), graph)
        mid = self.conv_mid.forward(merged, graph, training)
        return T.relu(self.conv_out.forward(T.add(x, mid, graph), graph), graph)


class MRB(Module):
    """Multi-scale residual block: 3x3 and 5x5 conv/transpose-conv streams,
    fused and added back onto the input."""

    def __init__(self, rng, channels):
        super().__init__()
        self.conv3 = ConvBNReLU(rng, channels, channels, 3, padding=1)
        self.dconv3 = ConvTransposeBNReLU(rng, channels, channels, 3, padding=1)
        self.conv5 = ConvBNReLU(rng, channels, channels, 5, padding=2)
        self.dconv5 = ConvTransposeBNReLU(rng, channels, channels, 5, padding=2)
        self.fuse = ConvBNReLU(rng, 2 * channels, channels, 3, padding=1)

    def forward(self, x, graph=None, training=False):
        s3 = self.dconv3.forward(self.conv3.forward(x, graph, training), graph, training)
        s5 = self.dconv5.forward(self.conv5.forward(x, graph, training), graph, training)
        ff = self.fuse.forward(T.concat_channels([s3, s5], graph), graph, training)
        return T.add(x, ff, graph)


class CIM(Module):
    """Camouflage inference head: three 1x1 convs interleaved with two
    multi-scale residual blocks, ending in single-channel logits."""

    def __init__(self, rng, channels=16):
        super().__init__()
        self.head = Conv2d(rng, channels, channels, 1)
        self.mrb1 = MRB(rng, channels)
        self.mid = Conv2d(rng, channels, channels, 1)
        self.mrb2 = MRB(rng, channels)
        self.tail = Conv2d(rng, channels, 1, 1)

    def forward(self, x, graph=None, training=False):
        y = self.head.forward(x, graph)
        y = self.mrb1.forward(y, graph, training)
        y = self.mid.forward(y, graph)
        y = self.mrb2.forward(y, graph, training)
        return self.tail.forward(y, graph)


class RefineHead(Module):
    """Gates the three low pyramid levels with the sigmoid coarse map, expands
    each through a lighter receptive-field block, and fuses them at stride 2."""

    def __init__(self, rng, low_widths, channels=32, out_channels=16, branches=4):
        super().__init__()
        self.rfb1 = RFB(rng, low_widths[0], channels, branches)
        self.rfb2 = RFB(rng, low_widths[1], channels, branches)
        self.rfb3 = RFB(rng, low_widths[2], channels, branches)
        self.block1 = ConvBNReLU(rng, 2 * channels, channels, 3, padding=1)
        self.block2 = ConvBNReLU(rng, 2 * channels, out_channels, 3, padding=1)

    def forward(self, pyramid: FeaturePyramid, coarse: Tensor, graph=None, training=False):
        if coarse.shape[1] != 1:
            raise ShapeError(f"coarse map must be single-channel, got {coarse.shape[1]}")
        attn = T.sigmoid(coarse, graph)
        gated = []
        for feat, block in zip(pyramid.low_levels(), (self.rfb1, self.rfb2, self.rfb3)):
            n, c, h, w = feat.shape
            a = upsample_bilinear(attn, (h, w), graph)
            gated.append(block.forward(T.mul(feat, T.repeat_channels(a, c, graph), graph), graph, training))
        g1, g2, g3 = gated
        th, tw = g1.shape[2], g1.shape[3]
        y = self.block1.forward(
            T.concat_channels([g1, upsample_bilinear(g2, (th, tw), graph)], graph), graph, training
        )
        return self.block2.forward(
            T.concat_channels([y, upsample_bilinear(g3, (th, tw), graph)], graph), graph, training
        )


class C2FNet(Module):
    """Full network: pyramid -> cascaded fusion/context stages -> coarse map,
    then coarse-gated low-level refinement -> inference head -> prediction."""

    def __init__(self, seed=0, widths=(16, 24, 32, 48, 64), fused_channels=64,
                 refine_channels=32, refine_out=16, reduction=4):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        self.fused_channels = fused_channels
        self.refine_channels = refine_channels
        self.refine_out = refine_out
        self.reduction = reduction
        self.backbone = Backbone(rng, widths)
        self.rfb3 = RFB(rng, widths[2], fused_channels)
        self.rfb4 = RFB(rng, widths[3], fused_channels)
        self.rfb5 = RFB(rng, widths[4], fused_channels)
        self.acfm1 = ACFM(rng, fused_channels, reduction)
        self.dgcm1 = DGCM(rng, fused_channels, reduction)
        self.acfm2 = ACFM(rng, fused_channels, reduction)
        self.dgcm2 = DGCM(rng, fused_channels, reduction)
        self.coarse_head = Conv2d(rng, fused_channels, 1, 1)
        self.refine = RefineHead(rng, widths[:3], refine_channels, refine_out)
        self.cim = CIM(rng, refine_out)

    def arch_meta(self):
        return list(self.widths) + [
            self.fused_channels,
            self.refine_channels,
            self.refine_out,
            self.reduction,
        ]

    def cascade(self, pyramid: FeaturePyramid, graph=None, training=False) -> Tensor:
        """High-level path down to the stride-8 coarse logits."""
        r3 = self.rfb3.forward(pyramid.f3, graph, training)
        r4 = self.rfb4.forward(pyramid.f4, graph, training)
        r5 = self.rfb5.forward(pyramid.f5, graph, training)
        d1 = self.dgcm1.forward(self.acfm1.forward(r4, r5, graph, training), graph, training)
        d2 = self.dgcm2.forward(self.acfm2.forward(r3, d1, graph, training), graph, training)
        return self.coarse_head.forward(d2, graph)

    def forward(self, image: Tensor, graph=None, training=False) -> NetOutputs:
        n, c, h, w = image.shape
        pyramid = self.backbone.forward(image, graph, training)
        coarse = self.cascade(pyramid, graph, training)
        low = self.refine.forward(pyramid, coarse, graph, training)
        pred = self.cim.forward(low, graph, training)
        return NetOutputs(
            f_d=upsample_bilinear(coarse, (h, w), graph),
            p=upsample_bilinear(pred, (h, w), graph),
        )
