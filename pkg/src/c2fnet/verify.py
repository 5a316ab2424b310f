"""Finite-difference verification suites over operators, blocks, and the
whole network; the gradcheck CLI command and the acceptance tests run these.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import ACFM, CIM, MRB, MSCA, RFB, C2FNet, DGCM
from .gradcheck import grad_check
from .loss import total_loss, weighted_bce, weighted_iou
from .ops import BatchNormState, ConvSpec, batch_norm, conv2d, conv_transpose2d, pool, upsample_bilinear
from .tensor import Tensor, tensor

STEP = 1e-5


def _proj(x, graph, seed):
    r = tensor(np.random.default_rng(seed).normal(size=x.shape))
    return T.sum_all(T.mul(x, r, graph), graph)


def _rand(shape, seed, scale=1.0):
    return tensor(np.random.default_rng(seed).normal(size=shape) * scale, requires_grad=True)


def operator_checks(seeds: int = 20, step: float = STEP):
    """Max relative error per differentiable operator, over `seeds` draws."""
    results = []

    def sweep(name, make):
        worst = 0.0
        for seed in range(seeds):
            f, inputs = make(seed)
            rep = grad_check(f, inputs, step=step, seed=seed)
            worst = max(worst, rep.max_error)
        results.append((name, worst))

    def conv_case(seed):
        rng = np.random.default_rng(seed)
        spec = ConvSpec(2, 3, (3, 3), stride=1 + seed % 2, padding=seed % 3, dilation=1 + seed % 3)
        x = _rand((1, 2, 8, 8), seed)
        w = _rand((3, 2, 3, 3), 100 + seed)
        b = _rand((1, 3, 1, 1), 200 + seed)
        return (lambda ins, graph: _proj(conv2d(ins[0], ins[1], ins[2], spec, graph), graph, 7000 + seed), [x, w, b])

    def tconv_case(seed):
        spec = ConvSpec(3, 2, (3, 3), stride=1 + seed % 2, padding=seed % 2, transposed=True)
        x = _rand((1, 3, 5, 5), seed)
        w = _rand((3, 2, 3, 3), 300 + seed)
        b = _rand((1, 2, 1, 1), 400 + seed)
        return (
            lambda ins, graph: _proj(conv_transpose2d(ins[0], ins[1], ins[2], spec, graph), graph, 7000 + seed),
            [x, w, b],
        )

    def bn_case(seed):
        rng = np.random.default_rng(500 + seed)
        state = BatchNormState(3)
        state.running_mean = rng.normal(size=3)
        state.running_var = rng.uniform(0.5, 2.0, size=3)
        training = seed % 2 == 0
        x = _rand((2, 3, 4, 4), seed)
        # realistic scale: gamma sits near +-1, not near zero
        signs = np.where(rng.random((1, 3, 1, 1)) < 0.5, -1.0, 1.0)
        g = Tensor(signs * rng.uniform(0.7, 1.8, size=(1, 3, 1, 1)), requires_grad=True)
        b = _rand((1, 3, 1, 1), 700 + seed)
        return (
            lambda ins, graph: _proj(batch_norm(ins[0], ins[1], ins[2], state, training, graph), graph, 7000 + seed),
            [x, g, b],
        )

    def pool_case(kind):
        def make(seed):
            x = _rand((2, 2, 6, 6), seed)
            return (lambda ins, graph: _proj(pool(ins[0], kind, 2, 2, graph=graph), graph, 7000 + seed), [x])

        return make

    def upsample_case(seed):
        x = _rand((1, 2, 3, 5), seed)
        target = [(6, 10), (7, 7), (2, 3), (3, 5)][seed % 4]
        return (lambda ins, graph: _proj(upsample_bilinear(ins[0], target, graph), graph, 7000 + seed), [x])

    def elementwise_case(seed):
        a = _rand((1, 2, 4, 4), seed)
        b = _rand((1, 2, 4, 4), 800 + seed)

        def f(ins, graph):
            x, y = ins
            u = T.relu(T.add(T.mul(x, y, graph), T.sub(x, y, graph), graph), graph)
            v = T.one_minus(T.sigmoid(x, graph), graph)
            w = T.concat_channels([u, v], graph)
            return _proj(w, graph, 7000 + seed)

        return (f, [a, b])

    def repeat_case(seed):
        x = _rand((2, 1, 3, 3), seed)
        return (lambda ins, graph: _proj(T.repeat_channels(ins[0], 4, graph), graph, 7000 + seed), [x])

    def bce_case(seed):
        rng = np.random.default_rng(900 + seed)
        g = (rng.random((1, 1, 4, 4)) < 0.5).astype(np.float64)
        w = rng.uniform(1.0, 6.0, size=g.shape)
        z = _rand((1, 1, 4, 4), seed)
        return (lambda ins, graph: weighted_bce(ins[0], g, w, graph), [z])

    def iou_case(seed):
        rng = np.random.default_rng(950 + seed)
        g = (rng.random((1, 1, 4, 4)) < 0.5).astype(np.float64)
        w = rng.uniform(1.0, 6.0, size=g.shape)
        z = _rand((1, 1, 4, 4), seed)
        return (lambda ins, graph: weighted_iou(ins[0], g, w, graph), [z])

    sweep("conv2d", conv_case)
    sweep("conv_transpose2d", tconv_case)
    sweep("batch_norm", bn_case)
    sweep("pool_average", pool_case("average"))
    sweep("pool_max", pool_case("max"))
    sweep("pool_global_avg", pool_case("global-average"))
    sweep("upsample_bilinear", upsample_case)
    sweep("elementwise", elementwise_case)
    sweep("repeat_channels", repeat_case)
    sweep("weighted_bce", bce_case)
    sweep("weighted_iou", iou_case)
    return results


def _randomize_states(module, seed):
    """Give every norm layer plausible non-trivial running statistics."""
    rng = np.random.default_rng(seed)
    for name, buf in module.named_buffers():
        if name.endswith("running_var"):
            buf[...] = rng.uniform(0.5, 2.0, size=buf.shape)
        else:
            buf[...] = rng.normal(size=buf.shape) * 0.3


def _check_module(module, run, input_shapes, seed, sample):
    """Gradient-check every parameter of a block plus its inputs.

    Blocks are checked in eval mode: training-mode normalization re-centers
    pre-activations at zero, which parks ReLU kinks inside the finite
    difference interval and breaks the quotient regardless of how exact the
    analytic gradient is. The training-mode normalization gradient itself is
    covered by the operator sweep.
    """
    rng = np.random.default_rng(seed)
    _randomize_states(module, 3000 + seed)
    inputs = [tensor(rng.normal(size=s) * 0.5, requires_grad=True) for s in input_shapes]
    names = [f"in{i}" for i in range(len(inputs))] + [n for n, _ in module.named_parameters()]
    params = [p for _, p in module.named_parameters()]

    def f(ins, graph):
        out = run(module, ins[: len(inputs)], graph, False)
        return _proj(out, graph, 7000 + seed)

    rep = grad_check(f, inputs + params, step=STEP, sample=sample, seed=seed, names=names)
    return rep.max_error


def block_checks(seeds: int = 20, sample: int = 4):
    """Max relative error per network block over `seeds` random instances."""
    cases = [
        (
            "rfb",
            lambda rng: RFB(rng, 4, 8),
            lambda m, ins, g, tr: m.forward(ins[0], g, tr),
            [(1, 4, 7, 7)],
        ),
        (
            "msca",
            lambda rng: MSCA(rng, 8),
            lambda m, ins, g, tr: m.forward(ins[0], g, tr),
            [(2, 8, 5, 5)],
        ),
        (
            "acfm",
            lambda rng: ACFM(rng, 8),
            lambda m, ins, g, tr: m.forward(ins[0], ins[1], g, tr),
            [(1, 8, 6, 6), (1, 8, 3, 3)],
        ),
        (
            "dgcm",
            lambda rng: DGCM(rng, 8),
            lambda m, ins, g, tr: m.forward(ins[0], g, tr),
            [(1, 8, 6, 6)],
        ),
        (
            "mrb",
            lambda rng: MRB(rng, 8),
            lambda m, ins, g, tr: m.forward(ins[0], g, tr),
            [(1, 8, 6, 6)],
        ),
        (
            "cim",
            lambda rng: CIM(rng, 8),
            lambda m, ins, g, tr: m.forward(ins[0], g, tr),
            [(1, 8, 6, 6)],
        ),
    ]
    results = []
    for name, build, run, shapes in cases:
        worst = 0.0
        for seed in range(seeds):
            module = build(np.random.default_rng(1000 + seed))
            worst = max(worst, _check_module(module, run, shapes, seed, sample))
        results.append((name, worst))
    return results


def end_to_end_check(seed: int = 0, sample: int = 4, image_sample: int = 24) -> float:
    """Whole network plus the two-head objective on a 1x3x32x32 input:
    finite differences over the image and a spread of parameters.

    Runs in eval mode with randomized normalization statistics for the same
    reason the block checks do (see _check_module).
    """
    net = C2FNet(seed=seed)
    _randomize_states(net, 4000 + seed)
    rng = np.random.default_rng(2000 + seed)
    image = tensor(rng.random((1, 3, 32, 32)), requires_grad=True)
    gt = (rng.random((1, 1, 32, 32)) < 0.3).astype(np.float64)

    named = list(net.named_parameters())
    picked = [named[i] for i in range(0, len(named), max(1, len(named) // 12))][:12]

    def f_image(ins, graph):
        out = net.forward(ins[0], graph=graph, training=False)
        loss, _ = total_loss(out.f_d, out.p, gt, graph)
        return loss

    def f_params(ins, graph):
        out = net.forward(image, graph=graph, training=False)
        loss, _ = total_loss(out.f_d, out.p, gt, graph)
        return loss

    rep_img = grad_check(f_image, [image], step=STEP, sample=image_sample, seed=seed, names=["image"])
    rep_par = grad_check(
        f_params, [p for _, p in picked], step=STEP, sample=sample, seed=seed, names=[n for n, _ in picked]
    )
    return max(rep_img.max_error, rep_par.max_error)
