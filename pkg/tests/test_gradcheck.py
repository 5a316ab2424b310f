import numpy as np
import pytest

from c2fnet.gradcheck import DeterminismError, grad_check, relative_error
from c2fnet.ops import (
    BatchNormState,
    ConvSpec,
    batch_norm,
    conv2d,
    conv_transpose2d,
    pool,
    upsample_bilinear,
)
from c2fnet.tensor import (
    add,
    concat_channels,
    mul,
    one_minus,
    relu,
    repeat_channels,
    sigmoid,
    sub,
    sum_all,
    tensor,
)

TOL = 1e-4
STEP = 1e-5


def weighted_sum(x, graph, seed=99):
    """Project to a scalar with a fixed random weighting so gradients are generic."""
    r = tensor(np.random.default_rng(seed).normal(size=x.shape))
    return sum_all(mul(x, r, graph), graph)


def test_identity_has_zero_error():
    # dyadic values and a power-of-two step keep the central difference exact
    x = tensor(np.array([[[[1.0, -2.5], [0.25, 3.0]]]]), requires_grad=True)
    rep = grad_check(lambda ins, graph: sum_all(ins[0], graph), [x], step=2.0**-17)
    assert rep.max_error == 0.0


def test_sigmoid_tight_error():
    x = tensor(np.random.default_rng(1).normal(size=(1, 2, 3, 3)), requires_grad=True)
    rep = grad_check(lambda ins, graph: sum_all(sigmoid(ins[0], graph), graph), [x], step=STEP)
    assert rep.max_error < 1e-6


def test_determinism_guard():
    state = {"n": 0}

    def flaky(ins, graph):
        state["n"] += 1
        return sum_all(ins[0], graph) if state["n"] % 2 else weighted_sum(ins[0], graph)

    x = tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(DeterminismError):
        grad_check(flaky, [x])


def test_relative_error_guard_floor():
    assert relative_error(0.0, 5e-9) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(20))
def test_elementwise_grads(seed):
    rng = np.random.default_rng(seed)
    shape = (1, 2, 3, 4)
    a = tensor(rng.normal(size=shape), requires_grad=True)
    b = tensor(rng.normal(size=shape), requires_grad=True)

    def f(ins, graph):
        x, y = ins
        u = add(mul(x, y, graph), sub(x, y, graph), graph)
        u = relu(u, graph)
        v = one_minus(sigmoid(x, graph), graph)
        return weighted_sum(concat_channels([u, v], graph), graph, seed=seed)

    rep = grad_check(f, [a, b], step=STEP, seed=seed)
    assert rep.max_error < TOL, rep.per_input


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_grads(seed):
    rng = np.random.default_rng(100 + seed)
    stride = 1 + seed % 2
    dil = 1 + seed % 3
    pad = seed % 3
    spec = ConvSpec(2, 3, (3, 3), stride=stride, padding=pad, dilation=dil)
    try:
        spec.out_size(7, 7)
    except Exception:
        pytest.skip("empty output for this combo")
    x = tensor(rng.normal(size=(2, 2, 7, 7)), requires_grad=True)
    w = tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = tensor(rng.normal(size=(1, 3, 1, 1)), requires_grad=True)

    def f(ins, graph):
        return weighted_sum(conv2d(ins[0], ins[1], ins[2], spec, graph), graph, seed=seed)

    rep = grad_check(f, [x, w, b], step=STEP, seed=seed, names=["x", "w", "b"])
    assert rep.max_error < TOL, rep.per_input


@pytest.mark.parametrize("seed", range(20))
def test_conv_transpose_grads(seed):
    rng = np.random.default_rng(200 + seed)
    stride = 1 + seed % 2
    spec = ConvSpec(3, 2, (3, 3), stride=stride, padding=seed % 2, transposed=True)
    x = tensor(rng.normal(size=(1, 3, 4, 5)), requires_grad=True)
    w = tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = tensor(rng.normal(size=(1, 2, 1, 1)), requires_grad=True)

    def f(ins, graph):
        return weighted_sum(conv_transpose2d(ins[0], ins[1], ins[2], spec, graph), graph, seed=seed)

    rep = grad_check(f, [x, w, b], step=STEP, seed=seed, names=["x", "w", "b"])
    assert rep.max_error < TOL, rep.per_input


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_grads(seed, training):
    rng = np.random.default_rng(300 + seed)
    x = tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    gamma = tensor(rng.normal(size=(1, 3, 1, 1)) + 1.5, requires_grad=True)
    beta = tensor(rng.normal(size=(1, 3, 1, 1)), requires_grad=True)
    state = BatchNormState(3)
    state.running_mean = rng.normal(size=3)
    state.running_var = rng.uniform(0.5, 2.0, size=3)

    def f(ins, graph):
        out = batch_norm(ins[0], ins[1], ins[2], state, training, graph)
        return weighted_sum(out, graph, seed=seed)

    rep = grad_check(f, [x, gamma, beta], step=STEP, seed=seed, names=["x", "gamma", "beta"])
    assert rep.max_error < TOL, rep.per_input


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("kind", ["average", "max", "global-average"])
def test_pool_grads(seed, kind):
    rng = np.random.default_rng(400 + seed)
    x = tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)

    def f(ins, graph):
        out = pool(ins[0], kind, k=2, s=2, graph=graph)
        return weighted_sum(out, graph, seed=seed)

    rep = grad_check(f, [x], step=STEP, seed=seed)
    assert rep.max_error < TOL, rep.per_input


@pytest.mark.parametrize("seed", range(20))
def test_upsample_grads(seed):
    rng = np.random.default_rng(500 + seed)
    x = tensor(rng.normal(size=(1, 2, 3, 5)), requires_grad=True)
    target = [(6, 10), (7, 7), (3, 5), (2, 3)][seed % 4]

    def f(ins, graph):
        return weighted_sum(upsample_bilinear(ins[0], target, graph), graph, seed=seed)

    rep = grad_check(f, [x], step=STEP, seed=seed)
    assert rep.max_error < TOL, rep.per_input


@pytest.mark.parametrize("seed", range(20))
def test_repeat_channels_grads(seed):
    rng = np.random.default_rng(600 + seed)
    x = tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)

    def f(ins, graph):
        return weighted_sum(repeat_channels(ins[0], 4, graph), graph, seed=seed)

    rep = grad_check(f, [x], step=STEP, seed=seed)
    assert rep.max_error < TOL, rep.per_input
