import numpy as np
import pytest

from c2fnet.ops import (
    BatchNormState,
    ConvSpec,
    InvalidSpecError,
    batch_norm,
    conv2d,
    conv_transpose2d,
    interp_matrix,
    pool,
    upsample_bilinear,
)
from c2fnet.tensor import ShapeError, tensor


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(size=shape) * scale


def conv2d_loops(x, w, b, stride, pad, dil):
    """Direct quadruple-loop cross-correlation, independent of the library path."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    xp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    out = np.zeros((n, co, oh, ow))
    for ni in range(n):
        for oc in range(co):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ic in range(ci):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (
                                    w[oc, ic, ky, kx]
                                    * xp[ni, ic, oy * stride + ky * dil, ox * stride + kx * dil]
                                )
                    out[ni, oc, oy, ox] = acc + b[oc]
    return out


def test_conv_all_ones_sums_to_nine():
    x = tensor(np.ones((1, 1, 3, 3)))
    w = tensor(np.ones((1, 1, 3, 3)))
    b = tensor(np.zeros((1, 1, 1, 1)))
    spec = ConvSpec(1, 1, (3, 3))
    out = conv2d(x, w, b, spec)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == pytest.approx(9.0)


def test_conv_identity_kernel():
    x = tensor(rand((2, 1, 5, 7), seed=1))
    w = tensor(np.ones((1, 1, 1, 1)))
    b = tensor(np.zeros((1, 1, 1, 1)))
    out = conv2d(x, w, b, ConvSpec(1, 1, (1, 1)))
    assert np.array_equal(out.data, x.data)


def test_conv_matches_loop_oracle_dilated():
    x = rand((1, 2, 6, 6), seed=2)
    w = rand((3, 2, 3, 3), seed=3)
    b = rand((3,), seed=4)
    spec = ConvSpec(2, 3, (3, 3), stride=1, padding=2, dilation=2)
    got = conv2d(tensor(x), tensor(w), tensor(b.reshape(1, 3, 1, 1)), spec)
    want = conv2d_loops(x, w, b, 1, 2, 2)
    assert got.data.shape == want.shape
    assert np.max(np.abs(got.data - want)) < 1e-12


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dilation", [1, 2, 3])
@pytest.mark.parametrize("padding", [0, 1, 2])
def test_conv_loop_oracle_sweep(stride, dilation, padding):
    if 8 + 2 * padding - dilation * 2 - 1 < 0:
        pytest.skip("empty output")
    x = rand((2, 4, 8, 8), seed=5 + stride)
    w = rand((3, 4, 3, 3), seed=6 + dilation)
    b = rand((3,), seed=7 + padding)
    spec = ConvSpec(4, 3, (3, 3), stride=stride, padding=padding, dilation=dilation)
    got = conv2d(tensor(x), tensor(w), tensor(b.reshape(1, 3, 1, 1)), spec).data
    want = conv2d_loops(x, w, b, stride, padding, dilation)
    assert np.max(np.abs(got - want)) < 1e-12


def test_conv_shape_errors():
    x = tensor(np.zeros((1, 3, 4, 4)))
    w = tensor(np.zeros((2, 2, 3, 3)))
    b = tensor(np.zeros((1, 2, 1, 1)))
    with pytest.raises(ShapeError):
        conv2d(x, w, b, ConvSpec(2, 2, (3, 3)))
    with pytest.raises(InvalidSpecError):
        ConvSpec(1, 1, (9, 9)).out_size(4, 4)


def test_transpose_delta_reproduces_kernel():
    x = tensor(np.ones((1, 1, 1, 1)))
    w = rand((1, 1, 3, 3), seed=8)
    out = conv_transpose2d(x, tensor(w), None, ConvSpec(1, 1, (3, 3), transposed=True))
    assert np.allclose(out.data[0, 0], w[0, 0], atol=1e-15)


def test_transpose_stride2_shape():
    x = tensor(rand((1, 1, 4, 4), seed=9))
    w = tensor(rand((1, 1, 2, 2), seed=10))
    out = conv_transpose2d(x, w, None, ConvSpec(1, 1, (2, 2), stride=2, transposed=True))
    assert out.shape == (1, 1, 8, 8)


@pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 0, 3)])
def test_adjoint_identity(stride, pad, dil):
    # <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> evaluated numerically
    rng = np.random.default_rng(11 + stride + pad + dil)
    x = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    fwd = ConvSpec(3, 4, (3, 3), stride=stride, padding=pad, dilation=dil)
    oh, ow = fwd.out_size(9, 9)
    y = rng.normal(size=(2, 4, oh, ow))
    lhs = float(np.sum(conv2d(tensor(x), tensor(w), None, fwd).data * y))
    bwd = ConvSpec(4, 3, (3, 3), stride=stride, padding=pad, dilation=dil, transposed=True)
    rhs = float(np.sum(x * conv_transpose2d(tensor(y), tensor(w), None, bwd).data))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_batch_norm_training_moments():
    x = rand((2, 3, 4, 4), seed=12)
    gamma = tensor(np.ones((1, 3, 1, 1)))
    beta = tensor(np.zeros((1, 3, 1, 1)))
    state = BatchNormState(3)
    out = batch_norm(tensor(x), gamma, beta, state, training=True).data
    mu = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    assert np.max(np.abs(mu)) < 1e-9
    assert np.max(np.abs(var - 1.0)) < 1e-4  # scaled by var/(var+eps)


def test_batch_norm_constant_channel_gives_beta():
    x = tensor(np.full((2, 1, 3, 3), 7.0))
    gamma = tensor(np.ones((1, 1, 1, 1)))
    beta = tensor(np.full((1, 1, 1, 1), 2.5))
    out = batch_norm(x, gamma, beta, BatchNormState(1), training=True)
    assert np.allclose(out.data, 2.5)


def test_batch_norm_eval_identity_config():
    x = rand((1, 2, 3, 3), seed=13)
    state = BatchNormState(2)  # stored mean 0, var 1
    out = batch_norm(
        tensor(x),
        tensor(np.ones((1, 2, 1, 1))),
        tensor(np.zeros((1, 2, 1, 1))),
        state,
        training=False,
    )
    assert np.max(np.abs(out.data - x / np.sqrt(1.0 + 1e-5))) < 1e-12


def test_batch_norm_running_stats_update():
    x = rand((4, 2, 5, 5), seed=14)
    state = BatchNormState(2)
    batch_norm(tensor(x), tensor(np.ones((1, 2, 1, 1))), tensor(np.zeros((1, 2, 1, 1))), state, True)
    assert np.allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_average_pool_constant_preserved():
    x = tensor(np.full((1, 2, 4, 4), 3.25))
    out = pool(x, "average", k=2, s=2)
    assert out.shape == (1, 2, 2, 2)
    assert np.allclose(out.data, 3.25)


def test_max_pool_small_case():
    x = tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = pool(x, "max", k=2, s=2)
    assert out.data[0, 0, 0, 0] == 4.0


def test_global_average_matches_flat_sum():
    x = rand((1, 3, 5, 7), seed=15)
    out = pool(tensor(x), "global-average").data
    for c in range(3):
        acc = 0.0
        for i in range(5):
            for j in range(7):
                acc += x[0, c, i, j]
        assert abs(out[0, c, 0, 0] - acc / 35.0) < 1e-12


def test_pool_kernel_too_large():
    with pytest.raises(InvalidSpecError):
        pool(tensor(np.zeros((1, 1, 3, 3))), "average", k=5, s=1)


def test_upsample_same_size_bit_identical():
    x = rand((2, 3, 6, 6), seed=16)
    out = upsample_bilinear(tensor(x), (6, 6))
    assert np.array_equal(out.data, x)


def test_upsample_constant_preserved():
    x = tensor(np.full((1, 1, 3, 5), -1.75))
    out = upsample_bilinear(x, (7, 11))
    assert np.allclose(out.data, -1.75, atol=1e-12)


def test_upsample_2x2_to_4x4_hand_formula():
    x = np.array([[[[0.0, 1.0], [2.0, 3.0]]]])
    got = upsample_bilinear(tensor(x), (4, 4)).data[0, 0]
    # evaluate the half-pixel-center formula per output cell
    want = np.zeros((4, 4))
    for dy in range(4):
        for dx in range(4):
            sy = (dy + 0.5) * 0.5 - 0.5
            sx = (dx + 0.5) * 0.5 - 0.5
            y0 = int(np.floor(sy))
            x0 = int(np.floor(sx))
            fy = sy - y0
            fx = sx - x0
            y0c, y1c = min(max(y0, 0), 1), min(max(y0 + 1, 0), 1)
            x0c, x1c = min(max(x0, 0), 1), min(max(x0 + 1, 0), 1)
            want[dy, dx] = (
                (1 - fy) * (1 - fx) * x[0, 0, y0c, x0c]
                + (1 - fy) * fx * x[0, 0, y0c, x1c]
                + fy * (1 - fx) * x[0, 0, y1c, x0c]
                + fy * fx * x[0, 0, y1c, x1c]
            )
    assert np.max(np.abs(got - want)) < 1e-14


def test_upsample_from_1x1_broadcasts():
    x = tensor(np.full((1, 2, 1, 1), 4.5))
    out = upsample_bilinear(x, (3, 9))
    assert np.allclose(out.data, 4.5)


def test_interp_matrix_rows_sum_to_one():
    for n_in, n_out in [(1, 5), (2, 4), (7, 3), (13, 29)]:
        m = interp_matrix(n_in, n_out)
        assert np.allclose(m.sum(axis=1), 1.0, atol=1e-14)


def test_forward_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(17)
    x = tensor(rng.normal(size=(2, 4, 8, 8)) * 50)
    w = tensor(rng.normal(size=(4, 4, 3, 3)) * 50)
    out = conv2d(x, w, None, ConvSpec(4, 4, (3, 3), padding=1))
    out = batch_norm(
        out,
        tensor(np.ones((1, 4, 1, 1))),
        tensor(np.zeros((1, 4, 1, 1))),
        BatchNormState(4),
        True,
    )
    out = pool(out, "average", 2, 2)
    out = upsample_bilinear(out, (8, 8))
    assert np.all(np.isfinite(out.data))
