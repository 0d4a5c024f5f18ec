import itertools
import math

import numpy as np
import pytest

from conftest import naive_conv2d, off_kinks
from flattenet.gradcheck import grad_check
from flattenet.layers import (
    BatchNorm,
    ConvSpec,
    ShapeError,
    batch_norm,
    bilinear_upsample,
    conv2d,
    he_uniform,
    mse_loss,
    pixel_softmax_ce,
    prelu,
    relu,
)
from flattenet.shuffle import RearrangeSpec, rearrange_inv
from flattenet.tensor import Param


def _conv(x, w, **kw):
    spec = ConvSpec(x.shape[1], w.shape[0], k=w.shape[2], **kw)
    return conv2d(x, Param(w), spec)


def _block_diagonal(w, g):
    """Dense kernel equivalent to a grouped one: zero outside the diagonal blocks."""
    c_out, cg, k, _ = w.shape
    og = c_out // g
    dense = np.zeros((c_out, cg * g, k, k))
    for i in range(g):
        dense[i * og:(i + 1) * og, i * cg:(i + 1) * cg] = w[i * og:(i + 1) * og]
    return dense


# convolution ------------------------------------------------------------------

def test_identity_1x1(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    w = np.eye(3)[:, :, None, None]
    assert np.array_equal(_conv(x, w), x)


def test_depthwise_ones_padding():
    out = _conv(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)))
    assert out[0, 0, 1, 1] == 9 and out[0, 0, 2, 2] == 9
    assert out[0, 0, 0, 0] == 4 and out[0, 0, 3, 3] == 4
    assert out[0, 0, 0, 1] == 6


def test_grouped_equals_block_diagonal(rng):
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((4, 2, 3, 3))
    grouped = _conv(x, w, g=2)
    dense = _conv(x, _block_diagonal(w, 2))
    np.testing.assert_allclose(grouped, dense, rtol=0, atol=1e-12)


def _divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def test_grouped_block_diagonal_sweep():
    rng = np.random.default_rng(0)
    cases = 0
    for c_in, c_out in itertools.product((1, 2, 4, 6, 8), repeat=2):
        for g in set(_divisors(c_in)) & set(_divisors(c_out)):
            for k, s, hw in itertools.product((1, 3), (1, 2), (1, 3, 5)):
                x = rng.standard_normal((1, c_in, hw, hw))
                w = rng.standard_normal((c_out, c_in // g, k, k))
                grouped = _conv(x, w, g=g, s=s)
                dense = _conv(x, _block_diagonal(w, g), s=s)
                np.testing.assert_allclose(grouped, dense, rtol=0, atol=1e-12)
                cases += 1
    assert cases > 300


@pytest.mark.parametrize("c_in,c_out,k,s,g,hw", [
    (3, 4, 3, 1, 1, 5),
    (4, 4, 3, 2, 4, 6),
    (6, 4, 1, 1, 2, 3),
    (4, 8, 5, 2, 2, 7),
    (2, 2, 7, 1, 1, 4),
])
def test_matches_naive_loops(rng, c_in, c_out, k, s, g, hw):
    x = rng.standard_normal((2, c_in, hw, hw))
    w = rng.standard_normal((c_out, c_in // g, k, k))
    b = rng.standard_normal(c_out)
    spec = ConvSpec(c_in, c_out, k=k, s=s, g=g, bias=True)
    got = conv2d(x, Param(w), spec, Param(b))
    want = naive_conv2d(x, w, stride=s, padding=k // 2, groups=g, bias=b)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError):
        ConvSpec(4, 6, g=4)
    spec = ConvSpec(4, 4, k=3)
    with pytest.raises(ShapeError):
        conv2d(rng.standard_normal((1, 3, 4, 4)), Param(np.zeros(spec.weight_shape)), spec)
    with pytest.raises(ShapeError):
        conv2d(rng.standard_normal((1, 4, 4, 4)), Param(np.zeros((4, 4, 1, 1))), spec)


def test_he_uniform_bound(rng):
    w = he_uniform((16, 8, 3, 3), rng)
    assert np.abs(w).max() <= math.sqrt(6 / 72)


# batch norm -------------------------------------------------------------------

def test_bn_constant_input():
    bn = BatchNorm(2)
    bn.beta.value[:] = 5
    out = batch_norm(np.full((3, 2, 2, 2), 7.0), bn)
    np.testing.assert_allclose(out, 5.0, atol=1e-12)


def test_bn_direct_statistics(rng):
    x = rng.standard_normal((4, 1, 5, 5))
    x = (x - x.mean()) / x.std() * 2 + 3  # mean 3, var 4 exactly
    bn = BatchNorm(1)
    bn.gamma.value[:] = 2
    bn.beta.value[:] = 1
    np.testing.assert_allclose(batch_norm(x, bn), (x - 3) / np.sqrt(4 + 1e-5) * 2 + 1, atol=1e-12)


def test_bn_train_output_normalized(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * 5 + 2
    out = batch_norm(x, BatchNorm(3))
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() <= 1e-4


def test_bn_running_stats_update(rng):
    x = rng.standard_normal((4, 2, 3, 3)) + 1
    bn = BatchNorm(2)
    batch_norm(x, bn)
    m = x.shape[0] * 9
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    assert np.all(bn.running_var >= 0)


def test_bn_eval_independent_of_batch(rng):
    bn = BatchNorm(3)
    bn.running_mean[:] = [0.5, -1, 2]
    bn.running_var[:] = [1, 4, 0.25]
    bn.training = False
    x = rng.standard_normal((4, 3, 2, 2))
    full = batch_norm(x, bn)
    np.testing.assert_array_equal(batch_norm(x[:1], bn), full[:1])


def test_bn_rejects_single_value():
    with pytest.raises(ShapeError):
        batch_norm(np.zeros((1, 2, 1, 1)), BatchNorm(2))


# activations ------------------------------------------------------------------

def test_prelu_cases(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert np.array_equal(prelu(x, Param(np.ones(3))), x)
    assert np.array_equal(prelu(x, Param(np.zeros(3))), relu(x))
    out = prelu(np.full((1, 1, 1, 1), -4.0), Param(np.array([0.25])))
    assert out.item() == -1.0


def test_prelu_shape_error():
    with pytest.raises(ShapeError):
        prelu(np.zeros((1, 3, 2, 2)), Param(np.ones(2)))


# bilinear ---------------------------------------------------------------------

def test_bilinear_constant_and_identity(rng):
    np.testing.assert_allclose(bilinear_upsample(np.full((1, 2, 3, 3), 4.2), 4), 4.2, atol=1e-12)
    x = rng.standard_normal((1, 2, 3, 4))
    assert np.array_equal(bilinear_upsample(x, 1), x)


def test_bilinear_half_pixel_oracle():
    x = np.array([[[[0.0, 1.0], [2.0, 3.0]]]])
    # frozen from the half-pixel-center formula: src = (dst + 0.5) / 2 - 0.5, edge clamped
    want = np.array([
        [0.0, 0.25, 0.75, 1.0],
        [0.5, 0.75, 1.25, 1.5],
        [1.5, 1.75, 2.25, 2.5],
        [2.0, 2.25, 2.75, 3.0],
    ])
    np.testing.assert_allclose(bilinear_upsample(x, 2)[0, 0], want, atol=1e-15)


def test_bilinear_rejects_bad_factor():
    with pytest.raises(ValueError):
        bilinear_upsample(np.zeros((1, 1, 2, 2)), 0)


# losses -----------------------------------------------------------------------

def test_mse_zero_and_value(rng):
    p = rng.standard_normal((2, 3, 4, 4))
    assert float(mse_loss(p, p.copy())) == 0.0
    assert float(mse_loss(np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)))) == 1.0
    with pytest.raises(ShapeError):
        mse_loss(p, p[:, :2])


def test_ce_uniform_is_ln2():
    loss = pixel_softmax_ce(np.zeros((2, 2, 3, 3)), np.zeros((2, 3, 3), dtype=int))
    assert abs(float(loss) - math.log(2)) < 1e-15


def test_ce_label_range():
    with pytest.raises(ValueError):
        pixel_softmax_ce(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), 2))


def test_block_ce_matches_unfolded(rng):
    classes, s2 = 3, 2
    logits = rng.standard_normal((2, classes, 6, 6))
    labels = rng.integers(0, classes, size=(2, 6, 6))
    plain = float(pixel_softmax_ce(logits, labels))
    folded_logits = rearrange_inv(logits, RearrangeSpec(s2, classes))
    folded_labels = rearrange_inv(labels[:, None], RearrangeSpec(s2, 1))
    blocked = float(pixel_softmax_ce(folded_logits, folded_labels, block_size=s2))
    assert abs(plain - blocked) < 1e-12


# gradient checks --------------------------------------------------------------

CONV_CASES = [
    (1, 3, 4, 3, 1, 1, 5),
    (2, 4, 4, 3, 2, 4, 6),
    (1, 4, 6, 1, 1, 2, 3),
    (2, 4, 8, 3, 1, 2, 4),
]


@pytest.mark.parametrize("n,c_in,c_out,k,s,g,hw", CONV_CASES)
def test_conv_gradcheck(rng, n, c_in, c_out, k, s, g, hw):
    spec = ConvSpec(c_in, c_out, k=k, s=s, g=g, bias=True)
    x = rng.standard_normal((n, c_in, hw, hw))
    w = Param(rng.standard_normal(spec.weight_shape))
    b = Param(rng.standard_normal(c_out))
    rep = grad_check(lambda x, w, b, tape: conv2d(x, w, spec, b, tape), [x, w, b])
    assert rep.passed, rep


@pytest.mark.parametrize("shape", [(4, 2, 3, 3), (2, 3, 2, 5), (8, 1, 1, 1)])
@pytest.mark.parametrize("training", [True, False])
def test_bn_gradcheck(rng, shape, training):
    bn = BatchNorm(shape[1])
    bn.gamma.value[:] = rng.uniform(0.5, 2, shape[1])
    bn.beta.value[:] = rng.standard_normal(shape[1])
    bn.running_var[:] = rng.uniform(0.5, 2, shape[1])
    bn.training = training
    x = rng.standard_normal(shape)
    rep = grad_check(lambda x, g, b, tape: batch_norm(x, bn, tape), [x, bn.gamma, bn.beta])
    assert rep.passed, rep


@pytest.mark.parametrize("shape", [(2, 3, 4, 4), (1, 5, 2, 3), (3, 1, 1, 6)])
def test_activation_gradcheck(rng, shape):
    x = off_kinks(rng.standard_normal(shape))
    a = Param(rng.uniform(0, 0.5, shape[1]))
    assert grad_check(lambda x, a, tape: prelu(x, a, tape), [x, a]).passed
    assert grad_check(lambda x, tape: relu(x, tape), [x]).passed


@pytest.mark.parametrize("shape,factor", [((1, 2, 3, 3), 4), ((2, 1, 2, 5), 2), ((1, 3, 4, 4), 3)])
def test_bilinear_gradcheck(rng, shape, factor):
    x = rng.standard_normal(shape)
    assert grad_check(lambda x, tape: bilinear_upsample(x, factor, tape), [x]).passed


@pytest.mark.parametrize("shape", [(2, 3, 4, 4), (1, 1, 3, 5), (3, 2, 1, 1)])
def test_mse_gradcheck(rng, shape):
    t = rng.standard_normal(shape)
    x = rng.standard_normal(shape)
    assert grad_check(lambda x, tape: mse_loss(x, t, tape), [x]).passed


@pytest.mark.parametrize("classes,block,hw", [(2, 1, 3), (3, 2, 2), (4, 1, 5)])
def test_ce_gradcheck(rng, classes, block, hw):
    x = rng.standard_normal((2, classes * block * block, hw, hw))
    labels = rng.integers(0, classes, size=(2, block * block, hw, hw))
    rep = grad_check(lambda x, tape: pixel_softmax_ce(x, labels, block, tape), [x])
    assert rep.passed, rep
