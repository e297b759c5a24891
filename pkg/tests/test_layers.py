"""Layer primitives against hand-written elementwise oracles and finite
differences.  The GELU oracle is the exact erf definition evaluated
pointwise with math.erf; the GLU oracles are scalar loops."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mabvit.errors import ConfigError, ShapeError
from mabvit.gradcheck import grad_check
from mabvit.layers import (
    ActivationKind,
    LayerNormParams,
    LinearParams,
    MlpParams,
    MlpVariant,
    apply_activation,
    dropout,
    glu,
    layer_norm,
    linear,
    mlp_forward,
)
from mabvit.tensor import Tensor


def make_linear(rng, d_in, d_out, bias=True):
    w = Tensor(rng.standard_normal((d_in, d_out)), requires_grad=True)
    b = Tensor(rng.standard_normal(d_out), requires_grad=True) if bias else None
    return LinearParams(w, b)


# -- activations -------------------------------------------------------------


def test_gelu_matches_pointwise_erf_oracle(rng):
    x = rng.standard_normal((3, 5)) * 2.0
    out = apply_activation(ActivationKind.GELU, Tensor(x)).data
    for idx in np.ndindex(x.shape):
        v = x[idx]
        want = v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))
        assert out[idx] == pytest.approx(want, rel=1e-14, abs=1e-15)


def test_gelu_known_values():
    out = apply_activation(ActivationKind.GELU, Tensor([0.0, 100.0, -100.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(100.0)  # GELU(x) -> x for large x
    assert out[2] == pytest.approx(0.0, abs=1e-12)


def test_swish_matches_pointwise_oracle(rng):
    x = rng.standard_normal((4, 4))
    out = apply_activation(ActivationKind.SWISH, Tensor(x)).data
    for idx in np.ndindex(x.shape):
        v = x[idx]
        assert out[idx] == pytest.approx(v / (1.0 + math.exp(-v)), rel=1e-12)


def test_identity_and_sigmoid(rng):
    x = rng.standard_normal(6)
    np.testing.assert_array_equal(apply_activation(ActivationKind.IDENTITY, Tensor(x)).data, x)
    out = apply_activation(ActivationKind.SIGMOID, Tensor(x)).data
    np.testing.assert_allclose(out, 1.0 / (1.0 + np.exp(-x)), rtol=1e-12)


def test_swiglu_gate_is_not_a_standalone_activation(rng):
    with pytest.raises(ConfigError):
        apply_activation(ActivationKind.SWIGLU_GATE, Tensor(rng.standard_normal(3)))


def test_activation_gradients(rng):
    for kind in (ActivationKind.GELU, ActivationKind.SWISH, ActivationKind.SIGMOID):
        x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        report = grad_check(lambda: apply_activation(kind, x).sum(), [x])
        assert report.passed, f"{kind}: {report.summary()}"


# -- linear / layer norm --------------------------------------------------------


def test_linear_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3))
    p = make_linear(rng, 3, 4)
    out = linear(Tensor(x), p).data
    for i in range(2):
        for j in range(4):
            want = p.b.data[j] + sum(x[i, k] * p.w.data[k, j] for k in range(3))
            assert out[i, j] == pytest.approx(want, rel=1e-12)


def test_linear_shape_validation(rng):
    p = make_linear(rng, 3, 4)
    with pytest.raises(ShapeError):
        linear(Tensor(np.ones((2, 5))), p)
    with pytest.raises(ConfigError):
        LinearParams(Tensor(np.ones(3)))  # rank-1 weight
    with pytest.raises(ConfigError):
        LinearParams(Tensor(np.ones((3, 4))), Tensor(np.ones(3)))  # bias mismatch


def test_layer_norm_matches_loop_oracle(rng):
    x = rng.standard_normal((3, 6)) * 4.0 + 1.0
    gamma = rng.standard_normal(6)
    beta = rng.standard_normal(6)
    p = LayerNormParams(Tensor(gamma), Tensor(beta))
    out = layer_norm(Tensor(x), p).data
    for i in range(3):
        row = x[i]
        m = row.mean()
        v = ((row - m) ** 2).mean()  # population variance
        want = (row - m) / math.sqrt(v + 1e-6) * gamma + beta
        np.testing.assert_allclose(out[i], want, rtol=1e-12)


def test_layer_norm_standardizes(rng):
    x = rng.standard_normal((4, 8)) * 10 + 3
    p = LayerNormParams(Tensor(np.ones(8)), Tensor(np.zeros(8)))
    out = layer_norm(Tensor(x), p).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)  # eps skews slightly


@given(st.integers(0, 2 ** 31 - 1), st.floats(-100.0, 100.0))
def test_layer_norm_shift_invariance(seed, shift):
    x = np.random.default_rng(seed).standard_normal((2, 5))
    p = LayerNormParams(Tensor(np.ones(5)), Tensor(np.zeros(5)))
    a = layer_norm(Tensor(x), p).data
    b = layer_norm(Tensor(x + shift), p).data
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_layer_norm_gradients(rng):
    x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    gamma = Tensor(rng.standard_normal(4), requires_grad=True)
    beta = Tensor(rng.standard_normal(4), requires_grad=True)
    p = LayerNormParams(gamma, beta)
    w = Tensor(rng.standard_normal((2, 4)))
    report = grad_check(lambda: (layer_norm(x, p) * w).sum(), [x, gamma, beta])
    assert report.passed, report.summary()


def test_layer_norm_eps_validation():
    with pytest.raises(ConfigError):
        LayerNormParams(Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)


# -- GLU ------------------------------------------------------------------------


def test_glu_matches_scalar_loop_oracle(rng):
    x = rng.standard_normal((2, 3))
    w = make_linear(rng, 3, 4)
    v = make_linear(rng, 3, 4)
    out = glu(Tensor(x), w, v).data
    for i in range(2):
        for j in range(4):
            a = w.b.data[j] + sum(x[i, k] * w.w.data[k, j] for k in range(3))
            c = v.b.data[j] + sum(x[i, k] * v.w.data[k, j] for k in range(3))
            want = (1.0 / (1.0 + math.exp(-a))) * c
            assert out[i, j] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_glu_saturated_gate_passes_linear_branch(rng):
    # With a huge positive gate bias, sigmoid saturates to 1 and the GLU
    # reduces to the plain linear branch.
    x = rng.standard_normal((3, 4))
    w = LinearParams(Tensor(np.zeros((4, 5))), Tensor(np.full(5, 50.0)))
    v = make_linear(rng, 4, 5)
    out = glu(Tensor(x), w, v).data
    want = linear(Tensor(x), v).data
    np.testing.assert_allclose(out, want, rtol=0, atol=1e-9)


def test_glu_shape_mismatch(rng):
    w = make_linear(rng, 3, 4)
    v = make_linear(rng, 3, 5)
    with pytest.raises(ShapeError):
        glu(Tensor(np.ones((2, 3))), w, v)


def test_glu_gradients(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = make_linear(rng, 3, 4)
    v = make_linear(rng, 3, 4)
    params = [x, w.w, w.b, v.w, v.b]
    report = grad_check(lambda: glu(x, w, v).sum(), params)
    assert report.passed, report.summary()


# -- MLP variants -----------------------------------------------------------------


def test_standard_mlp_matches_composed_primitives(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    p = MlpParams(w1=make_linear(rng, 4, 8), w2=make_linear(rng, 8, 4))
    out = mlp_forward(x, p, MlpVariant.STANDARD_GELU).data
    want = linear(apply_activation(ActivationKind.GELU, linear(x, p.w1)), p.w2).data
    np.testing.assert_array_equal(out, want)


def test_swiglu_mlp_matches_composed_primitives(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    p = MlpParams(
        w1=make_linear(rng, 4, 8, bias=False),
        w2=make_linear(rng, 8, 4),
        gate=make_linear(rng, 4, 8, bias=False),
    )
    out = mlp_forward(x, p, MlpVariant.SWIGLU).data
    swish = apply_activation(ActivationKind.SWISH, linear(x, p.w1))
    want = linear(swish * linear(x, p.gate), p.w2).data
    np.testing.assert_array_equal(out, want)


def test_geglu_mlp_uses_gelu_gate(rng):
    x = Tensor(rng.standard_normal((2, 4)))
    p = MlpParams(
        w1=make_linear(rng, 4, 6, bias=False),
        w2=make_linear(rng, 6, 4),
        gate=make_linear(rng, 4, 6, bias=False),
    )
    out = mlp_forward(x, p, MlpVariant.GEGLU).data
    gelu = apply_activation(ActivationKind.GELU, linear(x, p.w1))
    want = linear(gelu * linear(x, p.gate), p.w2).data
    np.testing.assert_array_equal(out, want)


def test_mlp_gate_validation(rng):
    gated = MlpParams(
        w1=make_linear(rng, 4, 8, bias=False),
        w2=make_linear(rng, 8, 4),
        gate=make_linear(rng, 4, 8, bias=False),
    )
    plain = MlpParams(w1=make_linear(rng, 4, 8), w2=make_linear(rng, 8, 4))
    x = Tensor(np.ones((2, 4)))
    with pytest.raises(ConfigError):
        mlp_forward(x, gated, MlpVariant.STANDARD_GELU)
    with pytest.raises(ConfigError):
        mlp_forward(x, plain, MlpVariant.SWIGLU)


def test_mlp_gradients(rng):
    x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    p = MlpParams(
        w1=make_linear(rng, 4, 6, bias=False),
        w2=make_linear(rng, 6, 4),
        gate=make_linear(rng, 4, 6, bias=False),
    )
    params = [x, p.w1.w, p.gate.w, p.w2.w, p.w2.b]
    report = grad_check(lambda: mlp_forward(x, p, MlpVariant.SWIGLU).sum(), params)
    assert report.passed, report.summary()


# -- dropout ----------------------------------------------------------------------


def test_dropout_zero_rate_is_identity(rng):
    x = Tensor(rng.standard_normal((3, 3)))
    assert dropout(x, 0.0, np.random.default_rng(0)) is x


def test_dropout_scales_survivors(rng):
    x = Tensor(np.ones((100, 100)))
    out = dropout(x, 0.25, np.random.default_rng(0)).data
    kept = out != 0.0
    # inverted dropout: survivors are scaled by 1/(1-rate)
    np.testing.assert_allclose(out[kept], 1.0 / 0.75)
    assert kept.mean() == pytest.approx(0.75, abs=0.02)


def test_dropout_deterministic_given_rng(rng):
    x = Tensor(rng.standard_normal((10, 10)))
    a = dropout(x, 0.5, np.random.default_rng(7)).data
    b = dropout(x, 0.5, np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)


def test_dropout_rate_validation(rng):
    x = Tensor(np.ones(3))
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(ConfigError):
            dropout(x, bad, np.random.default_rng(0))
