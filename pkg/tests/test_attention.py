"""Attention against a brute-force python-loop oracle, plus the structural
algebra of the three block wirings and the baseline parity guarantee."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mabvit.attention import (
    AttentionParams,
    BlockParams,
    BlockStructure,
    SwiGLUValue,
    ValueVariant,
    baseline_multi_head_attention,
    multi_head_attention,
    project_value,
    scaled_dot_product_attention,
    transformer_block,
)
from mabvit.errors import ConfigError, ShapeError
from mabvit.gradcheck import grad_check
from mabvit.layers import (
    ActivationKind,
    LayerNormParams,
    LinearParams,
    MlpParams,
    MlpVariant,
    apply_activation,
    layer_norm,
    linear,
    mlp_forward,
)
from mabvit.tensor import Tensor


def brute_force_attention(q, k, v):
    """Scalar-loop softmax(qk^T/sqrt(d))v — no vectorized shortcuts."""
    n, d = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        scores = [sum(q[i, a] * k[j, a] for a in range(d)) / math.sqrt(d) for j in range(n)]
        mx = max(scores)
        weights = [math.exp(s - mx) for s in scores]
        z = sum(weights)
        for j in range(n):
            for a in range(v.shape[1]):
                out[i, a] += (weights[j] / z) * v[j, a]
    return out


def make_attention(rng, d, heads, variant=ValueVariant.STANDARD):
    def lin(d_out=d, bias=True):
        w = Tensor(rng.standard_normal((d, d_out)) * 0.3, requires_grad=True)
        b = Tensor(rng.standard_normal(d_out) * 0.1, requires_grad=True) if bias else None
        return LinearParams(w, b)

    if variant is ValueVariant.SWIGLU_ON_V:
        value = SwiGLUValue(lin(bias=False), lin(bias=False))
    else:
        value = lin()
    return AttentionParams(wq=lin(), wk=lin(), value=value, wo=lin(), heads=heads)


def make_block(rng, d, heads, mlp_dim=None, variant=ValueVariant.STANDARD):
    mlp_dim = mlp_dim or 2 * d

    def lin(d_in, d_out, bias=True):
        w = Tensor(rng.standard_normal((d_in, d_out)) * 0.3, requires_grad=True)
        b = Tensor(rng.standard_normal(d_out) * 0.1, requires_grad=True) if bias else None
        return LinearParams(w, b)

    def ln():
        return LayerNormParams(
            Tensor(np.ones(d) + rng.standard_normal(d) * 0.05, requires_grad=True),
            Tensor(rng.standard_normal(d) * 0.05, requires_grad=True),
        )

    return BlockParams(
        ln1=ln(),
        attn=make_attention(rng, d, heads, variant),
        ln2=ln(),
        mlp=MlpParams(w1=lin(d, mlp_dim), w2=lin(mlp_dim, d)),
    )


# -- SDPA against the brute-force oracle ---------------------------------------


def test_sdpa_matches_brute_force_over_random_cases():
    rng = np.random.default_rng(0)
    for case in range(100):
        n = int(rng.integers(1, 7))
        d = int(rng.integers(1, 5))
        q = rng.standard_normal((n, d)) * 2.0
        k = rng.standard_normal((n, d)) * 2.0
        v = rng.standard_normal((n, d)) * 2.0
        got = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v)).data
        want = brute_force_attention(q, k, v)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12, err_msg=f"case {case}")


def test_sdpa_rows_are_convex_weights(rng):
    # Attention output rows must lie inside the convex hull of V rows; check
    # via the weights themselves: recompute and verify they sum to 1.
    q = Tensor(rng.standard_normal((5, 3)) * 10)
    k = Tensor(rng.standard_normal((5, 3)) * 10)
    from mabvit.tensor import softmax_lastdim

    scores = (q @ k.transpose_last()) * (1.0 / math.sqrt(3))
    w = softmax_lastdim(scores).data
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


def test_sdpa_permutation_equivariance(rng):
    # Permuting the token axis of q, k, v permutes the output rows identically:
    # self-attention has no positional preference of its own.  The score matrix
    # is bitwise-permuted (each entry contracts the same unreordered vectors);
    # the row-sum and the weights@V contraction see their summands in permuted
    # order, which moves the result by at most a few ulp, so the end-to-end
    # comparison uses 1e-12 — far below any positional signal.
    n, d = 6, 4
    q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
    perm = np.random.default_rng(1).permutation(n)

    scores = q @ k.T
    scores_permed = q[perm] @ k[perm].T
    np.testing.assert_array_equal(scores_permed, scores[np.ix_(perm, perm)])

    base = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v)).data
    permed = scaled_dot_product_attention(
        Tensor(q[perm]), Tensor(k[perm]), Tensor(v[perm])
    ).data
    np.testing.assert_allclose(permed, base[perm], rtol=0, atol=1e-12)


def test_multi_head_permutation_equivariance_all_variants(rng):
    # Same symmetry through the full projections, per value variant.  Token
    # permutation commutes with everything except the reduction order.
    n, d = 6, 8
    x = rng.standard_normal((n, d))
    perm = np.random.default_rng(3).permutation(n)
    for variant in ValueVariant:
        p = make_attention(rng, d, 2, variant)
        base = multi_head_attention(Tensor(x), p, variant).data
        permed = multi_head_attention(Tensor(x[perm]), p, variant).data
        np.testing.assert_allclose(permed, base[perm], rtol=0, atol=1e-12)


def test_sdpa_batched_matches_per_slice(rng):
    q, k, v = (rng.standard_normal((2, 5, 3)) for _ in range(3))
    got = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v)).data
    for s in range(2):
        want = scaled_dot_product_attention(Tensor(q[s]), Tensor(k[s]), Tensor(v[s])).data
        np.testing.assert_allclose(got[s], want, atol=1e-15)


def test_sdpa_shape_validation(rng):
    q = Tensor(rng.standard_normal((4, 3)))
    with pytest.raises(ShapeError):
        scaled_dot_product_attention(q, Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        scaled_dot_product_attention(q, Tensor(np.ones((5, 3))), Tensor(np.ones((5, 3))))
    with pytest.raises(ShapeError):
        scaled_dot_product_attention(q, Tensor(np.ones((4, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ConfigError):
        scaled_dot_product_attention(
            Tensor(np.ones((4, 0))), Tensor(np.ones((4, 0))), Tensor(np.ones((4, 0)))
        )


def test_sdpa_gradients(rng):
    q = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    k = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    v = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    report = grad_check(lambda: scaled_dot_product_attention(q, k, v).sum(), [q, k, v])
    assert report.passed, report.summary()


@given(st.integers(0, 2 ** 31 - 1))
def test_sdpa_uniform_when_keys_identical(seed):
    # Identical keys give uniform weights: output rows == mean of V rows.
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((3, 2))
    k = np.tile(rng.standard_normal((1, 2)), (3, 1))
    v = rng.standard_normal((3, 2))
    out = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (3, 1)), atol=1e-12)


# -- value variants ---------------------------------------------------------------


def test_project_value_standard_is_plain_linear(rng):
    p = make_attention(rng, 8, 2)
    x = Tensor(rng.standard_normal((3, 8)))
    np.testing.assert_array_equal(
        project_value(x, p, ValueVariant.STANDARD).data, linear(x, p.value).data
    )


def test_project_value_gelu_applies_gelu_elementwise(rng):
    p = make_attention(rng, 8, 2)
    x = Tensor(rng.standard_normal((3, 8)))
    got = project_value(x, p, ValueVariant.GELU_ON_V).data
    want = apply_activation(ActivationKind.GELU, linear(x, p.value)).data
    np.testing.assert_array_equal(got, want)


def test_project_value_swiglu_is_swish_gated_pair(rng):
    p = make_attention(rng, 8, 2, ValueVariant.SWIGLU_ON_V)
    x = Tensor(rng.standard_normal((3, 8)))
    got = project_value(x, p, ValueVariant.SWIGLU_ON_V).data
    w1, w2 = p.value.w1, p.value.w2
    want = (apply_activation(ActivationKind.SWISH, linear(x, w1)) * linear(x, w2)).data
    np.testing.assert_array_equal(got, want)
    assert w1.b is None and w2.b is None  # the pair is bias-free


def test_project_value_param_kind_mismatch(rng):
    std = make_attention(rng, 8, 2)
    swi = make_attention(rng, 8, 2, ValueVariant.SWIGLU_ON_V)
    x = Tensor(np.ones((2, 8)))
    with pytest.raises(ConfigError):
        project_value(x, std, ValueVariant.SWIGLU_ON_V)
    with pytest.raises(ConfigError):
        project_value(x, swi, ValueVariant.STANDARD)
    with pytest.raises(ConfigError):
        baseline_multi_head_attention(x, swi)


# -- multi-head wiring ---------------------------------------------------------


def test_multi_head_matches_manual_head_loop(rng):
    d, heads = 8, 4
    p = make_attention(rng, d, heads)
    x = Tensor(rng.standard_normal((5, d)))
    got = multi_head_attention(x, p, ValueVariant.STANDARD).data

    q = linear(x, p.wq).data
    k = linear(x, p.wk).data
    v = linear(x, p.value).data
    hd = d // heads
    merged = np.concatenate(
        [
            brute_force_attention(
                q[:, h * hd : (h + 1) * hd], k[:, h * hd : (h + 1) * hd], v[:, h * hd : (h + 1) * hd]
            )
            for h in range(heads)
        ],
        axis=-1,
    )
    want = merged @ p.wo.w.data + p.wo.b.data
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_single_head_path_equals_manual(rng):
    p = make_attention(rng, 6, 1)
    x = Tensor(rng.standard_normal((4, 6)))
    got = multi_head_attention(x, p, ValueVariant.STANDARD).data
    q, k, v = (linear(x, pr).data for pr in (p.wq, p.wk, p.value))
    want = brute_force_attention(q, k, v) @ p.wo.w.data + p.wo.b.data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_heads_must_divide_dim(rng):
    with pytest.raises(ConfigError):
        make_attention(rng, 8, 3)


def test_baseline_parity_is_bitwise(rng):
    """The standard-variant path and the baseline reference must agree bit for
    bit — same primitives in the same order, not merely close."""
    for heads in (1, 2, 4):
        p = make_attention(rng, 8, heads)
        x = Tensor(rng.standard_normal((2, 5, 8)))
        a = multi_head_attention(x, p, ValueVariant.STANDARD).data
        b = baseline_multi_head_attention(x, p).data
        np.testing.assert_array_equal(a, b)


def test_gelu_variant_differs_from_baseline(rng):
    p = make_attention(rng, 8, 2)
    x = Tensor(rng.standard_normal((3, 8)))
    a = multi_head_attention(x, p, ValueVariant.GELU_ON_V).data
    b = baseline_multi_head_attention(x, p).data
    assert not np.array_equal(a, b)


def test_multi_head_gradients(rng):
    p = make_attention(rng, 4, 2, ValueVariant.SWIGLU_ON_V)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    params = [x, p.wq.w, p.wk.w, p.value.w1.w, p.value.w2.w, p.wo.w, p.wo.b]
    report = grad_check(
        lambda: multi_head_attention(x, p, ValueVariant.SWIGLU_ON_V).sum(), params
    )
    assert report.passed, report.summary()


# -- block structures ------------------------------------------------------------


def test_preln_sequential_algebra(rng):
    blk = make_block(rng, 8, 2)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    got = transformer_block(x, blk, BlockStructure.PRELN_SEQUENTIAL, ValueVariant.STANDARD).data

    x1 = x + multi_head_attention(layer_norm(x, blk.ln1), blk.attn, ValueVariant.STANDARD)
    x2 = x1 + mlp_forward(layer_norm(x1, blk.ln2), blk.mlp, MlpVariant.STANDARD_GELU)
    np.testing.assert_array_equal(got, x2.data)


def test_postln_sequential_algebra(rng):
    blk = make_block(rng, 8, 2)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    got = transformer_block(x, blk, BlockStructure.POSTLN_SEQUENTIAL, ValueVariant.STANDARD).data

    x1 = layer_norm(x + multi_head_attention(x, blk.attn, ValueVariant.STANDARD), blk.ln1)
    x2 = layer_norm(x1 + mlp_forward(x1, blk.mlp, MlpVariant.STANDARD_GELU), blk.ln2)
    np.testing.assert_array_equal(got, x2.data)


def test_preln_parallel_algebra(rng):
    blk = make_block(rng, 8, 2)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    got = transformer_block(x, blk, BlockStructure.PRELN_PARALLEL, ValueVariant.STANDARD).data

    want = (
        x
        + multi_head_attention(layer_norm(x, blk.ln1), blk.attn, ValueVariant.STANDARD)
        + mlp_forward(layer_norm(x, blk.ln2), blk.mlp, MlpVariant.STANDARD_GELU)
    ).data
    np.testing.assert_array_equal(got, want)


def test_parallel_branches_both_read_block_input(rng):
    # In the parallel wiring the MLP must see X, not X + attention output.
    # Kill the attention branch (zero W_O and its bias) and check the result
    # equals X + MLP(LN2(X)) exactly.
    blk = make_block(rng, 8, 2)
    blk.attn.wo.w.data[:] = 0.0
    blk.attn.wo.b.data[:] = 0.0
    x = Tensor(rng.standard_normal((5, 8)))
    got = transformer_block(x, blk, BlockStructure.PRELN_PARALLEL, ValueVariant.STANDARD).data
    want = (x + mlp_forward(layer_norm(x, blk.ln2), blk.mlp, MlpVariant.STANDARD_GELU)).data
    np.testing.assert_array_equal(got, want)


def test_probe_sees_residual_joins_and_does_not_perturb(rng):
    blk = make_block(rng, 8, 2)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    for structure, substeps in (
        (BlockStructure.PRELN_SEQUENTIAL, ["mha", "mlp"]),
        (BlockStructure.POSTLN_SEQUENTIAL, ["mha", "mlp"]),
        (BlockStructure.PRELN_PARALLEL, ["parallel"]),
    ):
        plain = transformer_block(x, blk, structure, ValueVariant.STANDARD).data
        seen = []
        probed = transformer_block(
            x, blk, structure, ValueVariant.STANDARD,
            probe=lambda substep, a, b: seen.append(substep),
        ).data
        np.testing.assert_array_equal(plain, probed)
        assert seen == substeps


def test_block_gradients_all_structures(rng):
    x_data = rng.standard_normal((1, 4, 4))
    for structure in BlockStructure:
        blk = make_block(rng, 4, 2, variant=ValueVariant.GELU_ON_V)
        x = Tensor(x_data, requires_grad=True)
        params = [x, blk.ln1.gamma, blk.attn.wq.w, blk.attn.value.w,
                  blk.attn.wo.w, blk.ln2.beta, blk.mlp.w1.w, blk.mlp.w2.b]
        report = grad_check(
            lambda: transformer_block(x, blk, structure, ValueVariant.GELU_ON_V).sum(),
            params,
        )
        assert report.passed, f"{structure}: {report.summary()}"


def test_dropout_only_active_when_rng_given(rng):
    blk = make_block(rng, 8, 2)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    base = transformer_block(x, blk, BlockStructure.PRELN_SEQUENTIAL, ValueVariant.STANDARD).data
    dropped = transformer_block(
        x, blk, BlockStructure.PRELN_SEQUENTIAL, ValueVariant.STANDARD,
        drop_rate=0.5, drop_rng=np.random.default_rng(0),
    ).data
    assert not np.array_equal(base, dropped)
    no_rng = transformer_block(
        x, blk, BlockStructure.PRELN_SEQUENTIAL, ValueVariant.STANDARD, drop_rate=0.5,
    ).data
    np.testing.assert_array_equal(base, no_rng)
