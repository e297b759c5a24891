"""Scaled dot-product attention, value-activation variants, and block structures.

The model's central modification happens in :func:`project_value`: the Value
tensor is passed through an activation (GELU) or a Swish-gated pair of
projections (SwiGLU) before the attention weighting.  Query/Key handling and
the attention weighting itself are unchanged from the standard formulation,
which is kept verbatim in :func:`baseline_multi_head_attention` as the parity
reference.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    ActivationKind,
    LayerNormParams,
    LinearParams,
    MlpParams,
    MlpVariant,
    apply_activation,
    dropout,
    layer_norm,
    linear,
    mlp_forward,
)
from .tensor import Tensor, concat, softmax_lastdim


class ValueVariant(enum.Enum):
    STANDARD = "standard"
    GELU_ON_V = "gelu"
    SWIGLU_ON_V = "swiglu"


class BlockStructure(enum.Enum):
    PRELN_SEQUENTIAL = "preln_seq"
    POSTLN_SEQUENTIAL = "postln_seq"
    PRELN_PARALLEL = "preln_par"


@dataclass
class SwiGLUValue:
    """Doubled-width value projection, gated back to width D: Swish(xW1) * xW2."""

    w1: LinearParams  # bias-free
    w2: LinearParams  # bias-free


@dataclass
class AttentionParams:
    wq: LinearParams
    wk: LinearParams
    value: LinearParams | SwiGLUValue
    wo: LinearParams
    heads: int

    def __post_init__(self):
        d = self.wq.w.shape[0]
        if self.heads <= 0 or d % self.heads != 0:
            raise ConfigError(f"embed dim {d} is not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.wq.w.shape[0] // self.heads


@dataclass
class BlockParams:
    ln1: LayerNormParams  # normalizes the attention path
    attn: AttentionParams
    ln2: LayerNormParams  # normalizes the MLP path
    mlp: MlpParams


def project_value(x: Tensor, params: AttentionParams, variant: ValueVariant) -> Tensor:
    """Compute the (possibly activated) Value tensor at full width D."""
    if variant is ValueVariant.SWIGLU_ON_V:
        if not isinstance(params.value, SwiGLUValue):
            raise ConfigError("SwiGLU-on-V requires a SwiGLUValue parameter pair")
        gate = apply_activation(ActivationKind.SWISH, linear(x, params.value.w1))
        return gate * linear(x, params.value.w2)
    if not isinstance(params.value, LinearParams):
        raise ConfigError(f"{variant.value} value variant requires a single LinearParams")
    v = linear(x, params.value)
    if variant is ValueVariant.GELU_ON_V:
        return apply_activation(ActivationKind.GELU, v)
    return v


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the trailing two dims."""
    d_k = q.shape[-1]
    if d_k == 0:
        raise ConfigError("attention head dim must be positive")
    if k.shape[-1] != d_k or q.shape[:-1] != k.shape[:-1] or k.shape != v.shape:
        raise ShapeError(
            f"attention operands disagree: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    scores = (q @ k.transpose_last()) * (1.0 / math.sqrt(d_k))
    return softmax_lastdim(scores) @ v


def multi_head_attention(x: Tensor, params: AttentionParams, variant: ValueVariant) -> Tensor:
    """Project, activate V per `variant`, run per-head attention, merge, project out."""
    q = linear(x, params.wq)
    k = linear(x, params.wk)
    v = project_value(x, params, variant)
    heads = params.heads
    if heads == 1:
        merged = scaled_dot_product_attention(q, k, v)
    else:
        per_head = [
            scaled_dot_product_attention(qh, kh, vh)
            for qh, kh, vh in zip(q.split(heads), k.split(heads), v.split(heads))
        ]
        merged = concat(per_head, axis=-1)
    return linear(merged, params.wo)


def baseline_multi_head_attention(x: Tensor, params: AttentionParams) -> Tensor:
    """The unmodified attention path (plain linear V), kept as a parity reference."""
    q = linear(x, params.wq)
    k = linear(x, params.wk)
    if not isinstance(params.value, LinearParams):
        raise ConfigError("baseline attention requires a single value projection")
    v = linear(x, params.value)
    heads = params.heads
    if heads == 1:
        merged = scaled_dot_product_attention(q, k, v)
    else:
        per_head = [
            scaled_dot_product_attention(qh, kh, vh)
            for qh, kh, vh in zip(q.split(heads), k.split(heads), v.split(heads))
        ]
        merged = concat(per_head, axis=-1)
    return linear(merged, params.wo)


def transformer_block(
    x: Tensor,
    params: BlockParams,
    structure: BlockStructure,
    variant: ValueVariant,
    mlp_variant: MlpVariant = MlpVariant.STANDARD_GELU,
    *,
    drop_rate: float = 0.0,
    drop_rng: np.random.Generator | None = None,
    probe=None,
) -> Tensor:
    """One transformer block in the requested structure.

    Pre-LN sequential:   X = X + MHA(LN1(X));  X = X + MLP(LN2(X))
    Post-LN sequential:  X = LN1(X + MHA(X));  X = LN2(X + MLP(X))
    Pre-LN parallel:     X = X + MHA(LN1(X)) + MLP(LN2(X))

    `probe`, when given, is called as probe(substep, x_in, x_out) with the
    tensors at each residual addition (for Post-LN: before the trailing LN).
    It must only read `.data`; the computation is identical with or without it.
    """

    def _drop(t: Tensor) -> Tensor:
        if drop_rate > 0.0 and drop_rng is not None:
            return dropout(t, drop_rate, drop_rng)
        return t

    def mha(t: Tensor) -> Tensor:
        return _drop(multi_head_attention(t, params.attn, variant))

    def mlp(t: Tensor) -> Tensor:
        return _drop(mlp_forward(t, params.mlp, mlp_variant))

    if structure is BlockStructure.PRELN_SEQUENTIAL:
        x1 = x + mha(layer_norm(x, params.ln1))
        if probe is not None:
            probe("mha", x, x1)
        x2 = x1 + mlp(layer_norm(x1, params.ln2))
        if probe is not None:
            probe("mlp", x1, x2)
        return x2

    if structure is BlockStructure.POSTLN_SEQUENTIAL:
        pre1 = x + mha(x)
        if probe is not None:
            probe("mha", x, pre1)
        x1 = layer_norm(pre1, params.ln1)
        pre2 = x1 + mlp(x1)
        if probe is not None:
            probe("mlp", x1, pre2)
        return layer_norm(pre2, params.ln2)

    if structure is BlockStructure.PRELN_PARALLEL:
        out = x + mha(layer_norm(x, params.ln1)) + mlp(layer_norm(x, params.ln2))
        if probe is not None:
            probe("parallel", x, out)
        return out

    raise ConfigError(f"unknown block structure: {structure}")
