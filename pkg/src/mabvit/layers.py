"""Neural primitives: linear, layer norm, activations, GLU, and MLP variants."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor

SQRT2 = math.sqrt(2.0)


class ActivationKind(enum.Enum):
    IDENTITY = "identity"
    SIGMOID = "sigmoid"
    GELU = "gelu"
    SWISH = "swish"
    # The Swish-gated pairing lives in glu()/project_value(), not here.
    SWIGLU_GATE = "swiglu_gate"


class MlpVariant(enum.Enum):
    STANDARD_GELU = "gelu"
    GEGLU = "geglu"
    SWIGLU = "swiglu"


@dataclass
class LinearParams:
    w: Tensor  # in_dim x out_dim
    b: Tensor | None = None

    def __post_init__(self):
        if self.w.ndim != 2:
            raise ConfigError(f"linear weight must be rank 2, got shape {self.w.shape}")
        if self.b is not None and self.b.shape != (self.w.shape[1],):
            raise ConfigError(
                f"linear bias shape {self.b.shape} does not match out_dim {self.w.shape[1]}"
            )


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError(f"layer norm eps must be > 0, got {self.eps}")


@dataclass
class MlpParams:
    """Parameters for one MLP block.

    Standard-GELU uses (w1 with bias, w2 with bias).  The gated variants add a
    `gate` branch; w1 and gate are bias-free, w2 keeps its bias.
    """

    w1: LinearParams
    w2: LinearParams
    gate: LinearParams | None = None


def apply_activation(kind: ActivationKind, x: Tensor) -> Tensor:
    """Elementwise activation. GELU is the exact erf form; Swish is x*sigmoid(x)."""
    if kind is ActivationKind.IDENTITY:
        return x
    if kind is ActivationKind.SIGMOID:
        return x.sigmoid()
    if kind is ActivationKind.GELU:
        return x * ((x * (1.0 / SQRT2)).erf() + 1.0) * 0.5
    if kind is ActivationKind.SWISH:
        return x * x.sigmoid()
    raise ConfigError(f"{kind} is not a standalone activation; use glu()/project_value()")


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.shape[-1] != p.w.shape[0]:
        raise ShapeError(
            f"linear: input last dim {x.shape[-1]} does not match in_dim {p.w.shape[0]}"
        )
    out = x @ p.w
    if p.b is not None:
        out = out + p.b
    return out


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Standardize each last-dim vector (population variance), then scale/shift."""
    if x.shape[-1] != p.gamma.shape[0]:
        raise ShapeError(
            f"layer_norm: input last dim {x.shape[-1]} does not match dim {p.gamma.shape[0]}"
        )
    m = x.mean(axis=-1, keepdims=True)
    d = x - m
    v = (d * d).mean(axis=-1, keepdims=True)
    xhat = d * ((v + p.eps) ** -0.5)
    return xhat * p.gamma + p.beta


def glu(x: Tensor, w: LinearParams, v: LinearParams) -> Tensor:
    """sigmoid(xW + b) * (xV + c), the original gated linear unit."""
    if w.w.shape != v.w.shape:
        raise ShapeError(f"glu: branch weight shapes differ: {w.w.shape} vs {v.w.shape}")
    return linear(x, w).sigmoid() * linear(x, v)


def mlp_forward(x: Tensor, params: MlpParams, variant: MlpVariant) -> Tensor:
    if variant is MlpVariant.STANDARD_GELU:
        if params.gate is not None:
            raise ConfigError("standard MLP params must not carry a gate branch")
        h = apply_activation(ActivationKind.GELU, linear(x, params.w1))
        return linear(h, params.w2)
    if params.gate is None:
        raise ConfigError(f"{variant.value} MLP params must carry a gate branch")
    if variant is MlpVariant.GEGLU:
        gated = apply_activation(ActivationKind.GELU, linear(x, params.w1))
    elif variant is MlpVariant.SWIGLU:
        gated = apply_activation(ActivationKind.SWISH, linear(x, params.w1))
    else:
        raise ConfigError(f"unknown MLP variant: {variant}")
    return linear(gated * linear(x, params.gate), params.w2)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)
