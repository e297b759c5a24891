"""Vision-transformer assembly: config, parameter allocation, forward pass.

A model is a plain :class:`ModelParams` tree of tensors plus a
:class:`ModelConfig` describing how to wire them.  Nothing here owns state
beyond the tensors themselves, so the same parameters can be driven through
different probes (training, collapse diagnostics, gradient checks) without
copying.

Parameter naming is flat and stable: ``blocks.007.attn.wq.w`` etc., with
zero-padded block indices so lexicographic order equals layer order.  The
same name table (:func:`param_shapes`) backs allocation, counting, and the
checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import (
    AttentionParams,
    BlockParams,
    BlockStructure,
    SwiGLUValue,
    ValueVariant,
    transformer_block,
)
from .errors import ConfigError, ShapeError
from .layers import (
    LayerNormParams,
    LinearParams,
    MlpParams,
    MlpVariant,
    layer_norm,
    linear,
)
from .tensor import Tensor, concat

ProbeFn = Callable[[int, str, Tensor, Tensor], None]


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    layers: int = 12
    embed_dim: int = 192
    mlp_dim: int = 768
    heads: int = 3
    num_classes: int = 1000
    structure: BlockStructure = BlockStructure.PRELN_SEQUENTIAL
    value_variant: ValueVariant = ValueVariant.STANDARD
    mlp_variant: MlpVariant = MlpVariant.STANDARD_GELU
    use_class_token: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        # Accept raw strings for the enum fields (config files, CLI flags).
        for name, enum_cls in (
            ("structure", BlockStructure),
            ("value_variant", ValueVariant),
            ("mlp_variant", MlpVariant),
        ):
            v = getattr(self, name)
            if isinstance(v, str):
                try:
                    object.__setattr__(self, name, enum_cls(v))
                except ValueError:
                    raise ConfigError(
                        f"{name}={v!r} is not one of {[e.value for e in enum_cls]}"
                    ) from None
        for name in (
            "image_size",
            "patch_size",
            "channels",
            "layers",
            "embed_dim",
            "mlp_dim",
            "heads",
            "num_classes",
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def seq_len(self) -> int:
        return self.num_patches + (1 if self.use_class_token else 0)


@dataclass
class ModelParams:
    patch_proj: LinearParams
    cls_token: Tensor | None
    pos_embed: Tensor
    blocks: list[BlockParams]
    final_ln: LayerNormParams
    head: LinearParams


# -- name table -----------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Flat name -> shape table, in allocation order (== sorted order)."""
    d, m = config.embed_dim, config.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj.w": (config.patch_dim, d),
        "patch_proj.b": (d,),
    }
    if config.use_class_token:
        shapes["cls_token"] = (1, d)
    shapes["pos_embed"] = (config.seq_len, d)
    for i in range(config.layers):
        p = f"blocks.{i:03d}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "attn.wq.w"] = (d, d)
        shapes[p + "attn.wq.b"] = (d,)
        shapes[p + "attn.wk.w"] = (d, d)
        shapes[p + "attn.wk.b"] = (d,)
        if config.value_variant is ValueVariant.SWIGLU_ON_V:
            # Gated value path: two bias-free projections replace W_V + bias.
            shapes[p + "attn.v1.w"] = (d, d)
            shapes[p + "attn.v2.w"] = (d, d)
        else:
            shapes[p + "attn.wv.w"] = (d, d)
            shapes[p + "attn.wv.b"] = (d,)
        shapes[p + "attn.wo.w"] = (d, d)
        shapes[p + "attn.wo.b"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        if config.mlp_variant is MlpVariant.STANDARD_GELU:
            shapes[p + "mlp.w1.w"] = (d, m)
            shapes[p + "mlp.w1.b"] = (m,)
            shapes[p + "mlp.w2.w"] = (m, d)
            shapes[p + "mlp.w2.b"] = (d,)
        else:
            # Gated MLPs: bias-free input and gate projections, biased output.
            shapes[p + "mlp.w1.w"] = (d, m)
            shapes[p + "mlp.gate.w"] = (d, m)
            shapes[p + "mlp.w2.w"] = (m, d)
            shapes[p + "mlp.w2.b"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    shapes["head.w"] = (d, config.num_classes)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Exact number of learnable scalars for this configuration."""
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


# -- allocation -----------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) with redraw outside +/- 2 std (applied pre-scaling)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _init_array(
    rng: np.random.Generator,
    name: str,
    shape: tuple[int, ...],
    init_std: float | None,
) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape)
    if name.endswith(".beta") or name.endswith(".b"):
        return np.zeros(shape)
    if init_std is None and name not in ("cls_token", "pos_embed"):
        # Fan-in scaling: projection weights are (in, out), so fan-in is dim 0.
        return _trunc_normal(rng, shape, std=1.0 / np.sqrt(shape[0]))
    return _trunc_normal(rng, shape, std=0.02 if init_std is None else init_std)


def build_model(
    config: ModelConfig, seed: int = 0, *, init_std: float | None = 0.02
) -> ModelParams:
    """Allocate and initialize all parameters, deterministically from `seed`.

    Weights draw from a truncated normal with standard deviation `init_std`
    (LayerNorm gains start at one, every bias at zero).  Passing
    ``init_std=None`` switches projection weights to fan-in scaling
    (std = 1/sqrt(fan_in)), which keeps residual-branch outputs at a
    magnitude comparable to the stream itself -- the regime the collapse
    diagnostics probe.  Embedding-like tensors (`cls_token`, `pos_embed`)
    stay at std 0.02 either way.
    """
    rng = np.random.default_rng(seed)
    tensors = {
        name: Tensor(_init_array(rng, name, shape, init_std), requires_grad=True)
        for name, shape in param_shapes(config).items()
    }
    return assemble_params(tensors, config)


def assemble_params(tensors: dict[str, Tensor], config: ModelConfig) -> ModelParams:
    """Wire a flat name->Tensor dict (exactly the param_shapes names) into a tree."""

    def lin(prefix: str, bias: bool = True) -> LinearParams:
        return LinearParams(tensors[prefix + ".w"], tensors[prefix + ".b"] if bias else None)

    def ln(prefix: str) -> LayerNormParams:
        return LayerNormParams(tensors[prefix + ".gamma"], tensors[prefix + ".beta"])

    blocks = []
    for i in range(config.layers):
        p = f"blocks.{i:03d}."
        if config.value_variant is ValueVariant.SWIGLU_ON_V:
            value: LinearParams | SwiGLUValue = SwiGLUValue(
                lin(p + "attn.v1", bias=False), lin(p + "attn.v2", bias=False)
            )
        else:
            value = lin(p + "attn.wv")
        attn = AttentionParams(
            wq=lin(p + "attn.wq"),
            wk=lin(p + "attn.wk"),
            value=value,
            wo=lin(p + "attn.wo"),
            heads=config.heads,
        )
        if config.mlp_variant is MlpVariant.STANDARD_GELU:
            mlp = MlpParams(w1=lin(p + "mlp.w1"), w2=lin(p + "mlp.w2"), gate=None)
        else:
            mlp = MlpParams(
                w1=lin(p + "mlp.w1", bias=False),
                w2=lin(p + "mlp.w2"),
                gate=lin(p + "mlp.gate", bias=False),
            )
        blocks.append(BlockParams(ln1=ln(p + "ln1"), attn=attn, ln2=ln(p + "ln2"), mlp=mlp))

    return ModelParams(
        patch_proj=LinearParams(tensors["patch_proj.w"], tensors["patch_proj.b"]),
        cls_token=tensors.get("cls_token"),
        pos_embed=tensors["pos_embed"],
        blocks=blocks,
        final_ln=LayerNormParams(tensors["final_ln.gamma"], tensors["final_ln.beta"]),
        head=LinearParams(tensors["head.w"], tensors["head.b"]),
    )


def named_params(params: ModelParams) -> dict[str, Tensor]:
    """Flat name -> Tensor view of the parameter tree, in allocation order."""
    out: dict[str, Tensor] = {
        "patch_proj.w": params.patch_proj.w,
        "patch_proj.b": params.patch_proj.b,
    }
    if params.cls_token is not None:
        out["cls_token"] = params.cls_token
    out["pos_embed"] = params.pos_embed
    for i, blk in enumerate(params.blocks):
        p = f"blocks.{i:03d}."
        out[p + "ln1.gamma"] = blk.ln1.gamma
        out[p + "ln1.beta"] = blk.ln1.beta
        out[p + "attn.wq.w"] = blk.attn.wq.w
        out[p + "attn.wq.b"] = blk.attn.wq.b
        out[p + "attn.wk.w"] = blk.attn.wk.w
        out[p + "attn.wk.b"] = blk.attn.wk.b
        if isinstance(blk.attn.value, SwiGLUValue):
            out[p + "attn.v1.w"] = blk.attn.value.w1.w
            out[p + "attn.v2.w"] = blk.attn.value.w2.w
        else:
            out[p + "attn.wv.w"] = blk.attn.value.w
            out[p + "attn.wv.b"] = blk.attn.value.b
        out[p + "attn.wo.w"] = blk.attn.wo.w
        out[p + "attn.wo.b"] = blk.attn.wo.b
        out[p + "ln2.gamma"] = blk.ln2.gamma
        out[p + "ln2.beta"] = blk.ln2.beta
        out[p + "mlp.w1.w"] = blk.mlp.w1.w
        if blk.mlp.w1.b is not None:
            out[p + "mlp.w1.b"] = blk.mlp.w1.b
        if blk.mlp.gate is not None:
            out[p + "mlp.gate.w"] = blk.mlp.gate.w
        out[p + "mlp.w2.w"] = blk.mlp.w2.w
        out[p + "mlp.w2.b"] = blk.mlp.w2.b
    out["final_ln.gamma"] = params.final_ln.gamma
    out["final_ln.beta"] = params.final_ln.beta
    out["head.w"] = params.head.w
    out["head.b"] = params.head.b
    return out


def allocated_param_count(params: ModelParams) -> int:
    return sum(t.size for t in named_params(params).values())


# -- forward pass ---------------------------------------------------------------


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, C) or (B, H, W, C) image array -> (N, P*P*C) or (B, N, P*P*C).

    Patches are ordered row-major over the patch grid; within a patch the
    pixels are row-major with channels fastest, so element ``(py*P + px)*C + c``
    of a patch vector is pixel (py, px) channel c.
    """
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (H, W, C) or (B, H, W, C) images, got shape {arr.shape}")
    b, h, w, c = arr.shape
    p = int(patch_size)
    if p <= 0 or h % p != 0 or w % p != 0:
        raise ShapeError(f"image size {h}x{w} not divisible into {p}x{p} patches")
    gy, gx = h // p, w // p
    out = (
        arr.reshape(b, gy, p, gx, p, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, gy * gx, p * p * c)
    )
    return out[0] if single else out


def patch_embed(images: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """Patchify, project to embed_dim, prepend class token, add positions."""
    patches = extract_patches(images, config.patch_size)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    if patches.shape[-1] != config.patch_dim:
        raise ShapeError(
            f"patch dim {patches.shape[-1]} does not match config "
            f"(expected {config.patch_dim})"
        )
    if patches.shape[1] != config.num_patches:
        raise ShapeError(
            f"got {patches.shape[1]} patches, config expects {config.num_patches}"
        )
    x = linear(Tensor(patches), params.patch_proj)
    if params.cls_token is not None:
        b = x.shape[0]
        cls = params.cls_token.reshape((1, 1, config.embed_dim)) + Tensor(
            np.zeros((b, 1, config.embed_dim))
        )
        x = concat([cls, x], axis=1)
    x = x + params.pos_embed
    if single:
        return x.reshape((x.shape[1], x.shape[2]))
    return x


def run_blocks(
    x: Tensor,
    params: ModelParams,
    config: ModelConfig,
    *,
    drop_rng: np.random.Generator | None = None,
    probe: ProbeFn | None = None,
) -> Tensor:
    """Apply every transformer block in order (no final LayerNorm)."""
    for i, blk in enumerate(params.blocks):
        block_probe = None
        if probe is not None:

            def block_probe(substep, x_in, x_out, _i=i):
                probe(_i, substep, x_in, x_out)

        x = transformer_block(
            x,
            blk,
            config.structure,
            config.value_variant,
            config.mlp_variant,
            drop_rate=config.dropout,
            drop_rng=drop_rng,
            probe=block_probe,
        )
    return x


def vit_forward(
    images: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    *,
    drop_rng: np.random.Generator | None = None,
    probe: ProbeFn | None = None,
) -> Tensor:
    """Images -> class logits ((num_classes,) for one image, else (B, num_classes))."""
    if not config.use_class_token:
        raise ConfigError(
            "use_class_token=False is not supported: class-token readout "
            "is the only pooling implemented"
        )
    x = patch_embed(images, params, config)
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    x = run_blocks(x, params, config, drop_rng=drop_rng, probe=probe)
    x = layer_norm(x, params.final_ln)
    cls = x.slice_axis(1, 0, 1).reshape((x.shape[0], config.embed_dim))
    logits = linear(cls, params.head)
    if single:
        return logits.reshape((config.num_classes,))
    return logits


# -- config text form -------------------------------------------------------------

MODEL_CONFIG_FIELDS = (
    "image_size",
    "patch_size",
    "channels",
    "layers",
    "embed_dim",
    "mlp_dim",
    "heads",
    "num_classes",
    "structure",
    "value_variant",
    "mlp_variant",
    "use_class_token",
    "dropout",
)

_INT_FIELDS = frozenset(MODEL_CONFIG_FIELDS[:8])
_ENUM_FIELDS = {
    "structure": BlockStructure,
    "value_variant": ValueVariant,
    "mlp_variant": MlpVariant,
}


def config_to_text(config: ModelConfig) -> str:
    """Canonical key=value form: fixed key order, one pair per line."""
    lines = []
    for name in MODEL_CONFIG_FIELDS:
        v = getattr(config, name)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, int):
            s = str(v)
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = v.value
        lines.append(f"{name}={s}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    """Parse the key=value form; strict about keys, duplicates, and values."""
    kwargs: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in MODEL_CONFIG_FIELDS:
            raise ConfigError(f"line {lineno}: unknown model config key {key!r}")
        if key in kwargs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in _INT_FIELDS:
            try:
                kwargs[key] = int(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} needs an int, got {value!r}") from None
        elif key == "dropout":
            try:
                kwargs[key] = float(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} needs a float, got {value!r}") from None
        elif key == "use_class_token":
            if value not in ("true", "false"):
                raise ConfigError(f"line {lineno}: {key} must be true or false, got {value!r}")
            kwargs[key] = value == "true"
        else:
            enum_cls = _ENUM_FIELDS[key]
            try:
                kwargs[key] = enum_cls(value)
            except ValueError:
                raise ConfigError(
                    f"line {lineno}: {key}={value!r} is not one of "
                    f"{[e.value for e in enum_cls]}"
                ) from None
    missing = [k for k in MODEL_CONFIG_FIELDS if k not in kwargs]
    if missing:
        raise ConfigError(f"model config missing keys: {missing}")
    return ModelConfig(**kwargs)  # type: ignore[arg-type]


# -- presets ----------------------------------------------------------------------

_PRESET_DIMS = {
    "ti16": (192, 3),
    "s16": (384, 6),
    "m16": (512, 8),
    "b16": (768, 12),
}

_VARIANT_VALUE = {
    "base": ValueVariant.STANDARD,
    "gelu": ValueVariant.GELU_ON_V,
    "glu": ValueVariant.SWIGLU_ON_V,
    "pr-glu": ValueVariant.SWIGLU_ON_V,
}


def preset(
    name: str,
    variant: str = "base",
    structure: BlockStructure = BlockStructure.PRELN_SEQUENTIAL,
) -> ModelConfig:
    """Named model sizes.

    `variant` selects the value path: "base" (plain linear values),
    "gelu" (GELU on values), "glu" (gated values), or "pr-glu" (gated
    values with the MLP hidden width reduced from 4x to 3x embed_dim).
    "tiny" is a toy size for gradient checks, not a benchmark config.
    """
    if variant not in _VARIANT_VALUE:
        raise ConfigError(
            f"unknown variant {variant!r}; choose from {sorted(_VARIANT_VALUE)}"
        )
    value = _VARIANT_VALUE[variant]
    if name == "tiny":
        dim = 8
        return ModelConfig(
            image_size=8,
            patch_size=4,
            channels=3,
            layers=2,
            embed_dim=dim,
            mlp_dim=3 * dim if variant == "pr-glu" else 2 * dim,
            heads=2,
            num_classes=4,
            structure=structure,
            value_variant=value,
        )
    if name not in _PRESET_DIMS:
        raise ConfigError(
            f"unknown preset {name!r}; choose from {sorted(_PRESET_DIMS)} or 'tiny'"
        )
    dim, heads = _PRESET_DIMS[name]
    return ModelConfig(
        image_size=224,
        patch_size=16,
        channels=3,
        layers=12,
        embed_dim=dim,
        mlp_dim=3 * dim if variant == "pr-glu" else 4 * dim,
        heads=heads,
        num_classes=1000,
        structure=structure,
        value_variant=value,
    )
