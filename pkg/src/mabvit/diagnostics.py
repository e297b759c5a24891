"""Residual-stream measurements: how much does each block actually change X?

The central quantities, recorded at every residual addition:

* ``input_norm``  — mean over tokens of the L2 norm of the block input,
* ``branch_norm`` — the same for the block's total contribution (output − input),
* ``ratio``       — branch_norm / input_norm,
* ``cosine_io``   — mean over tokens of cos(input, output).

A deep stack whose ratio shrinks and whose cosine approaches 1 is passing its
input through nearly unchanged — later blocks contribute little.  The probes
here are read-only: they observe tensors at the residual joins and never
change what the forward pass computes.
"""

from __future__ import annotations

import hashlib
import statistics
from dataclasses import dataclass

import numpy as np

from .attention import BlockStructure, ValueVariant, transformer_block
from .errors import ConfigError, FormatError, ShapeError
from .gradcheck import GradReport, grad_check
from .layers import MlpVariant
from .model import (
    ModelConfig,
    ModelParams,
    build_model,
    config_to_text,
    named_params,
    param_count,
    run_blocks,
    vit_forward,
)
from .tensor import Tensor

COLLAPSE_CSV_HEADER = "layer,substep,input_norm,branch_norm,ratio,cosine_io"

# Finite differences over every scalar get slow and ill-conditioned well
# before this; refuse rather than produce a meaningless report.
GRADCHECK_PARAM_GUARD = 5000


@dataclass
class CollapseRecord:
    layer: int
    substep: str  # "mha" | "mlp" | "parallel"
    input_norm: float
    branch_norm: float
    ratio: float
    cosine_io: float


@dataclass
class CollapseReport:
    records: list[CollapseRecord]
    config_fingerprint: str
    seed: int
    samples: int


def config_fingerprint(config: ModelConfig) -> str:
    return hashlib.sha256(config_to_text(config).encode("utf-8")).hexdigest()[:16]


def _mean_token_norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(x, axis=-1).mean())


def make_record(layer: int, substep: str, x_in: np.ndarray, x_out: np.ndarray) -> CollapseRecord:
    """Statistics for one residual addition; arrays shaped (..., tokens, dim)."""
    branch = x_out - x_in
    input_norm = _mean_token_norm(x_in)
    branch_norm = _mean_token_norm(branch)
    if not branch.any():
        # Output is bitwise the input; report exactly 1 rather than a
        # rounded quotient of identical norms.
        cos = 1.0
    else:
        dot = (x_in * x_out).sum(axis=-1)
        denom = np.linalg.norm(x_in, axis=-1) * np.linalg.norm(x_out, axis=-1)
        per_token = np.where(denom > 0.0, dot / np.where(denom > 0.0, denom, 1.0), 0.0)
        cos = float(np.clip(per_token, -1.0, 1.0).mean())
    if input_norm > 0.0:
        ratio = branch_norm / input_norm
    else:
        ratio = 0.0 if branch_norm == 0.0 else float("inf")
    return CollapseRecord(layer, substep, input_norm, branch_norm, ratio, cos)


def make_probe_batch(
    config: ModelConfig,
    seed: int,
    samples: int = 32,
    tokens: int | None = None,
) -> np.ndarray:
    """Unit-Gaussian token-space inputs, (samples, tokens, embed_dim)."""
    if tokens is None:
        tokens = config.seq_len
    rng = np.random.default_rng(seed)
    return rng.standard_normal((samples, tokens, config.embed_dim))


def _as_token_batch(batch, embed_dim: int) -> np.ndarray:
    arr = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != embed_dim:
        raise ShapeError(
            f"probe batch must be (samples, tokens, {embed_dim}), got shape {arr.shape}"
        )
    return arr


def collapse_probe(
    params: ModelParams,
    config: ModelConfig,
    batch,
    seed: int = 0,
) -> CollapseReport:
    """Run one forward pass over a token-space batch, recording every residual join.

    The batch enters where patch embedding would hand off, so the probe needs
    no dataset.  Sequential structures yield two records per layer (mha, mlp);
    the parallel structure yields one.
    """
    arr = _as_token_batch(batch, config.embed_dim)
    records: list[CollapseRecord] = []

    def probe(layer, substep, x_in, x_out):
        records.append(make_record(layer, substep, x_in.data, x_out.data))

    run_blocks(Tensor(arr), params, config, probe=probe)
    return CollapseReport(
        records=records,
        config_fingerprint=config_fingerprint(config),
        seed=seed,
        samples=arr.shape[0],
    )


# -- sequential vs parallel -------------------------------------------------------


@dataclass
class StructureComparison:
    sequential: CollapseReport
    parallel: CollapseReport
    # ||X_seq - X_par||_F / ||X_seq||_F after each layer, same shared weights.
    per_layer_divergence: list[float]
    # Final divergence spread over depth: per_layer_divergence[-1] / layers.
    divergence_per_layer: float


def compare_structures(
    config: ModelConfig, seed: int, batch, *, init_std: float | None = None
) -> StructureComparison:
    """Drive one weight set through sequential and parallel wiring side by side.

    The parallel model reuses the sequential model's two LN sets, so the
    parameter trees are literally the same objects; only the block wiring
    differs.  `config.structure` is ignored.  Weights default to fan-in
    scaled init (`init_std=None`): with tiny weights both wirings barely
    touch X and their difference is dominated by float noise rather than
    structure.
    """
    params = build_model(config, seed, init_std=init_std)
    arr = _as_token_batch(batch, config.embed_dim)
    seq_records: list[CollapseRecord] = []
    par_records: list[CollapseRecord] = []
    divergence: list[float] = []
    x_seq = Tensor(arr)
    x_par = Tensor(arr)
    for i, blk in enumerate(params.blocks):

        def probe_seq(substep, a, b, _i=i):
            seq_records.append(make_record(_i, substep, a.data, b.data))

        def probe_par(substep, a, b, _i=i):
            par_records.append(make_record(_i, substep, a.data, b.data))

        x_seq = transformer_block(
            x_seq, blk, BlockStructure.PRELN_SEQUENTIAL,
            config.value_variant, config.mlp_variant, probe=probe_seq,
        )
        x_par = transformer_block(
            x_par, blk, BlockStructure.PRELN_PARALLEL,
            config.value_variant, config.mlp_variant, probe=probe_par,
        )
        ref = float(np.linalg.norm(x_seq.data))
        diff = float(np.linalg.norm(x_seq.data - x_par.data))
        if ref > 0.0:
            divergence.append(diff / ref)
        else:
            divergence.append(0.0 if diff == 0.0 else float("inf"))
    fp = config_fingerprint(config)
    return StructureComparison(
        sequential=CollapseReport(seq_records, fp, seed, arr.shape[0]),
        parallel=CollapseReport(par_records, fp, seed, arr.shape[0]),
        per_layer_divergence=divergence,
        divergence_per_layer=divergence[-1] / len(params.blocks),
    )


def probe_config(
    depth: int,
    width: int,
    *,
    value_variant: ValueVariant = ValueVariant.STANDARD,
    mlp_variant: MlpVariant = MlpVariant.STANDARD_GELU,
    structure: BlockStructure = BlockStructure.PRELN_SEQUENTIAL,
) -> ModelConfig:
    """A small probe stack: depth x width with 4x MLP and as many heads as divide."""
    heads = next(h for h in (8, 4, 2, 1) if width % h == 0)
    return ModelConfig(
        image_size=32,
        patch_size=8,
        channels=3,
        layers=depth,
        embed_dim=width,
        mlp_dim=4 * width,
        heads=heads,
        num_classes=10,
        structure=structure,
        value_variant=value_variant,
        mlp_variant=mlp_variant,
    )


def divergence_depth_sweep(
    width: int = 64,
    depths: tuple[int, ...] = (4, 12, 24),
    seeds=range(5),
    *,
    tokens: int = 16,
    samples: int = 32,
    init_std: float | None = None,
) -> list[dict]:
    """Sequential-vs-parallel divergence across stack depths, one row per (depth, seed)."""
    rows = []
    for depth in depths:
        config = probe_config(depth, width)
        for seed in seeds:
            batch = make_probe_batch(config, seed, samples=samples, tokens=tokens)
            cmp = compare_structures(config, seed, batch, init_std=init_std)
            rows.append(
                {
                    "depth": depth,
                    "width": width,
                    "seed": int(seed),
                    "final_divergence": cmp.per_layer_divergence[-1],
                    "divergence_per_layer": cmp.divergence_per_layer,
                }
            )
    return rows


def write_divergence_csv(rows: list[dict], path) -> None:
    with open(path, "w") as f:
        f.write("depth,width,seed,final_divergence,divergence_per_layer\n")
        for r in rows:
            f.write(
                f"{r['depth']},{r['width']},{r['seed']},"
                f"{r['final_divergence']!r},{r['divergence_per_layer']!r}\n"
            )


# -- model-level gradient check ---------------------------------------------------


def gradcheck_model(
    config: ModelConfig,
    seed: int = 0,
    tokens: int = 8,
    *,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradReport:
    """Finite-difference check of d(sum of logits)/d(param) over every parameter.

    `tokens` sets the probe batch budget: the batch holds
    max(1, tokens // seq_len) random images, each contributing seq_len tokens.
    """
    n = param_count(config)
    if n > GRADCHECK_PARAM_GUARD:
        raise ConfigError(
            f"refusing finite-difference check: config has {n} parameters "
            f"(limit {GRADCHECK_PARAM_GUARD}); use a tiny config"
        )
    rng = np.random.default_rng(seed)
    batch = max(1, tokens // config.seq_len)
    images = rng.standard_normal(
        (batch, config.image_size, config.image_size, config.channels)
    )
    params = build_model(config, seed)

    def f():
        return vit_forward(images, params, config).sum()

    return grad_check(f, list(named_params(params).values()), eps=eps, tol=tol)


# -- CSV round-trip ---------------------------------------------------------------


def write_collapse_csv(records, path) -> None:
    """Write records (or a CollapseReport) with the exact documented header.

    Floats are written with repr(), which round-trips float64 exactly.
    """
    if isinstance(records, CollapseReport):
        records = records.records
    with open(path, "w") as f:
        f.write(COLLAPSE_CSV_HEADER + "\n")
        for r in records:
            f.write(
                f"{r.layer},{r.substep},{r.input_norm!r},{r.branch_norm!r},"
                f"{r.ratio!r},{r.cosine_io!r}\n"
            )


def read_collapse_csv(path) -> list[CollapseRecord]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != COLLAPSE_CSV_HEADER:
        got = lines[0] if lines else "<empty file>"
        raise FormatError(f"{path}: bad collapse CSV header: {got!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise FormatError(f"{path}: line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            records.append(
                CollapseRecord(
                    layer=int(parts[0]),
                    substep=parts[1],
                    input_norm=float(parts[2]),
                    branch_norm=float(parts[3]),
                    ratio=float(parts[4]),
                    cosine_io=float(parts[5]),
                )
            )
        except ValueError as e:
            raise FormatError(f"{path}: line {lineno}: {e}") from None
    return records


def median_records(reports: list[CollapseReport]) -> list[CollapseRecord]:
    """Per-(layer, substep) medians across seeds; all reports must share layout."""
    if not reports:
        return []
    keys = [(r.layer, r.substep) for r in reports[0].records]
    for rep in reports[1:]:
        if [(r.layer, r.substep) for r in rep.records] != keys:
            raise ConfigError("median_records: reports have mismatched record layouts")
    out = []
    for idx, (layer, substep) in enumerate(keys):
        vals = lambda attr: [getattr(rep.records[idx], attr) for rep in reports]
        out.append(
            CollapseRecord(
                layer=layer,
                substep=substep,
                input_norm=statistics.median(vals("input_norm")),
                branch_norm=statistics.median(vals("branch_norm")),
                ratio=statistics.median(vals("ratio")),
                cosine_io=statistics.median(vals("cosine_io")),
            )
        )
    return out
