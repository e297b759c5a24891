"""Training harness: loss, optimizers, LR schedule, train/eval loops, config files.

Determinism contract: given the same TrainRunConfig (seed included), a fixed
BLAS thread count, and an injected `clock`, `train()` produces byte-identical
metrics CSVs and checkpoints.  The only nondeterministic output is wall-clock
timing, which is why the clock is injectable (pass `clock=lambda: 0.0` or set
MABVIT_FIXED_CLOCK=1 for the CLI).
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attention import BlockStructure, ValueVariant
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    STATS_FILE,
    TRAIN_FILE,
    VAL_FILE,
    Dataset,
    channel_stats,
    load_dataset,
    load_stats,
    make_batches,
    standardize,
)
from .diagnostics import config_fingerprint
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .model import (
    MODEL_CONFIG_FIELDS,
    ModelConfig,
    ModelParams,
    build_model,
    config_from_text,
    config_to_text,
    named_params,
    vit_forward,
)
from .tensor import Tensor, zero_grads

METRICS_CSV_HEADER = "step,split,loss,accuracy,lr,wall_ms"

# Evaluation always batches at this size regardless of the training batch
# size, so an eval inside train() and a later evaluate() on the saved
# checkpoint accumulate in the same order and agree bitwise.
EVAL_BATCH = 64


@dataclass
class TrainRunConfig:
    model: ModelConfig
    data: str = ""
    out: str = ""
    optimizer: str = "adamw"
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 64
    label_smoothing: float = 0.0
    eval_every: int = 200
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.model, ModelConfig):
            raise ConfigError("model must be a ModelConfig")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be adamw or sgd, got {self.optimizer!r}")
        finite = lambda v: isinstance(v, (int, float)) and math.isfinite(v)
        if not (finite(self.base_lr) and self.base_lr > 0):
            raise ConfigError(f"base_lr must be finite and > 0, got {self.base_lr}")
        if not (finite(self.weight_decay) and self.weight_decay >= 0):
            raise ConfigError(f"weight_decay must be finite and >= 0, got {self.weight_decay}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (finite(v) and 0.0 <= v < 1.0):
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if not (finite(self.eps) and self.eps > 0):
            raise ConfigError(f"eps must be finite and > 0, got {self.eps}")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        for name, lo in (
            ("warmup_steps", 0),
            ("total_steps", 1),
            ("batch_size", 1),
            ("eval_every", 1),
            ("log_every", 1),
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < lo:
                raise ConfigError(f"{name} must be an int >= {lo}, got {v!r}")
        if self.warmup_steps > self.total_steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} exceeds total_steps {self.total_steps}"
            )
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an int, got {self.seed!r}")


@dataclass
class MetricsRow:
    step: int
    split: str  # "train" | "val"
    loss: float
    accuracy: float
    lr: float
    wall_ms: int


def format_metrics_row(r: MetricsRow) -> str:
    return f"{r.step},{r.split},{r.loss!r},{r.accuracy!r},{r.lr!r},{r.wall_ms}"


def read_metrics(path) -> list[MetricsRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != METRICS_CSV_HEADER:
        got = lines[0] if lines else "<empty file>"
        raise FormatError(f"{path}: bad metrics header: {got!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6 or parts[1] not in ("train", "val"):
            raise FormatError(f"{path}: line {lineno}: malformed metrics row {line!r}")
        try:
            rows.append(
                MetricsRow(
                    step=int(parts[0]),
                    split=parts[1],
                    loss=float(parts[2]),
                    accuracy=float(parts[3]),
                    lr=float(parts[4]),
                    wall_ms=int(parts[5]),
                )
            )
        except ValueError as e:
            raise FormatError(f"{path}: line {lineno}: {e}") from None
    return rows


# -- loss ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean smoothed cross-entropy over the batch (stable log-softmax form)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    if not (0.0 <= smoothing < 1.0):
        raise ConfigError(f"smoothing must be in [0, 1), got {smoothing}")
    y = np.asarray(labels)
    b, c = logits.shape
    if y.shape != (b,):
        raise ShapeError(f"labels shape {y.shape} does not match batch size {b}")
    if y.size and (np.issubdtype(y.dtype, np.floating) or (y < 0).any() or (y >= c).any()):
        bad = y[(y < 0) | (y >= c)]
        raise IndexError(
            f"label {bad[0] if bad.size else y[0]!r} out of range for {c} classes"
        )
    q = np.full((b, c), smoothing / c)
    q[np.arange(b), y] += 1.0 - smoothing
    # Subtracting the (constant) row max leaves gradients exact and keeps
    # exp() in range.
    z = logits - Tensor(logits.data.max(axis=-1, keepdims=True))
    logp = z - z.exp().sum(axis=-1, keepdims=True).log()
    return (Tensor(q) * logp).sum() * (-1.0 / b)


# -- optimizers -----------------------------------------------------------------------

# Weight decay never touches biases, LN scales/shifts, the class token, or
# positional embeddings.
_WD_EXCLUDE_SUFFIXES = (".b", ".beta", ".gamma")
_WD_EXCLUDE_NAMES = frozenset({"cls_token", "pos_embed"})


def weight_decay_excluded(name: str) -> bool:
    return name.endswith(_WD_EXCLUDE_SUFFIXES) or name in _WD_EXCLUDE_NAMES


@dataclass
class OptHyper:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _check_entry(name: str, p: Tensor, g: np.ndarray | None, state: OptState) -> np.ndarray:
    if g is None:
        g = np.zeros_like(p.data)
    if g.shape != p.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match {name} {p.data.shape}")
    if name not in state.m:
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    elif state.m[name].shape != p.data.shape:
        raise ShapeError(
            f"optimizer state shape {state.m[name].shape} does not match "
            f"{name} {p.data.shape}"
        )
    return g


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: OptState,
    hp: OptHyper,
    step: int,
) -> None:
    """In-place AdamW update: decoupled decay first, then the adaptive step.

    eps sits outside the square root, so the very first step reduces to
    -lr * g / (|g| + eps) elementwise.
    """
    if step < 1:
        raise ConfigError(f"optimizer step counter starts at 1, got {step}")
    bc1 = 1.0 - hp.beta1 ** step
    bc2 = 1.0 - hp.beta2 ** step
    for name, p in params.items():
        g = _check_entry(name, p, grads.get(name), state)
        if hp.weight_decay > 0.0 and not weight_decay_excluded(name):
            p.data *= 1.0 - hp.lr * hp.weight_decay
        m, v = state.m[name], state.v[name]
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * (g * g)
        p.data -= hp.lr * (m / bc1) / (np.sqrt(v / bc2) + hp.eps)


def sgd_momentum_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: OptState,
    hp: OptHyper,
    step: int,
) -> None:
    """Heavy-ball SGD (momentum = beta1) with the same decoupled decay rule."""
    if step < 1:
        raise ConfigError(f"optimizer step counter starts at 1, got {step}")
    for name, p in params.items():
        g = _check_entry(name, p, grads.get(name), state)
        if hp.weight_decay > 0.0 and not weight_decay_excluded(name):
            p.data *= 1.0 - hp.lr * hp.weight_decay
        buf = state.m[name]
        buf *= hp.beta1
        buf += g
        p.data -= hp.lr * buf


def lr_at(step: int, cfg: TrainRunConfig) -> float:
    """Linear warmup 0 -> base_lr over warmup_steps, cosine decay to 0 at total_steps."""
    if step <= 0:
        return 0.0
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    if cfg.total_steps == cfg.warmup_steps:
        return cfg.base_lr
    t = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


# -- train / evaluate -----------------------------------------------------------------


@dataclass
class TrainResult:
    metrics_path: Path
    final_checkpoint: Path
    best_checkpoint: Path
    final_train_accuracy: float
    final_val_accuracy: float
    final_val_loss: float


def _eval_pass(
    params: ModelParams, config: ModelConfig, images: np.ndarray, labels: np.ndarray
) -> tuple[float, float]:
    """(accuracy, mean unsmoothed loss) over one deterministic pass, no dropout."""
    total_loss = 0.0
    correct = 0
    for start in range(0, len(labels), EVAL_BATCH):
        xb = images[start : start + EVAL_BATCH]
        yb = labels[start : start + EVAL_BATCH]
        logits = vit_forward(xb, params, config)
        total_loss += cross_entropy(logits, yb, 0.0).item() * len(yb)
        correct += int((logits.data.argmax(axis=-1) == yb).sum())
    n = len(labels)
    return correct / n, total_loss / n


def _load_corpus(data_dir: Path) -> tuple[Dataset, Dataset]:
    train_ds = load_dataset(data_dir / TRAIN_FILE)
    val_ds = load_dataset(data_dir / VAL_FILE)
    stats_path = data_dir / STATS_FILE
    stats = load_stats(stats_path) if stats_path.exists() else channel_stats(train_ds.images)
    return (
        Dataset(standardize(train_ds.images, stats), train_ds.labels, train_ds.num_classes),
        Dataset(standardize(val_ds.images, stats), val_ds.labels, val_ds.num_classes),
    )


def train(cfg: TrainRunConfig, *, clock=None) -> TrainResult:
    """Run one training job; returns paths and final metrics.

    Aborts with TrainingDiverged (carrying the last 10 losses) the moment the
    loss goes non-finite.
    """
    if clock is None:
        clock = time.perf_counter
    if not cfg.data:
        raise ConfigError("cfg.data is empty; point it at a generated data directory")
    data_dir = Path(cfg.data)
    if not data_dir.is_dir():
        raise ConfigError(
            f"cfg.data must be a directory containing {TRAIN_FILE} and {VAL_FILE}, "
            f"got {cfg.data!r}"
        )
    if not cfg.out:
        raise ConfigError("cfg.out is empty; set an output directory")
    if cfg.model.num_classes < 1:
        raise ConfigError("model.num_classes must be positive")
    train_ds, val_ds = _load_corpus(data_dir)
    if train_ds.num_classes != cfg.model.num_classes:
        raise ConfigError(
            f"dataset has {train_ds.num_classes} classes but the model head "
            f"expects {cfg.model.num_classes}"
        )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    final_path = out / "final.ckpt"
    best_path = out / "best.ckpt"

    params = build_model(cfg.model, seed=cfg.seed)
    named = named_params(params)
    tensors = list(named.values())
    state = OptState()
    drop_rng = np.random.default_rng([cfg.seed, 7]) if cfg.model.dropout > 0 else None
    fingerprint = config_fingerprint(cfg.model)

    t0 = clock()
    wall = lambda: int((clock() - t0) * 1000)
    recent: deque[float] = deque(maxlen=10)
    win_loss: list[float] = []
    win_correct = 0
    win_count = 0
    best_acc = -1.0
    final_train_acc = 0.0
    val_acc = val_loss = float("nan")
    step = 0
    epoch = 0
    with open(metrics_path, "w") as mf:
        mf.write(METRICS_CSV_HEADER + "\n")
        mf.flush()
        while step < cfg.total_steps:
            batches = make_batches(
                train_ds, cfg.batch_size, seed=cfg.seed + 1000003 * epoch, shuffle=True
            )
            for xb, yb in batches:
                if step >= cfg.total_steps:
                    break
                step += 1
                logits = vit_forward(xb, params, cfg.model, drop_rng=drop_rng)
                loss = cross_entropy(logits, yb, cfg.label_smoothing)
                lval = loss.item()
                recent.append(lval)
                if not math.isfinite(lval):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step} (model {fingerprint}); "
                        f"last {len(recent)} losses: {[f'{v:.4g}' for v in recent]}"
                    )
                zero_grads(tensors)
                loss.backward()
                hp = OptHyper(
                    lr=lr_at(step, cfg),
                    weight_decay=cfg.weight_decay,
                    beta1=cfg.beta1,
                    beta2=cfg.beta2,
                    eps=cfg.eps,
                )
                grads = {n: t.grad for n, t in named.items()}
                if cfg.optimizer == "adamw":
                    adamw_step(named, grads, state, hp, step)
                else:
                    sgd_momentum_step(named, grads, state, hp, step)
                win_loss.append(lval)
                win_correct += int((logits.data.argmax(axis=-1) == yb).sum())
                win_count += len(yb)
                if step % cfg.log_every == 0:
                    final_train_acc = win_correct / win_count
                    row = MetricsRow(
                        step=step,
                        split="train",
                        loss=float(np.mean(win_loss)),
                        accuracy=final_train_acc,
                        lr=hp.lr,
                        wall_ms=wall(),
                    )
                    mf.write(format_metrics_row(row) + "\n")
                    mf.flush()
                    win_loss, win_correct, win_count = [], 0, 0
                if step % cfg.eval_every == 0 or step == cfg.total_steps:
                    val_acc, val_loss = _eval_pass(
                        params, cfg.model, val_ds.images, val_ds.labels
                    )
                    row = MetricsRow(
                        step=step,
                        split="val",
                        loss=val_loss,
                        accuracy=val_acc,
                        lr=hp.lr,
                        wall_ms=wall(),
                    )
                    mf.write(format_metrics_row(row) + "\n")
                    mf.flush()
                    if val_acc > best_acc:
                        best_acc = val_acc
                        save_checkpoint(best_path, params, cfg.model)
            epoch += 1
    save_checkpoint(final_path, params, cfg.model)
    return TrainResult(
        metrics_path=metrics_path,
        final_checkpoint=final_path,
        best_checkpoint=best_path,
        final_train_accuracy=final_train_acc,
        final_val_accuracy=val_acc,
        final_val_loss=val_loss,
    )


def evaluate(checkpoint_path, data_path) -> tuple[float, float]:
    """(top-1 accuracy, mean loss) of a saved checkpoint on a dataset file.

    `data_path` may be a dataset file or a generated corpus directory (then
    its val split is used).  Channel standardization uses the norm sidecar
    next to the data when present, matching what training saw.
    """
    params, config = load_checkpoint(checkpoint_path)
    p = Path(data_path)
    if p.is_dir():
        file, stats_path = p / VAL_FILE, p / STATS_FILE
    else:
        file, stats_path = p, p.parent / STATS_FILE
    ds = load_dataset(file)
    images = ds.images
    if stats_path.exists():
        images = standardize(images, load_stats(stats_path))
    return _eval_pass(params, config, images, ds.labels)


# -- the seven-variant grid -----------------------------------------------------------

# (structure, value path, MLP width multiplier): the full grid of block
# structure x value activation x parameter-reduced MLP that the harness
# sweeps from one base config.
SWEEP_VARIANTS: dict[str, tuple[BlockStructure, ValueVariant, int]] = {
    "base": (BlockStructure.PRELN_SEQUENTIAL, ValueVariant.STANDARD, 4),
    "par": (BlockStructure.PRELN_PARALLEL, ValueVariant.STANDARD, 4),
    "glu": (BlockStructure.PRELN_SEQUENTIAL, ValueVariant.SWIGLU_ON_V, 4),
    "par-glu": (BlockStructure.PRELN_PARALLEL, ValueVariant.SWIGLU_ON_V, 4),
    "pr-glu": (BlockStructure.PRELN_SEQUENTIAL, ValueVariant.SWIGLU_ON_V, 3),
    "par-pr-glu": (BlockStructure.PRELN_PARALLEL, ValueVariant.SWIGLU_ON_V, 3),
    "gelu": (BlockStructure.PRELN_SEQUENTIAL, ValueVariant.GELU_ON_V, 4),
}


def variant_sweep(cfg: TrainRunConfig, out_root, *, clock=None) -> dict[str, TrainResult]:
    """Train every SWEEP_VARIANTS entry from one base config, same seed each.

    Each variant writes its own metrics.csv and checkpoints under
    out_root/<variant>/.
    """
    results = {}
    for name, (structure, value_variant, mult) in SWEEP_VARIANTS.items():
        model = replace(
            cfg.model,
            structure=structure,
            value_variant=value_variant,
            mlp_dim=mult * cfg.model.embed_dim,
        )
        sub = replace(cfg, model=model, out=str(Path(out_root) / name))
        results[name] = train(sub, clock=clock)
    return results


# -- config files ---------------------------------------------------------------------

_HARNESS_FIELDS = (
    "optimizer",
    "base_lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "warmup_steps",
    "total_steps",
    "batch_size",
    "label_smoothing",
    "eval_every",
    "log_every",
    "seed",
    "data",
    "out",
)
_HARNESS_INTS = frozenset(
    {"warmup_steps", "total_steps", "batch_size", "eval_every", "log_every", "seed"}
)
_HARNESS_FLOATS = frozenset(
    {"base_lr", "weight_decay", "beta1", "beta2", "eps", "label_smoothing"}
)


def train_config_to_text(cfg: TrainRunConfig) -> str:
    """Canonical key=value form: model.* lines first, then harness keys."""
    lines = [
        "model." + line for line in config_to_text(cfg.model).splitlines()
    ]
    for name in _HARNESS_FIELDS:
        v = getattr(cfg, name)
        lines.append(f"{name}={v!r}" if isinstance(v, float) else f"{name}={v}")
    return "\n".join(lines) + "\n"


def parse_train_config(text: str) -> TrainRunConfig:
    """Strict parse of the key=value config form (unknown keys rejected)."""
    model_lines: list[str] = []
    kwargs: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("model."):
            model_lines.append(f"{key[len('model.'):]}={value}")
            continue
        if key not in _HARNESS_FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in kwargs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in _HARNESS_INTS:
            try:
                kwargs[key] = int(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} needs an int, got {value!r}") from None
        elif key in _HARNESS_FLOATS:
            try:
                kwargs[key] = float(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} needs a float, got {value!r}") from None
        else:
            kwargs[key] = value
    model = config_from_text("\n".join(model_lines) + "\n")
    return TrainRunConfig(model=model, **kwargs)  # type: ignore[arg-type]
