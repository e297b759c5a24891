"""Vision transformers with activated Value projections, from scratch in numpy.

The package is small enough to read end to end: a float64 autograd engine
(`tensor`), neural primitives (`layers`), attention with GELU/SwiGLU value
variants and three block structures (`attention`), ViT assembly (`model`),
residual-stream collapse measurements (`diagnostics`), a synthetic dataset
(`data`), and a training harness plus CLI (`train`, `cli`).
"""

from .attention import (
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
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    ChannelStats,
    Dataset,
    SyntheticSpec,
    channel_stats,
    gen_corpus,
    gen_synthetic,
    load_dataset,
    load_stats,
    make_batches,
    save_dataset,
    save_stats,
    standardize,
)
from .diagnostics import (
    CollapseRecord,
    CollapseReport,
    StructureComparison,
    collapse_probe,
    compare_structures,
    divergence_depth_sweep,
    gradcheck_model,
    make_probe_batch,
    median_records,
    read_collapse_csv,
    write_collapse_csv,
)
from .errors import (
    ConfigError,
    FormatError,
    GraphError,
    MabvitError,
    NumericError,
    ShapeError,
    TrainingDiverged,
)
from .gradcheck import GradReport, grad_check
from .layers import (
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
from .model import (
    ModelConfig,
    ModelParams,
    build_model,
    config_from_text,
    config_to_text,
    extract_patches,
    named_params,
    param_count,
    param_shapes,
    patch_embed,
    preset,
    run_blocks,
    vit_forward,
)
from .tensor import Tensor, concat, matmul, softmax_lastdim, zero_grads
from .train import (
    MetricsRow,
    OptHyper,
    OptState,
    TrainResult,
    TrainRunConfig,
    adamw_step,
    cross_entropy,
    evaluate,
    lr_at,
    parse_train_config,
    read_metrics,
    sgd_momentum_step,
    train,
    train_config_to_text,
    variant_sweep,
)

__version__ = "0.1.0"
