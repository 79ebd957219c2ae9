"""Progressive sparse local attention for differentiable feature propagation.

A small numpy-backed library: a tape-based autograd substrate, sparse/dense
local neighborhoods, the attention alignment operators with their ablation
baselines, the three fusion nets, a key-frame video pipeline over synthetic
feature streams, and a benchmark CLI.
"""

from .attention import (
    AttentionWeights,
    EmbeddingPair,
    VARIANTS,
    aggregate,
    align_features,
    brute_force_align,
    compute_affinities,
    matchtrans_align,
    nonlocal_align,
    normalize_matchtrans,
    normalize_psla,
    psla_align,
    variant_spec,
)
from .errors import (
    ConfigurationError,
    InvalidInputError,
    IOFormatError,
    PslaError,
    TrainingError,
    UnsupportedError,
    UsageError,
)
from .fusion import (
    FusionWeights,
    TransformNet,
    TwoStreamFusionNet,
    fuse,
    param_count,
    quality_net_forward,
    swap_streams,
    transform_net_forward,
    update_net_forward,
)
from .neighborhood import (
    NeighborhoodSpec,
    ValidityMask,
    build_dense,
    build_progressive,
    build_with_strides,
    make_mask,
)
from .pipeline import (
    FrameSchedule,
    PipelineConfig,
    PipelineNets,
    RunStats,
    SyntheticVideo,
    TemporalState,
    TrainingTriplet,
    denseft_step,
    evaluate_toy,
    generate_video,
    rfu_step,
    run_video,
    sample_triplet,
    schedule,
    train_toy,
    translate,
)
from .tensor import (
    ConvParams,
    GradTape,
    Gradients,
    Tensor,
    concat_channels,
    conv2d,
    feature_map,
    grad_check,
    mse,
    relu,
    softmax_masked,
    sum_all,
)
from .tensorio import read_checkpoint, read_tensor, write_checkpoint, write_tensor

__version__ = "0.1.0"
