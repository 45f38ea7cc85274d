"""Question-conditioned cascaded selection over video features.

Long videos are represented as segments x frames x patches of frozen
features. Each reasoning layer selects the segments and patch regions that
matter for the question with differentiable top-k sampling, runs joint
self-attention over the surviving tokens plus the question words, and the
layer-averaged pooled output is matched against a bank of answer features.
"""

__version__ = "0.1.0"

from .answer import Prediction, predict, qa_loss, score_answers
from .features import (
    AnswerBank,
    FeatureFormatError,
    QuestionFeatures,
    SynthConfig,
    SynthSample,
    VideoFeatures,
    generate_synthetic,
    load_features,
    save_features,
)
from .harness import (
    ConfigError,
    CostReport,
    DivergenceError,
    MetricsLog,
    ParamsFormatError,
    TrainConfig,
    cost_estimate,
    evaluate,
    init_model,
    load_params,
    model_forward,
    save_params,
    sweep,
    train,
)
from .ista import (
    MistParams,
    TRACE_SCHEMA,
    init_mist_params,
    ista_layer,
    mist_forward,
    trace_to_json,
)
from .numerics import (
    AttentionParams,
    GradCheckReport,
    LinearMap,
    MacCounter,
    NonFiniteError,
    ShapeMismatch,
    Tensor,
    count_macs,
    cross_entropy,
    grad_check,
    layer_norm,
    linear,
    matmul,
    mean_pool,
    multi_head_attention,
    no_grad,
    parameter,
    softmax,
    tensor,
)
from .selection import (
    SelectionResult,
    SelectorMode,
    gumbel_topk,
    region_select,
    region_select_multi,
    segment_select,
)

__all__ = [
    "AnswerBank",
    "AttentionParams",
    "ConfigError",
    "CostReport",
    "DivergenceError",
    "FeatureFormatError",
    "GradCheckReport",
    "LinearMap",
    "MacCounter",
    "MetricsLog",
    "MistParams",
    "NonFiniteError",
    "ParamsFormatError",
    "Prediction",
    "QuestionFeatures",
    "SelectionResult",
    "SelectorMode",
    "ShapeMismatch",
    "SynthConfig",
    "SynthSample",
    "TRACE_SCHEMA",
    "Tensor",
    "TrainConfig",
    "VideoFeatures",
    "cost_estimate",
    "count_macs",
    "cross_entropy",
    "evaluate",
    "generate_synthetic",
    "grad_check",
    "gumbel_topk",
    "init_mist_params",
    "init_model",
    "ista_layer",
    "layer_norm",
    "linear",
    "load_features",
    "load_params",
    "matmul",
    "mean_pool",
    "mist_forward",
    "model_forward",
    "multi_head_attention",
    "no_grad",
    "parameter",
    "predict",
    "qa_loss",
    "region_select",
    "region_select_multi",
    "save_features",
    "save_params",
    "score_answers",
    "segment_select",
    "softmax",
    "sweep",
    "tensor",
    "trace_to_json",
    "train",
    "__version__",
]
