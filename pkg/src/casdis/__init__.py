"""Sequential cascade modeling with factor-disentangled attention."""

from .data import (
    Batch,
    DatasetSplit,
    ParsedCascades,
    SyntheticSpec,
    Vocabulary,
    generate_synthetic,
    make_batches,
    parse_cascades,
    split_dataset,
)
from .evaluation import EvalReport, evaluate, hits_at_n, map_at_n, rank_of_target
from .model import (
    CascadeForward,
    DegenerateCascadeError,
    GumbelConfig,
    ModelParams,
    forward_cascade,
    init_params,
    load_checkpoint,
    predict_topn,
    save_checkpoint,
)
from .numerics import (
    Parameter,
    RngState,
    Tensor,
    cosine_similarity,
    finite_difference_gradient,
    layer_norm,
    sample_gumbel_softmax,
    softmax,
)
from .training import TrainConfig, TrainResult, adam_step, train

__version__ = "0.1.0"
