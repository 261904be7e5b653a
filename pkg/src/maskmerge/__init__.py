"""Multi-task model fusion with meta-learned relaxed-Bernoulli parameter masks."""

from .concrete import (
    ConcreteMaskSample,
    MaskLogits,
    Temperature,
    binarize,
    gumbel_softmax_categorical,
    mask_and_rescale,
    sample_bernoulli_hard,
    sample_concrete,
    sample_gumbel,
)
from .engine import AdamState, GradTape, Tensor, adam_step
from .errors import (
    ContractError,
    CorruptCheckpointError,
    DegenerateMaskError,
    DomainError,
    MaskMergeError,
    PipelineError,
    ShapeError,
)
from .merge import (
    MergedModel,
    MergeWeights,
    adamerging_merge,
    entropy_loss,
    task_arithmetic_merge,
    tta_optimize_weights,
)
from .metalearn import (
    MetaConfig,
    MetaTrace,
    TtaConfig,
    concrete_adamerging,
    concrete_task_arithmetic,
    finalize_mask,
    meta_learn_mask,
)
from .nn import (
    Dataset,
    MlpSpec,
    ParamVector,
    TrainConfig,
    evaluate,
    fine_tune,
    forward,
    init_pretrained,
)
from .taskvec import (
    TaskVector,
    compute_task_vector,
    sum_scale,
    ties_merge,
    weight_average,
)

__version__ = "0.1.0"
