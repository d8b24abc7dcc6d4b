"""Layer-wise task-vector pruning and checkpoint merging toolkit."""

from .merging import (
    MergeRecipe,
    adamerging_apply,
    dare,
    mwp,
    pcb_apply,
    run_recipe,
    task_arithmetic,
    ties_merge,
    weight_average,
    wise_ft,
)
from .saliency import (
    LayerMaskSet,
    ParameterMask,
    SaliencyMatrix,
    SharedMask,
    compute_absolute_score,
    compute_saliency,
    or_masks,
    parameter_saliency_mask,
    random_layer_mask,
    threshold_mask,
)
from .task_vector import (
    TaskVector,
    apply,
    diff,
    linear_combine,
    load_task_vector,
    save_task_vector,
)
from .tensor_store import (
    Checkpoint,
    CompatibilityError,
    Dtype,
    FormatError,
    LayerCatalog,
    Tensor,
    checkpoint_fingerprint,
    load_checkpoint,
    save_checkpoint,
    validate_compatibility,
)
from .theory import (
    DiversityReport,
    NeuronSelector,
    SyntheticSpec,
    diversity,
    h_score,
    prop1_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CompatibilityError",
    "DiversityReport",
    "Dtype",
    "FormatError",
    "LayerCatalog",
    "LayerMaskSet",
    "MergeRecipe",
    "NeuronSelector",
    "ParameterMask",
    "SaliencyMatrix",
    "SharedMask",
    "SyntheticSpec",
    "TaskVector",
    "Tensor",
    "adamerging_apply",
    "apply",
    "checkpoint_fingerprint",
    "compute_absolute_score",
    "compute_saliency",
    "dare",
    "diff",
    "diversity",
    "h_score",
    "linear_combine",
    "load_checkpoint",
    "load_task_vector",
    "mwp",
    "or_masks",
    "parameter_saliency_mask",
    "pcb_apply",
    "prop1_experiment",
    "random_layer_mask",
    "run_recipe",
    "save_checkpoint",
    "save_task_vector",
    "task_arithmetic",
    "threshold_mask",
    "ties_merge",
    "validate_compatibility",
    "weight_average",
    "wise_ft",
]
