"""Prototype-part classifiers, interpretability-preserving distillation,
and the AAP / AJS / PMS transfer metrics, all on a small float64 autograd
core and a procedurally generated fine-grained dataset.
"""

from .datagen import Dataset, SyntheticSpec, generate
from .distill import (
    ActiveMask,
    DistillConfig,
    active_mask,
    distill,
    distill_epoch,
    is_active,
    loss_global,
    loss_model,
    loss_ppc,
    loss_total,
    train_model,
)
from .metrics import (
    MetricsReport,
    aap,
    ajs,
    evaluate_pair,
    hungarian,
    modified_jaccard_matrix,
    pms,
    prototype_id_lists,
)
from .model import (
    FeatureMap,
    ModelConfig,
    PrototypeModel,
    classify,
    forward,
    forward_batch,
    load_checkpoint,
    patch_distances,
    project_prototypes,
    save_checkpoint,
    similarity_from_distance,
    student_config,
    teacher_config,
    top1_accuracy,
)
from .tensor import SGD, Tensor, subseed

__version__ = "0.1.0"
