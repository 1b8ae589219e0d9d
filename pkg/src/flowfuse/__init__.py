"""Invertible multi-modal image synthesis and fusion.

One exactly-invertible model serves both directions of a task: the forward
pass synthesizes (or fuses) target-modality images from source modalities,
the inverse pass recovers the sources from a target. Channel replication
("variable augmentation") equalizes the two sides' channel counts so the
bijection is well-posed, and a bidirectional residual objective trains both
directions at once.

The package is organized as a numpy core (:mod:`flowfuse.numerics`,
:mod:`flowfuse.flow`, :mod:`flowfuse.augment`, :mod:`flowfuse.training`,
:mod:`flowfuse.metrics`, :mod:`flowfuse.dataio`), an operation layer
(:mod:`flowfuse.pipeline`), and two equivalent front ends: a FastAPI
service (:mod:`flowfuse.service`) and the ``flowfuse`` CLI.
"""

__version__ = "0.1.0"

from .augment import AugmentationPlan, Modality, augment, deaugment, plan_for
from .flow import (
    FlowModel,
    init_model,
    model_forward,
    model_inverse,
)
from .training import TrainConfig, train

__all__ = [
    "__version__",
    "AugmentationPlan",
    "FlowModel",
    "Modality",
    "TrainConfig",
    "augment",
    "deaugment",
    "init_model",
    "model_forward",
    "model_inverse",
    "plan_for",
    "train",
]
