"""Semi-supervised adversarial CycleGAN for cross-modality image synthesis.

A small numpy autodiff engine, the generator / discriminator networks, the
least-squares adversarial objectives, a deterministic trainer and the
evaluation tooling, all runnable on a CPU.
"""
from .tensor import Tensor, no_grad
from .nets import ArchConfig, ModelBundle
from .losses import LossWeights
from .trainer import TrainConfig, lr_at_epoch, run_training

__all__ = ["Tensor", "no_grad", "ArchConfig", "ModelBundle", "LossWeights", "TrainConfig",
           "lr_at_epoch", "run_training"]
__version__ = "0.1.0"
