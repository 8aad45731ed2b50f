from .estimator import ReconstructionDefense
from .losses import (LossWeights, TrainingSchedule, cgan_losses,
                     combined_generator_objective, l1_loss, loss_weight_schedule,
                     perceptual_loss)
from .networks import PatchDiscriminator, UNetGenerator
from .training import (DefenseCheckpoint, load_checkpoint, reconstruct,
                       save_checkpoint, train_defense)

__all__ = [
    "ReconstructionDefense", "LossWeights", "TrainingSchedule", "cgan_losses",
    "combined_generator_objective", "l1_loss", "loss_weight_schedule",
    "perceptual_loss", "PatchDiscriminator", "UNetGenerator",
    "DefenseCheckpoint", "load_checkpoint", "reconstruct", "save_checkpoint",
    "train_defense",
]
