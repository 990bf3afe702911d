from .losses import (
    DISCRIMINATOR, GENERATOR, adversarial_losses, combine_adversarial, cycle_consistency_loss,
    total_generator_loss,
)
from .networks import DiscriminatorSpec, GeneratorSpec, GlobalDiscriminator, PatchDiscriminator, ResnetGenerator
from .training import (
    LATENT_TO_ROLLED, LOSS_COLUMNS, ROLLED_TO_LATENT, StyleModel, TrainConfig, TrainingError,
    read_loss_log, train_stage, translate, translate_batch, untrained_model,
)

__all__ = [
    "DISCRIMINATOR", "GENERATOR", "LATENT_TO_ROLLED", "LOSS_COLUMNS", "ROLLED_TO_LATENT",
    "DiscriminatorSpec", "GeneratorSpec", "GlobalDiscriminator", "PatchDiscriminator", "ResnetGenerator",
    "StyleModel", "TrainConfig", "TrainingError", "adversarial_losses", "combine_adversarial",
    "cycle_consistency_loss", "read_loss_log", "total_generator_loss", "train_stage", "translate",
    "translate_batch", "untrained_model",
]
