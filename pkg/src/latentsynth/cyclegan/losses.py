"""CycleGAN objective terms (least-squares adversarial + L1 cycle).

Functions accept torch tensors or numpy arrays / floats and return the same
kind of scalar, so the hand-computed examples and the training loop share
one definition.
"""

from __future__ import annotations

import numpy as np
import torch

GENERATOR = "generator"
DISCRIMINATOR = "discriminator"


def _mean(x):
    return x.mean() if isinstance(x, torch.Tensor) else float(np.mean(x))


def cycle_consistency_loss(x, x_reconstructed):
    """Mean absolute difference between an image batch and its reconstruction."""
    if tuple(x.shape) != tuple(x_reconstructed.shape):
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_reconstructed.shape)}")
    if isinstance(x, torch.Tensor):
        return (x - x_reconstructed).abs().mean()
    return float(np.mean(np.abs(np.asarray(x, float) - np.asarray(x_reconstructed, float))))


def adversarial_losses(real_scores, fake_scores, side: str):
    """Least-squares GAN objective for one critic output (global or patch map).

    discriminator: (mean((real - 1)^2) + mean(fake^2)) / 2
    generator:     mean((fake - 1)^2); ``real_scores`` is ignored.
    """
    if side == GENERATOR:
        return _mean((fake_scores - 1) ** 2)
    if side == DISCRIMINATOR:
        if real_scores is None:
            raise ValueError("discriminator loss needs real scores")
        return (_mean((real_scores - 1) ** 2) + _mean(fake_scores ** 2)) / 2
    raise ValueError(f"side must be {GENERATOR!r} or {DISCRIMINATOR!r}, got {side!r}")


def combine_adversarial(global_term, patch_term):
    return (global_term + patch_term) / 2


def total_generator_loss(adv_G, adv_F, cyc_A, cyc_B, lam=10.0):
    return adv_G + adv_F + lam * (cyc_A + cyc_B)
