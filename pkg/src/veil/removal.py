"""Reverse noise/mask predictor and the perturbation removal rule.

The removal net shares the generator's architecture (independent weights).
It consumes only the adversarial segment and predicts a reverse noise and a
mask; restoration adds the predicted reverse perturbation:

    x_restored = clamp(x_adv + epsilon * (reverse_noise * predicted_mask), -1, 1)

The keystone identity: substituting (-noise, mask) from the true generation
into this rule reproduces the original segment exactly (no clamp active).

The intensity used at generation time must be reused here; callers supply
it from checkpoint metadata and a mismatch is a hard error.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .generator import NetConfig, PerturbationGenerator


class IntensityMismatchError(ValueError):
    """Restoration requested with an intensity other than the trained one."""


@dataclass
class ReversePerturbationParts:
    """Predicted reverse noise/mask and the reverse perturbation."""

    reverse_noise: torch.Tensor
    predicted_mask: torch.Tensor
    reverse_perturbation: torch.Tensor
    epsilon: float


class RemovalPredictor(PerturbationGenerator):
    """Same layer stack as the generator, trained to invert it."""

    def predict_reverse(self, x_adv: torch.Tensor, epsilon: float) -> ReversePerturbationParts:
        """Predict the reverse perturbation of an adversarial segment."""
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        reverse_noise, predicted_mask = self.forward(x_adv)
        return ReversePerturbationParts(
            reverse_noise, predicted_mask, epsilon * reverse_noise * predicted_mask, epsilon
        )

    def restore(self, x_adv: torch.Tensor, epsilon: float) -> tuple[torch.Tensor, int]:
        """Apply the removal rule; returns the restored segment and clamp count."""
        x_adv = self._check_segment(x_adv)
        parts = self.predict_reverse(x_adv, epsilon)
        return apply_reverse(x_adv, parts.reverse_perturbation)


def apply_reverse(
    x_adv: torch.Tensor, reverse_perturbation: torch.Tensor
) -> tuple[torch.Tensor, int]:
    """Add a reverse perturbation to an adversarial segment and clamp."""
    raw = torch.as_tensor(x_adv, dtype=torch.float64) + reverse_perturbation
    restored = torch.clamp(raw, -1.0, 1.0)
    return restored, int((raw != restored).sum())


def new_removal(cfg: NetConfig, seed: int) -> RemovalPredictor:
    """Build a removal net with seeded uniform fan-in initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return RemovalPredictor(cfg)
