"""Training objectives for joint perturbation generation and removal.

Every loss is a pure differentiable function of torch tensors. Inputs may
be single segments/embeddings (1-D) or batches (2-D); norms and cosines are
taken over the last axis and batch results are averaged, so the value of a
batched call equals the mean of the per-segment values.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.double()
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the composite objective, all in the open (0, 1).

    ``epsilon`` is the attack intensity bounding the perturbation amplitude.
    """

    alpha: float = 0.01
    beta: float = 0.007
    gamma: float = 0.8
    theta: float = 0.06
    epsilon: float = 0.05

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "theta"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie strictly in (0, 1), got {v}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "theta": self.theta,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: float(d[k]) for k in ("alpha", "beta", "gamma", "theta", "epsilon")})


def cosine_similarity_loss(z: torch.Tensor, z_adv: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between clean and adversarial speaker embeddings.

    Minimizing this drives the embeddings apart; the value lies in [-1, 1].
    Raises on zero-norm embeddings, where the cosine is undefined.
    """
    z, z_adv = _as_tensor(z), _as_tensor(z_adv)
    if z.shape != z_adv.shape:
        raise ValueError(f"embedding shape mismatch: {tuple(z.shape)} vs {tuple(z_adv.shape)}")
    norm_a = torch.linalg.vector_norm(z, dim=-1)
    norm_b = torch.linalg.vector_norm(z_adv, dim=-1)
    if bool((norm_a == 0).any()) or bool((norm_b == 0).any()):
        raise ValueError("cosine undefined for zero-norm embedding")
    cos = (z * z_adv).sum(dim=-1) / (norm_a * norm_b)
    return cos.mean()


def quality_loss(x, x_adv, mask, alpha: float) -> torch.Tensor:
    """(1-alpha) * ||x_adv - x||_2 + alpha * ||mask||_2 per segment.

    Both terms are unnormalized Euclidean norms over the segment; the first
    penalizes audible deviation, the second the mask footprint.
    """
    x, x_adv, mask = _as_tensor(x), _as_tensor(x_adv), _as_tensor(mask)
    if x.shape != x_adv.shape or x.shape != mask.shape:
        raise ValueError("x, x_adv and mask must share a shape")
    dist = torch.linalg.vector_norm(x_adv - x, dim=-1)
    mask_norm = torch.linalg.vector_norm(mask, dim=-1)
    return ((1.0 - alpha) * dist + alpha * mask_norm).mean()


def generator_loss(cosine_term, quality_term, beta: float) -> torch.Tensor:
    """(1-beta) * cosine_term + beta * quality_term."""
    return (1.0 - beta) * _as_tensor(cosine_term) + beta * _as_tensor(quality_term)


def noise_reversal_loss(noise, reverse_noise) -> torch.Tensor:
    """||noise + reverse_noise||_2: zero exactly when the prediction is -noise."""
    noise, reverse_noise = _as_tensor(noise), _as_tensor(reverse_noise)
    if noise.shape != reverse_noise.shape:
        raise ValueError("noise length mismatch")
    return torch.linalg.vector_norm(noise + reverse_noise, dim=-1).mean()


def mask_match_loss(mask, predicted_mask) -> torch.Tensor:
    """||mask - predicted_mask||_2: zero exactly when the masks agree."""
    mask, predicted_mask = _as_tensor(mask), _as_tensor(predicted_mask)
    if mask.shape != predicted_mask.shape:
        raise ValueError("mask length mismatch")
    return torch.linalg.vector_norm(mask - predicted_mask, dim=-1).mean()


def reversal_loss(mask_term, noise_term, gamma: float) -> torch.Tensor:
    """(1-gamma) * mask_term + gamma * noise_term."""
    return (1.0 - gamma) * _as_tensor(mask_term) + gamma * _as_tensor(noise_term)


def joint_loss(generator_term, reversal_term, theta: float) -> torch.Tensor:
    """(1-theta) * generator_term + theta * reversal_term."""
    return (1.0 - theta) * _as_tensor(generator_term) + theta * _as_tensor(reversal_term)
