"""Discrete noise schedule: the cumulative signal levels of the bridge timeline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DomainError

DEFAULT_TRAIN_STEPS = 200
DEFAULT_ALPHA_BAR_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal levels alpha_bar[0..T] with alpha_bar[0] == 1, strictly decreasing,
    and alpha_bar[T] > 0. Stored in float64; cast at the point of use."""

    alpha_bar: torch.Tensor

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.ndim != 1 or ab.numel() < 2:
            raise DomainError("alpha_bar must be a 1-D sequence of length >= 2")
        if ab.dtype != torch.float64:
            object.__setattr__(self, "alpha_bar", ab.to(torch.float64))
            ab = self.alpha_bar
        if ab[0].item() != 1.0:
            raise DomainError("alpha_bar[0] must be exactly 1")
        if not torch.all(ab[1:] < ab[:-1]):
            raise DomainError("alpha_bar must be strictly decreasing")
        if ab[-1].item() <= 0.0:
            raise DomainError("alpha_bar[T] must stay positive")

    @property
    def T(self) -> int:
        return self.alpha_bar.numel() - 1

    def at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise DomainError(f"timestep {t} outside [0, {self.T}]")
        return self.alpha_bar[t].item()

    @classmethod
    def linear(cls, steps: int, end: float = DEFAULT_ALPHA_BAR_END) -> "NoiseSchedule":
        """alpha_bar interpolated linearly from 1.0 down to `end` over `steps` steps."""
        if steps < 1:
            raise DomainError("steps must be >= 1")
        if not 0.0 < end < 1.0:
            raise DomainError("end must be in (0, 1)")
        frac = torch.arange(steps + 1, dtype=torch.float64) / steps
        return cls(1.0 + (end - 1.0) * frac)

    @classmethod
    def arc(cls, steps: int, end: float = DEFAULT_ALPHA_BAR_END) -> "NoiseSchedule":
        """alpha_bar spaced uniformly in arccos(sqrt(alpha_bar)).

        Linear spacing in alpha_bar crowds no resolution near alpha_bar = 1
        where the flow map has a square-root singularity; this spacing keeps
        the per-step rotation angle constant, which is what a clean solver
        order measurement needs.
        """
        if steps < 1:
            raise DomainError("steps must be >= 1")
        if not 0.0 < end < 1.0:
            raise DomainError("end must be in (0, 1)")
        theta_max = math.acos(math.sqrt(end))
        theta = torch.arange(steps + 1, dtype=torch.float64) * (theta_max / steps)
        ab = torch.cos(theta) ** 2
        ab[0] = 1.0
        return cls(ab)

    def subsample(self, steps: int) -> "NoiseSchedule":
        """Uniform-stride subsampling that keeps both endpoints."""
        if steps < 1 or self.T % steps != 0:
            raise DomainError(f"cannot subsample T={self.T} uniformly to {steps} steps")
        stride = self.T // steps
        return NoiseSchedule(self.alpha_bar[::stride].clone())

    def to_dict(self) -> dict:
        return {"alpha_bar": self.alpha_bar.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls(torch.tensor(data["alpha_bar"], dtype=torch.float64))
