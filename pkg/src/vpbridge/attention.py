"""Differential attention control: recording, column permutation, masked merge.

Cross-attention maps are j x k (j spatial queries, k tokens); self-attention
maps are j x j. A merge keeps the learnable-token columns of the live
(after-image) map and fills every other column from the recorded before-image
map, with the before map's END column relocated to the live END slot so the
merged map keeps the usual linguistic layout. Everything is multiplication
and addition, so gradients flow through the live side.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import torch

from .errors import ConfigurationError, DomainError, RenormalizationError

ROW_SUM_TOL = 1e-5


class AttentionKind(enum.Enum):
    CROSS = "cross"
    SELF = "self"


SiteKey = tuple[str, AttentionKind]


@dataclass
class AttentionRecord:
    """Per-(timestep, layer, kind) attention maps captured during a pass."""

    entries: dict[tuple[int, str, AttentionKind], torch.Tensor] = field(default_factory=dict)

    def put(self, t: int, layer: str, kind: AttentionKind, weights: torch.Tensor) -> None:
        w = weights.detach().clone()
        if w.ndim != 2:
            raise DomainError("attention maps must be 2-D")
        if torch.any(w < -ROW_SUM_TOL):
            raise DomainError("attention rows must be non-negative")
        sums = w.sum(dim=-1)
        if torch.any((sums - 1.0).abs() > ROW_SUM_TOL):
            raise DomainError("attention rows must sum to 1")
        self.entries[(t, layer, kind)] = w

    def get(self, t: int, layer: str, kind: AttentionKind) -> torch.Tensor:
        try:
            return self.entries[(t, layer, kind)]
        except KeyError:
            raise ConfigurationError(f"no attention recorded for t={t} {layer} {kind.value}")

    def has(self, t: int, layer: str, kind: AttentionKind) -> bool:
        return (t, layer, kind) in self.entries

    def timesteps(self) -> list[int]:
        return sorted({t for t, _, _ in self.entries})

    def sites(self) -> set[SiteKey]:
        return {(layer, kind) for _, layer, kind in self.entries}

    def validate_complete(self, timesteps, sites) -> None:
        missing = [
            (t, layer, kind.value)
            for t in timesteps
            for layer, kind in sites
            if (t, layer, kind) not in self.entries
        ]
        if missing:
            raise ConfigurationError(f"attention record incomplete; missing {missing[:4]}...")


def build_column_transform(k: int, y: int) -> torch.Tensor:
    """Permutation matrix: identity with columns 1 and y+1 swapped (y=0: identity)."""
    if not 0 <= y <= k - 2:
        raise DomainError(f"y must be in [0, k-2]; got y={y}, k={k}")
    lam = torch.eye(k, dtype=torch.float64)
    lam[:, [1, y + 1]] = lam[:, [y + 1, 1]]
    return lam


def build_mask(k: int, y: int) -> torch.Tensor:
    """Binary (k,) vector, 0 exactly at the y learnable positions 1..y."""
    if not 0 <= y <= k - 2:
        raise DomainError(f"y must be in [0, k-2]; got y={y}, k={k}")
    mask = torch.ones(k, dtype=torch.float64)
    mask[1 : 1 + y] = 0.0
    return mask


def _renormalize_rows(m: torch.Tensor) -> torch.Tensor:
    sums = m.sum(dim=-1, keepdim=True)
    bad = (sums.abs() < 1e-12).flatten()
    if torch.any(bad):
        raise RenormalizationError(
            "attention row has no remaining mass", row=int(bad.nonzero()[0].item())
        )
    return m / sums


def merge_cross(
    mb: torch.Tensor,
    ma: torch.Tensor,
    lam: torch.Tensor,
    mask: torch.Tensor,
    *,
    renormalize: bool = True,
) -> torch.Tensor:
    """mb @ lam scaled per-column by mask, plus ma scaled by (1 - mask).

    mb enters as a constant; gradients flow only through ma. Rows are
    renormalized to sum 1 afterwards unless disabled.
    """
    if mb.shape != ma.shape:
        raise DomainError(f"shape mismatch: before {tuple(mb.shape)} vs after {tuple(ma.shape)}")
    k = ma.shape[-1]
    if lam.shape != (k, k) or mask.shape != (k,):
        raise DomainError("transform/mask shapes do not match the token dimension")
    mb = mb.detach().to(ma.dtype)
    lam = lam.to(ma.dtype)
    mask = mask.to(ma.dtype)
    merged = (mb @ lam) * mask + ma * (1.0 - mask)
    return _renormalize_rows(merged) if renormalize else merged


def merge_self(mb: torch.Tensor, ma: torch.Tensor) -> torch.Tensor:
    """Full replacement by the before map; constant w.r.t. the live map."""
    if mb.shape != ma.shape:
        raise DomainError(f"shape mismatch: before {tuple(mb.shape)} vs after {tuple(ma.shape)}")
    return mb.detach().to(ma.dtype).clone()


def should_inject(t: int, T: int, tau: float, *, normalized: bool = True) -> bool:
    """Gate for the injection window; normalized mode compares t/T < tau."""
    if not 1 <= t <= T:
        raise DomainError(f"t={t} outside [1, {T}]")
    if normalized:
        return t / T < tau
    return t < tau


def apply_intensity(m: torch.Tensor, y: int, lambda_intensity: float) -> torch.Tensor:
    """Scale the learnable-token columns 1..y by lambda, then renormalize rows."""
    if lambda_intensity < 0:
        raise DomainError("lambda_intensity must be >= 0")
    if y == 0 or lambda_intensity == 1.0:
        return m
    scale = torch.ones(m.shape[-1], dtype=m.dtype)
    scale[1 : 1 + y] = lambda_intensity
    return _renormalize_rows(m * scale)


@dataclass(frozen=True)
class InjectionPlan:
    """What to inject where: recorded source maps, the tau gate, target sites,
    and the cross-attention intensity for the learned tokens."""

    source: AttentionRecord
    tau: float
    sites: frozenset[SiteKey]
    lambda_intensity: float = 1.0
    tau_normalized: bool = True
    renormalize_rows: bool = True

    def __post_init__(self):
        if self.tau_normalized and not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError("tau must lie in [0, 1]")
        if not self.sites:
            raise ConfigurationError("an active injection plan needs at least one site")
        if self.lambda_intensity < 0:
            raise ConfigurationError("lambda_intensity must be >= 0")

    def validate_coverage(self, T: int) -> None:
        injected = [
            t for t in range(1, T + 1)
            if should_inject(t, T, self.tau, normalized=self.tau_normalized)
        ]
        self.source.validate_complete(injected, self.sites)


@dataclass
class AttentionOverride:
    """Per-site transforms applied to live attention maps inside one forward
    pass, before the attention-weighted value aggregation."""

    ops: dict[SiteKey, Callable[[torch.Tensor], torch.Tensor]]

    @classmethod
    def replace_with(cls, record: AttentionRecord, t: int, sites) -> "AttentionOverride":
        """Full replacement of every listed site by the recorded map."""
        ops = {}
        for layer, kind in sites:
            recorded = record.get(t, layer, kind)
            ops[(layer, kind)] = (lambda live, _m=recorded: _m.detach().to(live.dtype).clone())
        return cls(ops)


def build_step_override(
    plan: InjectionPlan, t: int, T: int, k: int, y: int
) -> AttentionOverride | None:
    """Assemble the override for one denoising step of one branch.

    Within the tau window, cross maps get the masked merge (followed by the
    intensity rescale) and self maps are replaced outright. Outside the window
    only the intensity rescale applies, so lambda modulates the learned tokens
    over the whole trajectory.
    """
    inject = should_inject(t, T, plan.tau, normalized=plan.tau_normalized)
    lam_scale = plan.lambda_intensity
    ops: dict[SiteKey, Callable[[torch.Tensor], torch.Tensor]] = {}
    for layer, kind in plan.sites:
        if kind is AttentionKind.SELF:
            if inject:
                mb = plan.source.get(t, layer, kind)
                ops[(layer, kind)] = (lambda live, _mb=mb: merge_self(_mb, live))
        else:
            if inject:
                mb = plan.source.get(t, layer, kind)
                col_t = build_column_transform(k, y)
                mask = build_mask(k, y)

                def _merge(live, _mb=mb, _col=col_t, _mask=mask):
                    merged = merge_cross(_mb, live, _col, _mask, renormalize=plan.renormalize_rows)
                    return apply_intensity(merged, y, lam_scale)

                ops[(layer, kind)] = _merge
            elif lam_scale != 1.0:
                ops[(layer, kind)] = (lambda live: apply_intensity(live, y, lam_scale))
    return AttentionOverride(ops) if ops else None
