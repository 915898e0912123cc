"""Inference: apply a learned embedding to new images through the bridge.

The test image plays the before-image role: it is inverted under the null
embedding, its own null-text reconstruction attention is recorded, and the
generation leg runs under the learned embedding with that attention injected.
Intensity rescales the attention mass on the learned tokens; at zero the edit
degenerates to the plain reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .attention import InjectionPlan
from .bridge import LatentState, Trajectory, generate, invert
from .config import BridgeConfig
from .denoiser import DenoiserWeights, make_null_embedding
from .embedding import PromptEmbedding
from .errors import ConfigurationError

__all__ = [
    "EditResult",
    "edit",
    "edit_detailed",
    "edit_batch",
    "BatchItemError",
    "generate_from_embedding",
]


@dataclass
class EditResult:
    output: torch.Tensor            # clamped edited image
    reconstruction: torch.Tensor    # clamped null-text round trip of the input
    trajectory: Trajectory          # conditional generation leg
    midpoint: LatentState           # shared bridge latent x_T


@dataclass
class BatchItemError:
    index: int
    error: Exception


def _check_compatible(embedding: PromptEmbedding, weights: DenoiserWeights, config: BridgeConfig):
    if embedding.model_fingerprint is None or config.allow_model_mismatch:
        return
    if embedding.model_fingerprint != weights.fingerprint():
        raise ConfigurationError(
            "embedding does not match the loaded weights "
            "(set allow_model_mismatch to override)"
        )


def edit_detailed(
    image: torch.Tensor,
    embedding: PromptEmbedding,
    weights: DenoiserWeights,
    config: BridgeConfig,
    intensity: float = 1.0,
) -> EditResult:
    _check_compatible(embedding, weights, config)
    null = make_null_embedding(weights)
    inv = invert(image, weights, null, config)
    recon = generate(inv.final, weights, null, config, record_attention=True)

    injection = None
    if config.injection_enabled:
        injection = InjectionPlan(
            source=recon.attention,
            tau=config.tau,
            sites=frozenset((s, kind) for s, kind, _ in weights.sites()),
            lambda_intensity=intensity,
            tau_normalized=config.tau_normalized,
            renormalize_rows=config.renormalize_rows,
        )
    out = generate(inv.final, weights, embedding, config, injection=injection)
    return EditResult(
        output=out.final.data.clamp(-1.0, 1.0),
        reconstruction=recon.final.data.clamp(-1.0, 1.0),
        trajectory=out,
        midpoint=inv.final,
    )


def edit(
    image: torch.Tensor,
    embedding: PromptEmbedding,
    weights: DenoiserWeights,
    config: BridgeConfig,
    intensity: float = 1.0,
) -> torch.Tensor:
    return edit_detailed(image, embedding, weights, config, intensity).output


def edit_batch(
    images: list[torch.Tensor],
    embedding: PromptEmbedding,
    weights: DenoiserWeights,
    config: BridgeConfig,
    intensity: float = 1.0,
) -> list[torch.Tensor | BatchItemError]:
    """Element-wise edit, order preserved. A failing element becomes a
    BatchItemError slot instead of aborting the remaining items."""
    out: list[torch.Tensor | BatchItemError] = []
    for i, image in enumerate(images):
        try:
            out.append(edit(image, embedding, weights, config, intensity))
        except Exception as exc:  # noqa: BLE001 - reported per index by contract
            out.append(BatchItemError(i, exc))
    return out


def generate_from_embedding(
    embedding: PromptEmbedding,
    weights: DenoiserWeights,
    config: BridgeConfig,
    seed: int,
) -> torch.Tensor:
    """Sample the embedding's semantics: seeded Gaussian midpoint, generation
    under the embedding, no attention injection."""
    _check_compatible(embedding, weights, config)
    gen = torch.Generator().manual_seed(seed)
    xT = torch.randn((3, weights.height, weights.width), generator=gen)
    traj = generate(LatentState(xT, config.T), weights, embedding, config)
    return traj.final.data.clamp(-1.0, 1.0)
