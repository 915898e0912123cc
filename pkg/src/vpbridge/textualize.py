"""Optimize the learnable rows of a prompt embedding so the bridge carries the
before image to the after image.

Each epoch re-derives the bridge midpoint from the before image under the null
embedding, then walks the generation leg. At every step the predicted clean
image is pulled toward the after image under an exponential time weight that
peaks at the final step; the embedding is updated immediately and the state
advances with the refreshed prediction. Gradient history never crosses step
boundaries (the state entering a step is a constant), which is what makes the
per-step update affordable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from .attention import AttentionRecord, InjectionPlan, build_step_override
from .bridge import LatentState, _ddim_map, generate, invert
from .config import BridgeConfig
from .denoiser import DenoiserWeights, combine_guidance, make_null_embedding, predict_noise
from .embedding import PromptEmbedding
from .errors import ConfigurationError, DomainError, NumericalError

DIVERGENCE_LIMIT = 1e6


@dataclass
class VisualPrompt:
    """A before/after pair defining the transformation to learn."""

    before: torch.Tensor
    after: torch.Tensor
    id: str = "pair"

    def __post_init__(self):
        if self.before.shape != self.after.shape:
            raise ConfigurationError("before/after images must share a shape")
        for name, img in (("before", self.before), ("after", self.after)):
            if not torch.isfinite(img).all():
                raise ConfigurationError(f"{name} image contains non-finite values")
            if img.abs().max().item() > 1.0 + 1e-5:
                raise ConfigurationError(f"{name} image values must lie in [-1, 1]")


@dataclass
class StepLoss:
    epoch: int
    step: int
    beta: float
    loss: float


@dataclass
class StepEvent:
    """Hook payload: the step's loss plus a probe that re-evaluates the same
    objective (same state, same step) with the post-update embedding."""

    epoch: int
    step: int
    beta: float
    loss: float
    recompute_loss: Callable[[], float]


@dataclass
class TextualizationResult:
    embedding: PromptEmbedding
    loss_history: list[StepLoss]
    final_reconstruction: torch.Tensor
    config: BridgeConfig


def beta(t: int, T: int, temperature: float, *, raw_time: bool = False) -> float:
    """Per-step loss weight; 1 at the final denoising step, decaying
    exponentially toward the first. `raw_time` instead uses
    exp(temperature * (t - T)) over diffusion time t."""
    if not 1 <= t <= T:
        raise DomainError(f"t={t} outside [1, {T}]")
    if raw_time:
        return math.exp(temperature * (t - T))
    completed = T - t + 1
    return math.exp(temperature * (completed - T))


def step_loss(
    f: torch.Tensor,
    target: torch.Tensor,
    t: int,
    T: int,
    temperature: float,
    *,
    raw_time: bool = False,
) -> torch.Tensor:
    """beta(t) times the L2 norm (root-sum-square) of f - target."""
    if f.shape != target.shape:
        raise DomainError(f"shape mismatch: {tuple(f.shape)} vs {tuple(target.shape)}")
    w = beta(t, T, temperature, raw_time=raw_time)
    return w * torch.linalg.vector_norm(f - target.to(f.dtype))


def init_embedding(
    weights: DenoiserWeights,
    y: int,
    init_source: torch.Tensor | None = None,
    seed: int = 0,
    *,
    sigma: float = 0.02,
) -> PromptEmbedding:
    """Fresh embedding with y learnable rows.

    Without an init source the rows are a seeded Gaussian draw. With one, the
    rows are tiled from the condition tokens of the stored corpus image nearest
    to it under pixel MSE (a coarse descriptor of the target appearance).
    """
    if init_source is None:
        gen = torch.Generator().manual_seed(seed)
        rows = torch.randn(y, weights.token_dim, generator=gen) * sigma
    else:
        if weights.prototypes is None:
            raise ConfigurationError("descriptor init requires weights with a stored corpus")
        mse = ((weights.prototypes - init_source[None]) ** 2).flatten(1).mean(dim=1)
        label = weights.prototype_labels[int(mse.argmin())]
        label_rows = weights.label_tokens(label)
        rows = torch.stack([label_rows[i % label_rows.shape[0]] for i in range(y)])
    return weights.embedding_from_rows(rows)


def _prompt_bridge_state(
    weights: DenoiserWeights, prompt: VisualPrompt, config: BridgeConfig, null: PromptEmbedding
) -> tuple[LatentState, AttentionRecord]:
    """Midpoint latent and the null-text reconstruction attention for one pair.

    The before-attention comes from the reconstruction pass (midpoint back to
    image), so its timesteps align one-to-one with generation timesteps.
    """
    inv = invert(prompt.before, weights, null, config)
    recon = generate(inv.final, weights, null, config, record_attention=True)
    return inv.final, recon.attention


def textualize(
    prompts: list[VisualPrompt] | VisualPrompt,
    weights: DenoiserWeights,
    config: BridgeConfig,
    *,
    on_step: Callable[[StepEvent], None] | None = None,
) -> TextualizationResult:
    """Learn an embedding that reproduces the prompts' transformation.

    With several prompts, one is drawn per epoch (seeded uniform). Returns the
    final embedding, the full (N * T)-entry loss history, and the final
    reconstruction of the first prompt's before image under the learned
    embedding (computed through the same path the editor uses).
    """
    if isinstance(prompts, VisualPrompt):
        prompts = [prompts]
    if not prompts:
        raise ConfigurationError("at least one visual prompt is required")
    for p in prompts:
        if p.before.shape != (3, weights.height, weights.width):
            raise ConfigurationError(f"prompt {p.id}: shape does not match the model")

    T, N = config.T, config.N
    k = weights.token_capacity
    null = make_null_embedding(weights)
    sched = weights.schedule if weights.schedule.T == T else weights.schedule.subsample(T)
    sites = frozenset((s, kind) for s, kind, _ in weights.sites())

    use_descriptor = config.init_mode == "descriptor" and weights.prototypes is not None
    init_source = prompts[0].after if use_descriptor else None
    start = init_embedding(weights, config.y, init_source, config.seed, sigma=config.init_sigma)
    rows = start.learnable_rows().detach().clone().requires_grad_(True)
    opt = torch.optim.AdamW(
        [rows], lr=config.gamma, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0
    )

    picker = torch.Generator().manual_seed(config.seed)
    cache: dict[int, tuple[LatentState, AttentionRecord]] = {}
    history: list[StepLoss] = []

    def guided_eps(x_in: torch.Tensor, t: int, cond_ov, null_ov) -> torch.Tensor:
        with torch.no_grad():
            eps_null = predict_noise(
                weights, x_in, t, null, null_ov, num_steps=T, record_attention=False
            ).noise_prediction
        c_now = weights.embedding_from_rows(rows)
        eps_cond = predict_noise(
            weights, x_in, t, c_now, cond_ov, num_steps=T, record_attention=False
        ).noise_prediction
        return combine_guidance(eps_null, eps_cond, config.w)

    for epoch in range(N):
        idx = int(torch.randint(len(prompts), (1,), generator=picker)) if len(prompts) > 1 else 0
        if idx not in cache:
            cache[idx] = _prompt_bridge_state(weights, prompts[idx], config, null)
        xT, before_attn = cache[idx]
        after = prompts[idx].after

        plan = None
        if config.injection_enabled:
            plan = InjectionPlan(
                source=before_attn,
                tau=config.tau,
                sites=sites,
                lambda_intensity=1.0,
                tau_normalized=config.tau_normalized,
                renormalize_rows=config.renormalize_rows,
            )

        x = xT.data.detach().clone()
        for t in range(T, 0, -1):
            cond_ov = null_ov = None
            if plan is not None:
                cond_ov = build_step_override(plan, t, T, k, config.y)
                null_ov = build_step_override(plan, t, T, k, 0)

            a_t = sched.at(t)
            eps = guided_eps(x, t, cond_ov, null_ov)
            f = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
            loss = step_loss(
                f, after, t, T, config.beta_temperature, raw_time=config.beta_raw_time
            )
            loss_val = loss.item()
            if not math.isfinite(loss_val) or loss_val > DIVERGENCE_LIMIT:
                raise NumericalError(
                    f"textualization diverged (loss={loss_val}) at epoch {epoch}, step {t}",
                    step=t, epoch=epoch,
                )
            opt.zero_grad()
            loss.backward()
            opt.step()

            if on_step is not None:
                def _probe(_x=x, _t=t, _a=a_t, _after=after, _co=cond_ov, _no=null_ov):
                    with torch.no_grad():
                        e = guided_eps(_x, _t, _co, _no)
                        f2 = (_x - math.sqrt(1.0 - _a) * e) / math.sqrt(_a)
                        return step_loss(
                            f2, _after, _t, T, config.beta_temperature,
                            raw_time=config.beta_raw_time,
                        ).item()

                beta_val = beta(t, T, config.beta_temperature, raw_time=config.beta_raw_time)
                on_step(StepEvent(epoch, t, beta_val, loss_val, _probe))
            else:
                beta_val = beta(t, T, config.beta_temperature, raw_time=config.beta_raw_time)

            with torch.no_grad():
                eps_adv = guided_eps(x, t, cond_ov, null_ov) if config.post_update_advance \
                    else eps.detach()
                x, _ = _ddim_map(x, eps_adv, a_t, sched.at(t - 1))
            if not torch.isfinite(x).all():
                raise NumericalError(
                    f"textualization produced non-finite state at epoch {epoch}, step {t}",
                    step=t, epoch=epoch,
                )
            history.append(StepLoss(epoch, t, beta_val, loss_val))

    embedding = weights.embedding_from_rows(rows.detach().clone())

    from .editor import edit  # deferred: the editor does not depend on this module

    final_recon = edit(prompts[0].before, embedding, weights, config)
    return TextualizationResult(embedding, history, final_recon, config.replace())
