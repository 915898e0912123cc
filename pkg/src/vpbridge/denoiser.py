"""Toy conditional noise-prediction network with recordable attention.

A 3-level convolutional encoder-decoder over [-1, 1] images; one self- and one
cross-attention block sit at each of the two coarsest resolutions (4 attention
sites). Cross-attention keys/values come from the prompt token matrix, with
PAD positions masked out of the keys, so behavior under a y=0 embedding is
independent of padding. Attention is single-head: each site produces exactly
one j x k (cross) or j x j (self) map per step, which can be recorded or
overridden before the value aggregation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._io import pack_block, payload_to_tensors, read_block_file, tensors_to_payload
from .attention import AttentionKind, AttentionOverride, AttentionRecord
from .embedding import PromptEmbedding, TokenRole, role_layout
from .errors import ConfigurationError, DomainError, NumericalError
from .schedule import NoiseSchedule

WEIGHTS_MAGIC = b"TVDB-W1"

SITE_L1 = "att1"  # H/2 resolution
SITE_L2 = "att2"  # H/4 resolution
SITE_IDS = (SITE_L1, SITE_L2)


@dataclass
class LabeledImage:
    """A corpus member: image in [-1, 1] plus its condition label parts."""

    image: torch.Tensor
    label: tuple[str, ...]


def sinusoidal_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos features of t (scaled to ~[0, 1000]); shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    angles = t[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class _AttnContext:
    """Carries the per-pass override ops and collects live attention maps."""

    def __init__(self, t: int, override: AttentionOverride | None, record: bool):
        self.t = t
        self.ops = override.ops if override is not None else {}
        self.record = AttentionRecord() if record else None

    def observe(self, layer: str, kind: AttentionKind, m: torch.Tensor) -> torch.Tensor:
        if m.shape[0] != 1:
            raise ConfigurationError("attention recording/override requires batch size 1")
        live = m[0]
        if self.record is not None:
            self.record.put(self.t, layer, kind, live)
        op = self.ops.get((layer, kind))
        if op is None:
            return m
        return op(live)[None]


class _ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class _SelfAttention(nn.Module):
    def __init__(self, channels: int, site: str):
        super().__init__()
        self.site = site
        self.scale = channels ** -0.5
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Conv2d(channels, channels, 1)
        self.to_v = nn.Conv2d(channels, channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x, ctx: _AttnContext | None):
        b, c, hh, ww = x.shape
        h = self.norm(x)
        q = self.to_q(h).flatten(2).transpose(1, 2)  # (B, j, C)
        k = self.to_k(h).flatten(2).transpose(1, 2)
        v = self.to_v(h).flatten(2).transpose(1, 2)
        m = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)  # (B, j, j)
        if ctx is not None:
            m = ctx.observe(self.site, AttentionKind.SELF, m)
        out = (m @ v).transpose(1, 2).reshape(b, c, hh, ww)
        return x + self.proj(out)


class _CrossAttention(nn.Module):
    def __init__(self, channels: int, token_dim: int, site: str):
        super().__init__()
        self.site = site
        self.scale = channels ** -0.5
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Linear(token_dim, channels)
        self.to_v = nn.Linear(token_dim, channels)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x, tokens, key_pad_mask, ctx: _AttnContext | None):
        b, c, hh, ww = x.shape
        q = self.to_q(self.norm(x)).flatten(2).transpose(1, 2)     # (B, j, C)
        k = self.to_k(tokens)                                      # (B, k, C)
        v = self.to_v(tokens)
        logits = q @ k.transpose(1, 2) * self.scale                # (B, j, k)
        logits = logits.masked_fill(key_pad_mask[:, None, :], float("-inf"))
        m = torch.softmax(logits, dim=-1)
        if ctx is not None:
            m = ctx.observe(self.site, AttentionKind.CROSS, m)
        out = (m @ v).transpose(1, 2).reshape(b, c, hh, ww)
        return x + self.proj(out)


class ToyDenoiser(nn.Module):
    """Epsilon-prediction UNet; resolutions H, H/2, H/4 with attention at the
    two coarsest levels."""

    def __init__(
        self,
        token_dim: int = 64,
        base_channels: int = 16,
        time_dim: int = 64,
        vocab_size: int = 0,
    ):
        super().__init__()
        c1, c2, c3 = base_channels, base_channels * 2, base_channels * 4
        self.token_dim = token_dim
        self.base_channels = base_channels
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
        self.enc1 = _ResBlock(c1, time_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = _ResBlock(c2, time_dim)
        self.self2 = _SelfAttention(c2, SITE_L1)
        self.cross2 = _CrossAttention(c2, token_dim, SITE_L1)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.enc3 = _ResBlock(c3, time_dim)
        self.self3 = _SelfAttention(c3, SITE_L2)
        self.cross3 = _CrossAttention(c3, token_dim, SITE_L2)
        self.mid = _ResBlock(c3, time_dim)
        self.up1 = nn.Conv2d(c3, c2, 3, padding=1)
        self.fuse1 = nn.Conv2d(c2 * 2, c2, 3, padding=1)
        self.dec2 = _ResBlock(c2, time_dim)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.fuse2 = nn.Conv2d(c1 * 2, c1, 3, padding=1)
        self.dec1 = _ResBlock(c1, time_dim)
        self.out_norm = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, 3, 3, padding=1)

        # Token vocabulary: condition parts plus the structural START/END rows.
        # PAD rows are a fixed zero buffer (masked out of attention anyway).
        self.vocab_tokens = nn.Parameter(torch.randn(max(vocab_size, 1), token_dim) * 0.5)
        self.special_tokens = nn.Parameter(torch.randn(2, token_dim) * 0.5)  # START, END
        self.register_buffer("pad_token", torch.zeros(token_dim))

    def forward(self, x, t_frac, tokens, key_pad_mask, ctx: _AttnContext | None = None):
        t_emb = self.time_mlp(sinusoidal_features(t_frac, self.time_dim))
        h1 = self.enc1(self.conv_in(x), t_emb)
        h2 = self.enc2(self.down1(h1), t_emb)
        h2 = self.self2(h2, ctx)
        h2 = self.cross2(h2, tokens, key_pad_mask, ctx)
        h3 = self.enc3(self.down2(h2), t_emb)
        h3 = self.self3(h3, ctx)
        h3 = self.cross3(h3, tokens, key_pad_mask, ctx)
        h3 = self.mid(h3, t_emb)
        u2 = self.up1(F.interpolate(h3, scale_factor=2, mode="nearest"))
        u2 = self.dec2(self.fuse1(torch.cat([u2, h2], dim=1)), t_emb)
        u1 = self.up2(F.interpolate(u2, scale_factor=2, mode="nearest"))
        u1 = self.dec1(self.fuse2(torch.cat([u1, h1], dim=1)), t_emb)
        return self.conv_out(F.silu(self.out_norm(u1)))


@dataclass
class DenoiserOutput:
    noise_prediction: torch.Tensor
    attention: AttentionRecord


@dataclass
class DenoiserWeights:
    """Trained network plus everything needed to rebuild and condition it.

    Immutable during textualization: only prompt embeddings are optimized.
    """

    module: ToyDenoiser
    token_capacity: int
    schedule: NoiseSchedule
    height: int
    width: int
    seed: int
    vocab: tuple[str, ...]
    prototypes: torch.Tensor | None = None          # (L, 3, H, W) canonical corpus images
    prototype_labels: tuple[tuple[str, ...], ...] = ()
    train_losses: tuple[float, ...] = ()
    _fingerprint: str | None = field(default=None, repr=False, compare=False)

    @property
    def token_dim(self) -> int:
        return self.module.token_dim

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    def sites(self) -> list[tuple[str, AttentionKind, int]]:
        """(layer id, kind, feature dimension j) for each attention site."""
        j1 = (self.height // 2) * (self.width // 2)
        j2 = (self.height // 4) * (self.width // 4)
        out = []
        for site, j in ((SITE_L1, j1), (SITE_L2, j2)):
            out.append((site, AttentionKind.SELF, j))
            out.append((site, AttentionKind.CROSS, j))
        return out

    def _vocab_index(self, part: str) -> int:
        try:
            return self.vocab.index(part)
        except ValueError:
            raise ConfigurationError(f"unknown condition part {part!r}")

    def label_tokens(self, label: tuple[str, ...]) -> torch.Tensor:
        rows = [self.module.vocab_tokens[self._vocab_index(p)] for p in label]
        return torch.stack(rows).detach()

    def assemble_tokens(self, learnable: torch.Tensor | None) -> torch.Tensor:
        """[START, learnable..., END, PAD...] row stack at full capacity."""
        m = self.module
        y = 0 if learnable is None else learnable.shape[0]
        if y > self.token_capacity - 2:
            raise ConfigurationError(f"y={y} exceeds capacity k={self.token_capacity}")
        pads = m.pad_token[None, :].expand(self.token_capacity - y - 2, -1)
        pieces = [m.special_tokens[0:1]]
        if learnable is not None:
            pieces.append(learnable.to(m.special_tokens.dtype))
        pieces.append(m.special_tokens[1:2])
        pieces.append(pads)
        return torch.cat(pieces, dim=0)

    def embedding_from_rows(self, learnable: torch.Tensor) -> PromptEmbedding:
        tokens = self.assemble_tokens(learnable)
        roles = role_layout(self.token_capacity, learnable.shape[0])
        return PromptEmbedding(tokens, roles, self.fingerprint())

    def condition_embedding(self, label: tuple[str, ...]) -> PromptEmbedding:
        return self.embedding_from_rows(self.label_tokens(label))

    def to_dtype(self, dtype: torch.dtype) -> "DenoiserWeights":
        """Deep-converted copy (float64 for finite-difference checks)."""
        import copy

        clone = copy.deepcopy(self)
        clone.module = clone.module.to(dtype)
        clone._fingerprint = self._fingerprint or self.fingerprint()
        return clone

    def _serialize(self) -> bytes:
        tensors = [(f"module.{k}", v) for k, v in self.module.state_dict().items()]
        if self.prototypes is not None:
            tensors.append(("prototypes", self.prototypes))
        decls, payload = tensors_to_payload(tensors)
        meta = {
            "d": self.token_dim,
            "k": self.token_capacity,
            "sites": [
                {"id": s, "kind": kind.value, "j": j} for s, kind, j in self.sites()
            ],
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
            "arch": {
                "base_channels": self.module.base_channels,
                "time_dim": self.module.time_dim,
                "token_dim": self.token_dim,
                "vocab_size": self.module.vocab_tokens.shape[0],
            },
            "height": self.height,
            "width": self.width,
            "vocab": list(self.vocab),
            "prototype_labels": [list(l) for l in self.prototype_labels],
            "train_losses": list(self.train_losses),
            "tensors": decls,
        }
        return pack_block(WEIGHTS_MAGIC, meta, payload)

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = hashlib.sha256(self._serialize()).hexdigest()
        return self._fingerprint


def save_weights(path: str | Path, weights: DenoiserWeights) -> None:
    Path(path).write_bytes(weights._serialize())


def load_weights(path: str | Path) -> DenoiserWeights:
    meta, payload = read_block_file(path, WEIGHTS_MAGIC)
    tensors = payload_to_tensors(meta["tensors"], payload)
    arch = meta["arch"]
    module = ToyDenoiser(
        token_dim=arch["token_dim"],
        base_channels=arch["base_channels"],
        time_dim=arch["time_dim"],
        vocab_size=arch["vocab_size"],
    )
    state = {k[len("module."):]: v for k, v in tensors.items() if k.startswith("module.")}
    module.load_state_dict(state)
    module.requires_grad_(False).eval()
    return DenoiserWeights(
        module=module,
        token_capacity=meta["k"],
        schedule=NoiseSchedule.from_dict(meta["schedule"]),
        height=meta["height"],
        width=meta["width"],
        seed=meta["seed"],
        vocab=tuple(meta["vocab"]),
        prototypes=tensors.get("prototypes"),
        prototype_labels=tuple(tuple(l) for l in meta["prototype_labels"]),
        train_losses=tuple(meta["train_losses"]),
    )


def untrained_weights(
    seed: int = 0,
    *,
    height: int = 32,
    width: int = 32,
    token_capacity: int = 8,
    token_dim: int = 64,
    base_channels: int = 16,
    vocab: tuple[str, ...] = ("a", "b"),
    schedule: NoiseSchedule | None = None,
) -> DenoiserWeights:
    """Randomly initialized weights, for structural and gradient checks."""
    torch.manual_seed(seed)
    module = ToyDenoiser(
        token_dim=token_dim, base_channels=base_channels, vocab_size=len(vocab)
    )
    module.requires_grad_(False).eval()
    return DenoiserWeights(
        module=module,
        token_capacity=token_capacity,
        schedule=schedule or NoiseSchedule.linear(200),
        height=height,
        width=width,
        seed=seed,
        vocab=vocab,
    )


def make_null_embedding(weights: DenoiserWeights) -> PromptEmbedding:
    """The y=0 embedding [START, END, PAD...]; identical across calls."""
    tokens = weights.assemble_tokens(None).detach().clone()
    return PromptEmbedding(tokens, role_layout(weights.token_capacity, 0), weights.fingerprint())


def predict_noise(
    weights: DenoiserWeights,
    x,
    t: int,
    c: PromptEmbedding,
    override: AttentionOverride | None = None,
    *,
    num_steps: int | None = None,
    record_attention: bool = True,
) -> DenoiserOutput:
    """One epsilon prediction at step t, differentiable w.r.t. c.tokens.

    `num_steps` sets the timeline the integer t lives on (defaults to the
    weights' training schedule); the network is conditioned on t/num_steps, so
    subsampled bridge timelines line up with training time.
    """
    from .bridge import LatentState  # local import to avoid a cycle

    if isinstance(x, LatentState):
        if x.timestep_index not in (t, t - 1):
            raise ConfigurationError(
                f"latent at index {x.timestep_index} inconsistent with step t={t}"
            )
        x = x.data
    total = num_steps if num_steps is not None else weights.schedule.T
    if not 1 <= t <= total:
        raise DomainError(f"t={t} outside [1, {total}]")
    if c.k != weights.token_capacity:
        raise ConfigurationError(
            f"embedding has k={c.k}, model capacity is {weights.token_capacity}"
        )
    dtype = weights.dtype
    ctx = _AttnContext(t, override, record_attention)
    t_frac = torch.tensor([t / total], dtype=dtype)
    eps = weights.module(
        x.to(dtype)[None],
        t_frac,
        c.tokens.to(dtype)[None],
        c.pad_mask()[None],
        ctx,
    )[0]
    return DenoiserOutput(eps, ctx.record if ctx.record is not None else AttentionRecord())


def combine_guidance(uncond: torch.Tensor, cond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance combiner: uncond + w * (cond - uncond)."""
    if w < 0:
        raise DomainError("guidance scale w must be >= 0")
    return uncond + w * (cond - uncond)


@dataclass
class CfgOutput:
    noise_prediction: torch.Tensor
    cond: DenoiserOutput
    uncond: DenoiserOutput


def cfg_predict(
    weights: DenoiserWeights,
    x,
    t: int,
    c: PromptEmbedding,
    w: float,
    *,
    cond_override: AttentionOverride | None = None,
    null_override: AttentionOverride | None = None,
    num_steps: int | None = None,
    record_attention: bool = True,
) -> CfgOutput:
    """Guided prediction; both sub-passes expose their attention records.

    For a y=0 embedding with matching overrides the two passes coincide and a
    single network evaluation is used.
    """
    if c.y == 0 and cond_override is null_override:
        out = predict_noise(
            weights, x, t, c, cond_override,
            num_steps=num_steps, record_attention=record_attention,
        )
        return CfgOutput(out.noise_prediction, out, out)
    null = make_null_embedding(weights)
    uncond = predict_noise(
        weights, x, t, null, null_override,
        num_steps=num_steps, record_attention=record_attention,
    )
    cond = predict_noise(
        weights, x, t, c, cond_override,
        num_steps=num_steps, record_attention=record_attention,
    )
    return CfgOutput(
        combine_guidance(uncond.noise_prediction, cond.noise_prediction, w), cond, uncond
    )


def denoising_loss(
    weights: DenoiserWeights,
    dataset: list[LabeledImage],
    seed: int = 0,
    *,
    draws_per_image: int = 4,
) -> float:
    """Mean epsilon-prediction MSE over fixed seeded (t, noise) draws."""
    sched = weights.schedule
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    count = 0
    with torch.no_grad():
        for sample in dataset:
            c = weights.condition_embedding(sample.label)
            for _ in range(draws_per_image):
                t = int(torch.randint(1, sched.T + 1, (1,), generator=gen))
                noise = torch.randn(sample.image.shape, generator=gen)
                ab = sched.at(t)
                x_t = math.sqrt(ab) * sample.image + math.sqrt(1.0 - ab) * noise
                eps = predict_noise(weights, x_t, t, c, record_attention=False)
                total += F.mse_loss(eps.noise_prediction, noise).item()
                count += 1
    return total / count


def train_denoiser(
    dataset: list[LabeledImage],
    schedule: NoiseSchedule,
    epochs: int,
    seed: int,
    *,
    token_capacity: int = 8,
    token_dim: int = 64,
    base_channels: int = 16,
    time_dim: int = 64,
    batch_size: int = 32,
    lr: float = 2e-3,
    p_uncond: float = 0.1,
    store_corpus: bool = True,
) -> DenoiserWeights:
    """Fit the toy prior: predict injected noise at uniform timesteps.

    Deterministic given the seed. Condition labels are dropped to the null
    embedding with probability p_uncond so the unconditional branch trains too.
    """
    if not dataset:
        raise ConfigurationError("training dataset is empty")
    h, w = dataset[0].image.shape[-2:]
    for s in dataset:
        if s.image.shape != (3, h, w):
            raise ConfigurationError("all corpus images must share one shape")

    vocab = tuple(sorted({part for s in dataset for part in s.label}))
    torch.manual_seed(seed)
    module = ToyDenoiser(
        token_dim=token_dim,
        base_channels=base_channels,
        time_dim=time_dim,
        vocab_size=len(vocab),
    )
    weights = DenoiserWeights(
        module=module,
        token_capacity=token_capacity,
        schedule=schedule,
        height=h,
        width=w,
        seed=seed,
        vocab=vocab,
    )

    images = torch.stack([s.image for s in dataset])
    token_stack = []
    mask_stack = []
    null_roles = role_layout(token_capacity, 0)
    for s in dataset:
        emb = weights.condition_embedding(s.label)
        token_stack.append(emb.tokens)
        mask_stack.append(emb.pad_mask())
    null_tokens = weights.assemble_tokens(None)
    null_mask = torch.tensor([r is TokenRole.PAD for r in null_roles])

    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, epochs), eta_min=lr * 0.05
    )
    n = len(dataset)

    # fixed stratified probe: the recorded loss curve is a deterministic
    # function of the weights, not of the minibatch draw
    probe_gen = torch.Generator().manual_seed(seed + 2)
    probe_t = (
        (torch.randperm(n, generator=probe_gen).double() + torch.rand(n, generator=probe_gen))
        / n * schedule.T
    ).floor().long().clamp(0, schedule.T - 1) + 1
    probe_noise = torch.randn(images.shape, generator=probe_gen)
    probe_ab = schedule.alpha_bar[probe_t].to(torch.float32)[:, None, None, None]
    probe_xt = probe_ab.sqrt() * images + (1.0 - probe_ab).sqrt() * probe_noise
    probe_tokens = torch.stack(token_stack).detach()
    probe_masks = torch.stack(mask_stack)

    def probe_loss() -> float:
        with torch.no_grad():
            eps_hat = module(
                probe_xt, probe_t.to(torch.float32) / schedule.T, probe_tokens, probe_masks
            )
            return F.mse_loss(eps_hat, probe_noise).item()

    losses = []
    for _epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            x0 = images[idx]
            b = x0.shape[0]
            # stratified timesteps: each batch covers the schedule evenly,
            # which keeps the per-epoch loss curve smooth
            strata = torch.randperm(b, generator=gen).double() + torch.rand(b, generator=gen)
            t = (strata / b * schedule.T).floor().long().clamp(0, schedule.T - 1) + 1
            noise = torch.randn(x0.shape, generator=gen)
            ab = schedule.alpha_bar[t].to(torch.float32)[:, None, None, None]
            x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise

            drop = torch.rand(b, generator=gen) < p_uncond
            tokens = torch.stack(
                [null_tokens if drop[i] else token_stack[idx[i]] for i in range(b)]
            ).detach()
            masks = torch.stack(
                [null_mask if drop[i] else mask_stack[idx[i]] for i in range(b)]
            )

            eps_hat = module(x_t, t.to(torch.float32) / schedule.T, tokens, masks)
            loss = F.mse_loss(eps_hat, noise)
            if not torch.isfinite(loss):
                raise NumericalError("denoiser training diverged", epoch=_epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched_lr.step()
        losses.append(probe_loss())

    module.requires_grad_(False).eval()
    weights.train_losses = tuple(losses)
    if store_corpus:
        weights.prototypes = images.clone()
        weights.prototype_labels = tuple(s.label for s in dataset)
    return weights
