"""Self-contained verification suites backing `vpbridge check`.

Every suite pits an implementation against an independent oracle: central
finite differences for gradients, an explicit scalar loop for the attention
merge, the closed-form Gaussian flow for solver order, and a bitwise replay
for bridge determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .attention import build_column_transform, build_mask, merge_cross
from .bridge import GaussianToyModel, gaussian_convergence_study, generate, invert
from .config import BridgeConfig
from .denoiser import (
    DenoiserWeights,
    make_null_embedding,
    predict_noise,
    untrained_weights,
)
from .evalkit import psnr
from .textualize import init_embedding, step_loss

GRAD_TOLERANCE = 1e-4
MERGE_TOLERANCE = 1e-12
ORDER_RATIO_FLOOR = 1.8


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: str
    metrics: dict = field(default_factory=dict)


def finite_difference_gradient(fn, x: torch.Tensor, coords, h: float = 1e-6) -> dict:
    """Central differences of a scalar fn at selected flat coordinates."""
    grads = {}
    flat = x.detach().clone().reshape(-1)
    for idx in coords:
        step = h * max(1.0, abs(flat[idx].item()))
        for sign in (1.0, -1.0):
            probe = flat.clone()
            probe[idx] += sign * step
            val = fn(probe.reshape(x.shape))
            if sign > 0:
                plus = val
            else:
                minus = val
        grads[idx] = (plus - minus) / (2.0 * step)
    return grads


def _relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric), 1e-6)
    return abs(analytic - numeric) / scale


def _grad_check(fn, x: torch.Tensor, n_coords: int, gen: torch.Generator) -> float:
    """Max relative error between autograd and finite differences."""
    leaf = x.detach().clone().requires_grad_(True)
    fn(leaf).backward()
    grad = leaf.grad.reshape(-1)
    n = grad.numel()
    count = min(n_coords, n)
    coords = torch.randperm(n, generator=gen)[:count].tolist()
    numeric = finite_difference_gradient(lambda v: fn(v).item(), x, coords)
    return max(_relative_error(grad[i].item(), numeric[i]) for i in coords)


def gradient_suite(seed: int = 0, n_coords: int = 20) -> list[CheckResult]:
    """Finite-difference checks at float64 through the three differentiable
    surfaces: the step loss, the attention merge, and the denoiser itself
    (plain and with an active merge in the path)."""
    gen = torch.Generator().manual_seed(seed)
    results = []

    target = torch.randn(3, 8, 8, generator=gen, dtype=torch.float64)
    f0 = torch.randn(3, 8, 8, generator=gen, dtype=torch.float64)
    err = _grad_check(lambda f: step_loss(f, target, t=7, T=10, temperature=1.0), f0,
                      n_coords, gen)
    results.append(CheckResult(
        "gradients/step_loss", err < GRAD_TOLERANCE,
        f"max relative error {err:.3e}", {"max_rel_err": err},
    ))

    k, y, j = 8, 3, 12
    mb = torch.softmax(torch.randn(j, k, generator=gen, dtype=torch.float64), dim=-1)
    ma0 = torch.softmax(torch.randn(j, k, generator=gen, dtype=torch.float64), dim=-1)
    lam = build_column_transform(k, y)
    mask = build_mask(k, y)
    probe = torch.randn(j, k, generator=gen, dtype=torch.float64)

    def merge_scalar(ma):
        return (merge_cross(mb, ma, lam, mask) * probe).sum()

    err = _grad_check(merge_scalar, ma0, n_coords, gen)
    results.append(CheckResult(
        "gradients/merge_cross", err < GRAD_TOLERANCE,
        f"max relative error {err:.3e}", {"max_rel_err": err},
    ))

    weights = untrained_weights(seed=seed, height=16, width=16).to_dtype(torch.float64)
    x = torch.randn(3, 16, 16, generator=gen, dtype=torch.float64) * 0.5
    base = init_embedding(weights, y=3, seed=seed, sigma=0.5)
    rows0 = base.learnable_rows().to(torch.float64)

    def predict_scalar(rows):
        c = weights.embedding_from_rows(rows)
        out = predict_noise(weights, x, 5, c, num_steps=10, record_attention=False)
        return (out.noise_prediction ** 2).sum()

    err = _grad_check(predict_scalar, rows0, n_coords, gen)
    results.append(CheckResult(
        "gradients/predict_noise", err < GRAD_TOLERANCE,
        f"max relative error {err:.3e}", {"max_rel_err": err},
    ))

    # same surface with an active merge override between softmax and values
    from .attention import AttentionKind, InjectionPlan, build_step_override

    null = make_null_embedding(weights)
    rec_out = predict_noise(weights, x, 5, null, num_steps=10)
    plan = InjectionPlan(
        source=rec_out.attention, tau=1.0,
        sites=frozenset((s, kind) for s, kind, _ in weights.sites()),
    )
    override = build_step_override(plan, 5, 10, weights.token_capacity, 3)

    def predict_scalar_injected(rows):
        c = weights.embedding_from_rows(rows)
        out = predict_noise(weights, x, 5, c, override, num_steps=10, record_attention=False)
        return (out.noise_prediction ** 2).sum()

    err = _grad_check(predict_scalar_injected, rows0, n_coords, gen)
    results.append(CheckResult(
        "gradients/predict_noise+merge", err < GRAD_TOLERANCE,
        f"max relative error {err:.3e}", {"max_rel_err": err},
    ))
    return results


def attention_merge_suite(seed: int = 0) -> list[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    k, y, j = 6, 2, 3
    mb = torch.softmax(torch.randn(j, k, generator=gen, dtype=torch.float64), dim=-1)
    ma = torch.softmax(torch.randn(j, k, generator=gen, dtype=torch.float64), dim=-1)
    lam = build_column_transform(k, y)
    mask = build_mask(k, y)

    loop = torch.zeros(j, k, dtype=torch.float64)
    for r in range(j):
        for col in range(k):
            acc = 0.0
            for m in range(k):
                acc += mb[r, m].item() * lam[m, col].item()
            loop[r, col] = acc * mask[col].item() + ma[r, col].item() * (1.0 - mask[col].item())
    vec = merge_cross(mb, ma, lam, mask, renormalize=False)
    gap = (vec - loop).abs().max().item()

    results = [CheckResult(
        "attention/loop-oracle", gap <= MERGE_TOLERANCE,
        f"max |vectorized - loop| = {gap:.3e}", {"max_abs_gap": gap},
    )]

    involution_ok = all(
        torch.equal(build_column_transform(kk, yy) @ build_column_transform(kk, yy),
                    torch.eye(kk, dtype=torch.float64))
        for kk in (4, 6, 8) for yy in range(kk - 1)
    )
    results.append(CheckResult(
        "attention/involution", involution_ok, "Lambda @ Lambda == identity for all (k, y)"
    ))

    slot = (vec[:, y + 1] - mb[:, 1]).abs().max().item()
    results.append(CheckResult(
        "attention/end-slot", slot == 0.0,
        f"merged column y+1 vs before column 1: max gap {slot:.3e}",
    ))

    mask_ok = all(
        build_mask(kk, yy).tolist()
        == [0.0 if 1 <= i <= yy else 1.0 for i in range(kk)]
        for kk in (4, 6, 8) for yy in range(kk - 1)
    )
    results.append(CheckResult(
        "attention/mask-zeros", mask_ok, "F zero positions are exactly 1..y"
    ))
    return results


def gaussian_order_suite(seed: int = 0) -> list[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    dim = 16
    model = GaussianToyModel(
        mean=torch.randn(dim, generator=gen, dtype=torch.float64) * 0.5,
        variance=0.5 + torch.rand(dim, generator=gen, dtype=torch.float64),
    )
    x0 = model.mean + model.variance.sqrt() * torch.randn(dim, generator=gen, dtype=torch.float64)
    errors = gaussian_convergence_study(model, x0, (10, 20, 40, 80))
    ratios = [errors[i] / errors[i + 1] for i in range(len(errors) - 1)]
    passed = all(r >= ORDER_RATIO_FLOOR for r in ratios)
    return [CheckResult(
        "gaussian/solver-order", passed,
        "errors " + ", ".join(f"{e:.3e}" for e in errors)
        + " | ratios " + ", ".join(f"{r:.2f}" for r in ratios),
        {"errors": errors, "ratios": ratios},
    )]


def roundtrip_suite(
    weights: DenoiserWeights,
    images: list[torch.Tensor],
    config: BridgeConfig | None = None,
    *,
    psnr_floor: float = 30.0,
) -> list[CheckResult]:
    config = config or BridgeConfig()
    null = make_null_embedding(weights)
    values = []
    bitwise = True
    for img in images:
        xT = invert(img, weights, null, config).final
        out = generate(xT, weights, null, config).final.data.clamp(-1, 1)
        xT2 = invert(img, weights, null, config).final
        out2 = generate(xT2, weights, null, config).final.data.clamp(-1, 1)
        bitwise = bitwise and torch.equal(xT.data, xT2.data) and torch.equal(out, out2)
        values.append(psnr(out, img))
    worst = min(values)
    mean = sum(values) / len(values)
    return [
        CheckResult(
            "roundtrip/psnr", worst >= psnr_floor,
            f"mean {mean:.2f} dB, worst {worst:.2f} dB over {len(values)} images "
            f"(floor {psnr_floor} dB)",
            {"mean_db": mean, "worst_db": worst},
        ),
        CheckResult("roundtrip/bitwise", bitwise, "two runs produced identical bytes"),
    ]
