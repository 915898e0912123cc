"""Fidelity and editing-direction metrics with pluggable feature providers.

PSNR/SSIM run on raw pixels (peak-to-peak range 2 for [-1, 1] images). The
direction metric is the cosine between feature-space difference vectors of the
train pair and a test pair; the image metric is the cosine between original
and edited features. Feature extraction is pluggable so an external embedding
service can stand in for the in-process providers.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import shlex
import subprocess
import threading
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import BridgeConfig
from .denoiser import DenoiserWeights
from .editor import edit
from .embedding import PromptEmbedding
from .errors import ConfigurationError, DomainError
from .images import encode_png
from .toydata import PromptSet

PSNR_CAP_DB = 99.0
_DEGENERATE_NORM = 1e-12


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10 log10(peak^2 / MSE) with peak 2; capped at 99 dB (zero MSE)."""
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a.to(torch.float64) - b.to(torch.float64)).numpy()
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(4.0 / mse))


def _window_means(x: np.ndarray, size: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(x, (size, size))
    return view.mean(axis=(-2, -1))


def ssim(a: torch.Tensor, b: torch.Tensor, *, window: int = 8) -> float:
    """Windowed SSIM, uniform 8x8 windows, channel-averaged, range 2."""
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < window:
        raise DomainError(f"images must be at least {window} pixels on a side")
    c1 = (0.01 * 2.0) ** 2
    c2 = (0.03 * 2.0) ** 2
    xa = a.to(torch.float64).numpy()
    xb = b.to(torch.float64).numpy()
    scores = []
    for ch in range(xa.shape[0]):
        mu_a = _window_means(xa[ch], window)
        mu_b = _window_means(xb[ch], window)
        mu_aa = _window_means(xa[ch] * xa[ch], window)
        mu_bb = _window_means(xb[ch] * xb[ch], window)
        mu_ab = _window_means(xa[ch] * xb[ch], window)
        var_a = mu_aa - mu_a ** 2
        var_b = mu_bb - mu_b ** 2
        cov = mu_ab - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        )
        scores.append(float(s.mean()))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Feature providers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureProvider:
    name: str
    dimension: int
    extract: Callable[[torch.Tensor], np.ndarray]

    def __call__(self, image: torch.Tensor) -> np.ndarray:
        vec = np.asarray(self.extract(image), dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.dimension:
            raise ConfigurationError(
                f"provider {self.name!r} returned {vec.shape[0]} dims, expected {self.dimension}"
            )
        if not np.all(np.isfinite(vec)):
            raise ConfigurationError(f"provider {self.name!r} returned non-finite features")
        return vec


def pixel_provider(image_shape: tuple[int, int, int] = (3, 32, 32)) -> FeatureProvider:
    dim = int(np.prod(image_shape))
    return FeatureProvider(
        "pixel", dim, lambda img: img.detach().to(torch.float64).numpy().reshape(-1)
    )


def random_projection_provider(
    dimension: int = 128,
    seed: int = 0,
    image_shape: tuple[int, int, int] = (3, 32, 32),
) -> FeatureProvider:
    n = int(np.prod(image_shape))
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((dimension, n)) / np.sqrt(n)
    return FeatureProvider(
        f"randproj{dimension}",
        dimension,
        lambda img: matrix @ img.detach().to(torch.float64).numpy().reshape(-1),
    )


def _png_b64(image: torch.Tensor) -> str:
    return base64.b64encode(encode_png(image)).decode("ascii")


def http_provider(url: str, dimension: int, *, timeout: float = 10.0) -> FeatureProvider:
    """POST {"image": <base64 png>} to `url`, expect {"vector": [...]}.
    Requests are serialized per provider instance."""
    lock = threading.Lock()

    def extract(image: torch.Tensor) -> np.ndarray:
        body = json.dumps({"image": _png_b64(image)}).encode("utf-8")
        req = urllib.request.Request(
            url, data=body, headers={"Content-Type": "application/json"}
        )
        with lock:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        return np.asarray(payload["vector"], dtype=np.float64)

    return FeatureProvider(f"extern:{url}", dimension, extract)


class _LineProcess:
    """One request line (base64 PNG) in, one JSON float-array line out."""

    def __init__(self, argv: list[str]):
        self.argv = argv
        self.lock = threading.Lock()
        self.proc: subprocess.Popen | None = None

    def query(self, line: str) -> str:
        with self.lock:
            if self.proc is None or self.proc.poll() is not None:
                self.proc = subprocess.Popen(
                    self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True
                )
            self.proc.stdin.write(line + "\n")
            self.proc.stdin.flush()
            out = self.proc.stdout.readline()
        if not out:
            raise ConfigurationError(f"feature subprocess {self.argv} closed its output")
        return out


def subprocess_provider(command: str, dimension: int) -> FeatureProvider:
    proc = _LineProcess(shlex.split(command))

    def extract(image: torch.Tensor) -> np.ndarray:
        return np.asarray(json.loads(proc.query(_png_b64(image))), dtype=np.float64)

    return FeatureProvider(f"extern-cmd:{command}", dimension, extract)


def parse_provider(spec: str, image_shape=(3, 32, 32), *, extern_dim: int = 8) -> FeatureProvider:
    """CLI provider syntax: 'pixel', 'randproj:<dim>:<seed>', 'extern:<url>',
    'extern-cmd:<command line>'."""
    if spec == "pixel":
        return pixel_provider(image_shape)
    if spec.startswith("randproj"):
        parts = spec.split(":")
        dim = int(parts[1]) if len(parts) > 1 else 128
        seed = int(parts[2]) if len(parts) > 2 else 0
        return random_projection_provider(dim, seed, image_shape)
    if spec.startswith("extern-cmd:"):
        return subprocess_provider(spec[len("extern-cmd:"):], extern_dim)
    if spec.startswith("extern:"):
        return http_provider(spec[len("extern:"):], extern_dim)
    raise ConfigurationError(f"unknown provider spec {spec!r}")


# ---------------------------------------------------------------------------
# Similarities
# ---------------------------------------------------------------------------


def _cosine(u: np.ndarray, v: np.ndarray) -> tuple[float, bool]:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < _DEGENERATE_NORM or nv < _DEGENERATE_NORM:
        return 0.0, True
    return float(np.dot(u, v) / (nu * nv)), False


def direction_similarity(
    before_train: torch.Tensor,
    after_train: torch.Tensor,
    before_test: torch.Tensor,
    after_test: torch.Tensor,
    provider: FeatureProvider,
    *,
    with_flag: bool = False,
):
    """Cosine of the feature-space edit directions of the two pairs.
    Degenerate (near-zero) difference vectors yield a flagged 0."""
    train_dir = provider(after_train) - provider(before_train)
    test_dir = provider(after_test) - provider(before_test)
    value, flag = _cosine(train_dir, test_dir)
    return (value, flag) if with_flag else value


def image_similarity(
    original: torch.Tensor,
    edited: torch.Tensor,
    provider: FeatureProvider,
    *,
    with_flag: bool = False,
):
    value, flag = _cosine(provider(original), provider(edited))
    return (value, flag) if with_flag else value


# ---------------------------------------------------------------------------
# Batch evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    id: str
    psnr: float | None = None
    ssim: float | None = None
    dir_sim: dict[str, float] = field(default_factory=dict)
    img_sim: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    error: str | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow]
    provider_names: list[str]
    aggregates: dict[str, float]
    config: dict
    failures: int = 0

    def primary_provider(self) -> str | None:
        return self.provider_names[0] if self.provider_names else None


def _aggregate(rows: list[EvalRow], providers: list[str]) -> dict[str, float]:
    ok = [r for r in rows if r.error is None]
    agg: dict[str, float] = {}
    if ok:
        agg["psnr"] = float(np.mean([r.psnr for r in ok]))
        agg["ssim"] = float(np.mean([r.ssim for r in ok]))
        for name in providers:
            agg[f"dir_sim/{name}"] = float(np.mean([r.dir_sim[name] for r in ok]))
            agg[f"img_sim/{name}"] = float(np.mean([r.img_sim[name] for r in ok]))
    return agg


def evaluate(
    test_set: PromptSet,
    embedding: PromptEmbedding,
    weights: DenoiserWeights,
    config: BridgeConfig,
    providers: list[FeatureProvider] = (),
    *,
    intensity: float = 1.0,
) -> EvalReport:
    """Edit every test image and score it against its ground-truth target.

    Per-row failures are recorded without aborting; aggregates are means over
    the successful rows. The direction metric compares against the first
    training pair.
    """
    if not test_set.tests:
        raise ConfigurationError("test set is empty")
    providers = list(providers)
    train = test_set.prompts[0]
    rows = []
    failures = 0
    for case in test_set.tests:
        row = EvalRow(id=case.id)
        try:
            edited = edit(case.image, embedding, weights, config, intensity)
            row.psnr = psnr(edited, case.target)
            row.ssim = ssim(edited, case.target)
            for provider in providers:
                d, dflag = direction_similarity(
                    train.before, train.after, case.image, edited, provider, with_flag=True
                )
                s, sflag = image_similarity(case.image, edited, provider, with_flag=True)
                row.dir_sim[provider.name] = d
                row.img_sim[provider.name] = s
                if dflag:
                    row.flags.append(f"degenerate-direction/{provider.name}")
                if sflag:
                    row.flags.append(f"degenerate-image/{provider.name}")
        except Exception as exc:  # noqa: BLE001 - per-row failures are data
            row.error = f"{type(exc).__name__}: {exc}"
            failures += 1
        rows.append(row)
    names = [p.name for p in providers]
    return EvalReport(rows, names, _aggregate(rows, names), config.to_dict(), failures)


def write_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    """report.csv (fixed header) plus report.json with the aggregate block."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    primary = report.primary_provider()
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "psnr", "ssim", "dir_sim", "img_sim"])
        for row in report.rows:
            if row.error is not None:
                writer.writerow([row.id, "", "", "", ""])
                continue
            writer.writerow([
                row.id,
                f"{row.psnr:.6f}",
                f"{row.ssim:.6f}",
                f"{row.dir_sim[primary]:.6f}" if primary else "",
                f"{row.img_sim[primary]:.6f}" if primary else "",
            ])
    json_path = out / "report.json"
    json_path.write_text(json.dumps({
        "aggregates": report.aggregates,
        "providers": report.provider_names,
        "rows": len(report.rows),
        "failures": report.failures,
        "config": report.config,
    }, indent=2, sort_keys=True))
    return csv_path, json_path
