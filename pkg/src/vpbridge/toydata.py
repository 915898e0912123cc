"""Procedural 32x32 corpus: shapes on flat backgrounds, with ground-truth
photometric transformations so generalization can be scored exactly.

Rendering is pure pixel-center membership (no anti-aliasing), so a spec always
rasterizes to the same bytes. Condition labels are compositional -
(shape, fill, bg) - which is what the prior's cross-attention trains on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import LabeledImage
from .errors import DomainError
from .images import encode_png, load_image, save_image
from .textualize import VisualPrompt

CANVAS = 32
SHAPE_KINDS = ("circle", "square", "triangle", "composite")

# color triples live on the image value scale [-1, 1]
FILL_COLORS: dict[str, tuple[float, float, float]] = {
    "white": (1.0, 1.0, 1.0),
    "red": (0.7, -0.7, -0.7),
    "green": (-0.6, 0.6, -0.5),
    "blue": (-0.6, -0.2, 0.8),
    "yellow": (0.8, 0.7, -0.6),
}
BG_COLORS: dict[str, tuple[float, float, float]] = {
    "black": (-1.0, -1.0, -1.0),
    "gray": (0.0, 0.0, 0.0),
    "navy": (-0.8, -0.75, -0.4),
    "cream": (0.85, 0.8, 0.6),
}
SCALE_OPTIONS: dict[str, tuple[float, ...]] = {
    "circle": (7.0, 9.0),
    "square": (6.0, 8.0),
    "triangle": (8.0, 10.0),
    "composite": (9.0, 11.0),
}
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    fill: tuple[float, float, float]
    bg: tuple[float, float, float]
    cx: float = 15.5
    cy: float = 15.5
    scale: float = 9.0
    seed: int = 0  # provenance of the sampling that produced this spec

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "fill": list(self.fill), "bg": list(self.bg),
            "cx": self.cx, "cy": self.cy, "scale": self.scale, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(d["kind"], tuple(d["fill"]), tuple(d["bg"]),
                   d["cx"], d["cy"], d["scale"], d["seed"])


def _shape_mask(kind: str, cx: float, cy: float, scale: float) -> np.ndarray:
    ys, xs = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64)
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= scale ** 2
    if kind == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= scale
    if kind == "triangle":
        # apex up; inside = all edge cross-products share a sign (winding-free)
        ax, ay = cx, cy - scale
        bx, by = cx - scale, cy + scale * 0.8
        dx, dy = cx + scale, cy + scale * 0.8
        def side(px, py, qx, qy, rx, ry):
            return (qx - px) * (ry - py) - (qy - py) * (rx - px)
        s1 = side(ax, ay, bx, by, xs, ys)
        s2 = side(bx, by, dx, dy, xs, ys)
        s3 = side(dx, dy, ax, ay, xs, ys)
        return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))
    if kind == "composite":
        r = scale * 0.5
        left = (xs - (cx - scale * 0.55)) ** 2 + (ys - cy) ** 2 <= r ** 2
        h = scale * 0.42
        right = np.maximum(np.abs(xs - (cx + scale * 0.55)), np.abs(ys - cy)) <= h
        return left | right
    raise DomainError(f"unknown shape kind {kind!r}")


def render(spec: SceneSpec) -> torch.Tensor:
    """Deterministic raster of the scene, (3, 32, 32) float32 in [-1, 1]."""
    if spec.kind not in SHAPE_KINDS:
        raise DomainError(f"unknown shape kind {spec.kind!r}")
    margin = spec.scale * (1.1 if spec.kind == "composite" else 1.0)
    if spec.cx - margin < -0.5 or spec.cx + margin > CANVAS - 0.5 \
            or spec.cy - margin < -0.5 or spec.cy + margin > CANVAS - 0.5:
        raise DomainError("shape extends outside the canvas")
    img = np.empty((3, CANVAS, CANVAS), dtype=np.float64)
    img[:] = np.asarray(spec.bg, dtype=np.float64)[:, None, None]
    mask = _shape_mask(spec.kind, spec.cx, spec.cy, spec.scale)
    for ch in range(3):
        img[ch][mask] = spec.fill[ch]
    return torch.from_numpy(img).to(torch.float32)


@dataclass(frozen=True)
class TransformSpec:
    """Ground-truth editing effect: a pure deterministic image map."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        p = self.params
        if self.kind == "tone":
            if p.get("gamma", 0) <= 0:
                raise DomainError("tone transform needs gamma > 0")
        elif self.kind == "color-shift":
            delta = p.get("delta")
            if delta is None or len(delta) != 3 or not all(np.isfinite(delta)):
                raise DomainError("color-shift needs a finite 3-channel delta")
        elif self.kind == "desaturate":
            if not 0.0 <= p.get("factor", -1) <= 1.0:
                raise DomainError("desaturate factor must lie in [0, 1]")
        elif self.kind == "blur":
            kernel = np.asarray(p.get("kernel", []), dtype=np.float64)
            if kernel.shape != (3, 3):
                raise DomainError("blur kernel must be 3x3")
            if int(p.get("iterations", -1)) < 0:
                raise DomainError("blur iterations must be >= 0")
        elif self.kind == "invert-luma":
            pass
        else:
            raise DomainError(f"unknown transform kind {self.kind!r}")

    def to_dict(self) -> dict:
        params = dict(self.params)
        if "delta" in params:
            params["delta"] = list(params["delta"])
        if "kernel" in params:
            params["kernel"] = np.asarray(params["kernel"]).tolist()
        return {"kind": self.kind, "params": params}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        params = dict(d["params"])
        if "delta" in params:
            params["delta"] = tuple(params["delta"])
        return cls(d["kind"], params)


def apply_transform(image: torch.Tensor, t: TransformSpec) -> torch.Tensor:
    arr = image.detach().cpu().numpy().astype(np.float64)
    if t.kind == "tone":
        u = np.clip((arr + 1.0) / 2.0, 0.0, 1.0)
        arr = u ** t.params["gamma"] * 2.0 - 1.0
    elif t.kind == "color-shift":
        arr = arr + np.asarray(t.params["delta"], dtype=np.float64)[:, None, None]
    elif t.kind == "desaturate":
        luma = np.tensordot(_LUMA, arr, axes=(0, 0))
        arr = luma[None] + t.params["factor"] * (arr - luma[None])
    elif t.kind == "blur":
        kernel = np.asarray(t.params["kernel"], dtype=np.float64)
        for _ in range(int(t.params["iterations"])):
            padded = np.pad(arr, ((0, 0), (1, 1), (1, 1)), mode="edge")
            out = np.zeros_like(arr)
            for dy in range(3):
                for dx in range(3):
                    out += kernel[dy, dx] * padded[:, dy : dy + CANVAS, dx : dx + CANVAS]
            arr = out
    elif t.kind == "invert-luma":
        arr = -arr
    else:
        raise DomainError(f"unknown transform kind {t.kind!r}")
    return torch.from_numpy(np.clip(arr, -1.0, 1.0)).to(torch.float32)


# ---------------------------------------------------------------------------
# Corpus for training the toy prior
# ---------------------------------------------------------------------------


def _canonical_scale(kind: str) -> float:
    return SCALE_OPTIONS[kind][-1]


def build_training_corpus() -> list[LabeledImage]:
    """One canonical scene per (shape, fill, bg) label combination."""
    corpus = []
    for kind in SHAPE_KINDS:
        for fill_name, fill in FILL_COLORS.items():
            for bg_name, bg in BG_COLORS.items():
                spec = SceneSpec(kind, fill, bg, scale=_canonical_scale(kind))
                label = (f"shape:{kind}", f"fill:{fill_name}", f"bg:{bg_name}")
                corpus.append(LabeledImage(render(spec), label))
    return corpus


# ---------------------------------------------------------------------------
# Prompt/test sets with ground truth
# ---------------------------------------------------------------------------


@dataclass
class TestCase:
    id: str
    image: torch.Tensor
    target: torch.Tensor
    spec: SceneSpec


@dataclass
class PromptSet:
    prompts: list[VisualPrompt]
    tests: list[TestCase]
    transform: TransformSpec
    seed: int
    train_specs: list[SceneSpec]
    manifest: dict


def _spec_pool(seed: int) -> list[SceneSpec]:
    pool = []
    for kind in SHAPE_KINDS:
        for fill_name, fill in FILL_COLORS.items():
            for bg_name, bg in BG_COLORS.items():
                for scale in SCALE_OPTIONS[kind]:
                    pool.append(SceneSpec(kind, fill, bg, scale=scale, seed=seed))
    return pool


def make_prompt_set(
    n_train_pairs: int,
    n_test_images: int,
    transform: TransformSpec,
    seed: int,
    *,
    out_dir: str | Path | None = None,
) -> PromptSet:
    """Disjoint train pairs and test cases; test specs cycle through shape
    kinds so held-out categories are always represented. Writes the dataset
    directory (PNGs + manifest.json) when out_dir is given."""
    if n_train_pairs < 1 or n_test_images < 0:
        raise DomainError("need n_train_pairs >= 1 and n_test_images >= 0")
    rng = np.random.default_rng(seed)
    pool = _spec_pool(seed)
    order = rng.permutation(len(pool))
    train_specs = [pool[i] for i in order[:n_train_pairs]]
    rest = [pool[i] for i in order[n_train_pairs:]]

    by_kind: dict[str, list[SceneSpec]] = {k: [] for k in SHAPE_KINDS}
    for spec in rest:
        by_kind[spec.kind].append(spec)
    test_specs: list[SceneSpec] = []
    cursor = 0
    while len(test_specs) < n_test_images:
        kind = SHAPE_KINDS[cursor % len(SHAPE_KINDS)]
        if by_kind[kind]:
            test_specs.append(by_kind[kind].pop(0))
        cursor += 1
        if all(not v for v in by_kind.values()):
            raise DomainError("spec pool exhausted; reduce n_test_images")

    prompts = []
    for i, spec in enumerate(train_specs):
        before = render(spec)
        prompts.append(VisualPrompt(before, apply_transform(before, transform), f"train_{i:04d}"))
    tests = []
    for i, spec in enumerate(test_specs):
        image = render(spec)
        tests.append(TestCase(f"test_{i:04d}", image, apply_transform(image, transform), spec))

    manifest = {
        "seed": seed,
        "transform": transform.to_dict(),
        "canvas": CANVAS,
        "train": [
            {
                "id": p.id,
                "spec": s.to_dict(),
                "before": f"before_{i:04d}.png",
                "after": f"after_{i:04d}.png",
                "sha256_before": hashlib.sha256(encode_png(p.before)).hexdigest(),
                "sha256_after": hashlib.sha256(encode_png(p.after)).hexdigest(),
            }
            for i, (p, s) in enumerate(zip(prompts, train_specs))
        ],
        "test": [
            {
                "id": c.id,
                "spec": c.spec.to_dict(),
                "image": f"test_{i:04d}.png",
                "target": f"gt_{i:04d}.png",
                "sha256_image": hashlib.sha256(encode_png(c.image)).hexdigest(),
                "sha256_target": hashlib.sha256(encode_png(c.target)).hexdigest(),
            }
            for i, c in enumerate(tests)
        ],
    }
    prompt_set = PromptSet(prompts, tests, transform, seed, train_specs, manifest)
    if out_dir is not None:
        write_prompt_set(prompt_set, out_dir)
    return prompt_set


def write_prompt_set(prompt_set: PromptSet, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(prompt_set.prompts):
        save_image(out / f"before_{i:04d}.png", p.before)
        save_image(out / f"after_{i:04d}.png", p.after)
    for i, c in enumerate(prompt_set.tests):
        save_image(out / f"test_{i:04d}.png", c.image)
        save_image(out / f"gt_{i:04d}.png", c.target)
    (out / "manifest.json").write_text(json.dumps(prompt_set.manifest, indent=2, sort_keys=True))


def load_prompt_set(path: str | Path) -> PromptSet:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    transform = TransformSpec.from_dict(manifest["transform"])
    prompts = []
    train_specs = []
    for entry in manifest["train"]:
        prompts.append(VisualPrompt(
            load_image(root / entry["before"]), load_image(root / entry["after"]), entry["id"]
        ))
        train_specs.append(SceneSpec.from_dict(entry["spec"]))
    tests = []
    for i, entry in enumerate(manifest["test"]):
        tests.append(TestCase(
            entry["id"],
            load_image(root / entry["image"]),
            load_image(root / entry["target"]),
            SceneSpec.from_dict(entry["spec"]),
        ))
    return PromptSet(prompts, tests, transform, manifest["seed"], train_specs, manifest)


# ---------------------------------------------------------------------------
# Shape classifier (template correlation over luminance)
# ---------------------------------------------------------------------------


def _templates() -> list[tuple[str, np.ndarray]]:
    bank = []
    for kind in SHAPE_KINDS:
        for scale in SCALE_OPTIONS[kind]:
            mask = _shape_mask(kind, 15.5, 15.5, scale).astype(np.float64)
            mask -= mask.mean()
            norm = np.linalg.norm(mask)
            bank.append((kind, mask / norm))
    return bank


_TEMPLATE_BANK: list[tuple[str, np.ndarray]] | None = None

CLASSIFIER_THRESHOLD = 0.4


def classify_shape(image: torch.Tensor) -> str:
    """Best |correlation| against the centered template bank; 'unknown' below
    the confidence threshold (e.g. constant images)."""
    global _TEMPLATE_BANK
    if _TEMPLATE_BANK is None:
        _TEMPLATE_BANK = _templates()
    arr = image.detach().cpu().numpy().astype(np.float64)
    luma = np.tensordot(_LUMA, arr, axes=(0, 0))
    luma -= luma.mean()
    norm = np.linalg.norm(luma)
    if norm < 1e-9:
        return "unknown"
    luma /= norm
    best_kind, best_score = "unknown", 0.0
    for kind, template in _TEMPLATE_BANK:
        score = abs(float((luma * template).sum()))
        if score > best_score:
            best_kind, best_score = kind, score
    return best_kind if best_score >= CLASSIFIER_THRESHOLD else "unknown"
