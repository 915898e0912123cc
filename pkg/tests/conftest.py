"""Shared fixtures. The trained model and the textualization runs are expensive
(minutes), so they are session-scoped and cached on disk keyed by their exact
configuration; training is deterministic, so a cache hit is bit-identical to a
fresh run."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest
import torch

import vpbridge as vb

torch.set_num_threads(1)  # tiny tensors: thread sync costs more than it buys

CACHE_DIR = Path(__file__).parent / ".cache"

TRAIN_PARAMS = {"epochs": 150, "seed": 7, "schedule_steps": 200}
PROMPT_SEED = 11
TEX_SEED = 3
COLOR_SHIFT = vb.TransformSpec("color-shift", {"delta": (0.35, -0.25, 0.15)})


def _cache_path(name: str, params: dict) -> Path:
    digest = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:16]
    CACHE_DIR.mkdir(exist_ok=True)
    return CACHE_DIR / f"{name}_{digest}"


@pytest.fixture(scope="session")
def toy_weights() -> vb.DenoiserWeights:
    path = _cache_path("weights", TRAIN_PARAMS).with_suffix(".tvdb")
    if path.exists():
        return vb.load_weights(path)
    corpus = vb.build_training_corpus()
    schedule = vb.NoiseSchedule.linear(TRAIN_PARAMS["schedule_steps"])
    weights = vb.train_denoiser(
        corpus, schedule, TRAIN_PARAMS["epochs"], TRAIN_PARAMS["seed"]
    )
    vb.save_weights(path, weights)
    return weights


@pytest.fixture(scope="session")
def corpus() -> list[vb.LabeledImage]:
    return vb.build_training_corpus()


@pytest.fixture(scope="session")
def prompt_set():
    return vb.make_prompt_set(1, 20, COLOR_SHIFT, seed=PROMPT_SEED)


@pytest.fixture(scope="session")
def base_config() -> vb.BridgeConfig:
    return vb.BridgeConfig(seed=TEX_SEED)


def _run_textualization(toy_weights, prompt_set, config, tag: str):
    params = {"tag": tag, "config": config.to_dict(), "train": TRAIN_PARAMS,
              "prompt_seed": PROMPT_SEED}
    path = _cache_path("tex", params).with_suffix(".pt")
    if path.exists():
        blob = torch.load(path, weights_only=True)
        emb = toy_weights.embedding_from_rows(blob["learnable"])
        history = [vb.StepLoss(*row) for row in blob["history"]]
        return vb.TextualizationResult(emb, history, blob["recon"], config)
    result = vb.textualize(prompt_set.prompts, toy_weights, config)
    torch.save({
        "learnable": result.embedding.learnable_rows(),
        "history": [(e.epoch, e.step, e.beta, e.loss) for e in result.loss_history],
        "recon": result.final_reconstruction,
    }, path)
    return result


@pytest.fixture(scope="session")
def tex_main(toy_weights, prompt_set, base_config) -> vb.TextualizationResult:
    return _run_textualization(toy_weights, prompt_set, base_config, "main")


@pytest.fixture(scope="session")
def tex_no_attention(toy_weights, prompt_set, base_config) -> vb.TextualizationResult:
    config = base_config.replace(injection_enabled=False)
    return _run_textualization(toy_weights, prompt_set, config, "no-attn")


@pytest.fixture(scope="session")
def tex_flat_beta(toy_weights, prompt_set, base_config) -> vb.TextualizationResult:
    config = base_config.replace(beta_temperature=0.0)
    return _run_textualization(toy_weights, prompt_set, config, "flat-beta")


@pytest.fixture(scope="session")
def default_edits(toy_weights, prompt_set, base_config, tex_main) -> dict[str, torch.Tensor]:
    """Edits of every held-out test image under the learned embedding."""
    params = {"config": base_config.to_dict(), "train": TRAIN_PARAMS,
              "prompt_seed": PROMPT_SEED}
    path = _cache_path("edits", params).with_suffix(".pt")
    if path.exists():
        return torch.load(path, weights_only=True)
    edits = {
        case.id: vb.edit(case.image, tex_main.embedding, toy_weights, base_config)
        for case in prompt_set.tests
    }
    torch.save(edits, path)
    return edits


@pytest.fixture()
def small_weights() -> vb.DenoiserWeights:
    """Untrained 16x16 model for structural and gradient tests."""
    return vb.untrained_weights(0, height=16, width=16)
