"""Command-line entry point binding the library into reproducible runs.

Subcommands: make-dataset, train-denoiser, textualize, edit, eval, generate,
check. Hyperparameters resolve in the order defaults < config file < flags;
a flat key=value config file is accepted by every command. Each command drops
a resolved-config.json next to its outputs so the run can be replayed
bit-identically. Exit codes: 0 success, 1 runtime/numerical failure,
2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import torch

from . import __version__
from .config import BridgeConfig
from .checks import (
    attention_merge_suite,
    gaussian_order_suite,
    gradient_suite,
    roundtrip_suite,
)
from .denoiser import load_weights, save_weights, train_denoiser
from .editor import edit, generate_from_embedding
from .embedding import load_embedding, save_embedding
from .errors import ConfigurationError, DomainError, NumericalError
from .evalkit import evaluate, parse_provider, write_report
from .images import load_image, save_image
from .schedule import NoiseSchedule
from .textualize import textualize
from .toydata import TransformSpec, build_training_corpus, load_prompt_set, make_prompt_set

_CONFIG_TYPES = {f.name: f.type for f in dataclasses.fields(BridgeConfig)}
_BOOLISH = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(key: str, raw: str):
    typ = str(_CONFIG_TYPES[key])
    if "bool" in typ:
        if raw.lower() not in _BOOLISH:
            raise ConfigurationError(f"config key {key}: expected a boolean, got {raw!r}")
        return _BOOLISH[raw.lower()]
    if "int" in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw


def read_config_file(path: str | Path) -> dict:
    """Flat key=value file with '#' comments; keys validated by name."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    values = {}
    bad = []
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{p}:{lineno}: expected key=value, got {stripped!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _CONFIG_TYPES:
            bad.append(key)
            continue
        values[key] = _coerce(key, raw)
    if bad:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(bad))}")
    return values


def resolve_config(args: argparse.Namespace) -> BridgeConfig:
    values = BridgeConfig().to_dict()
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in _CONFIG_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "ablate_no_attention", False):
        values["injection_enabled"] = False
    return BridgeConfig.from_dict(values)


def _write_resolved(out_dir: Path, command: str, config: BridgeConfig, extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "version": __version__,
        "config": config.to_dict(),
        **extra,
    }
    (out_dir / "resolved-config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--steps", dest="T", type=int, help="bridge steps T")
    p.add_argument("--epochs", dest="N", type=int, help="optimization epochs N")
    p.add_argument("--guidance", dest="w", type=float, help="guidance scale w")
    p.add_argument("--tau", dest="tau", type=float, help="injection threshold")
    p.add_argument("--gamma", dest="gamma", type=float, help="embedding learning rate")
    p.add_argument("--tokens", dest="y", type=int, help="learnable token count y")
    p.add_argument("--beta-temperature", dest="beta_temperature", type=float)
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--init-mode", dest="init_mode", choices=["descriptor", "gaussian"])
    p.add_argument("--allow-model-mismatch", dest="allow_model_mismatch",
                   action="store_const", const=True)


def _parse_transform(spec: str) -> TransformSpec:
    kind, _, rest = spec.partition(":")
    if kind == "color-shift":
        delta = tuple(float(v) for v in rest.split(",")) if rest else (0.35, -0.25, 0.15)
        return TransformSpec("color-shift", {"delta": delta})
    if kind == "tone":
        return TransformSpec("tone", {"gamma": float(rest) if rest else 1.8})
    if kind == "desaturate":
        return TransformSpec("desaturate", {"factor": float(rest) if rest else 0.25})
    if kind == "blur":
        iterations = int(rest) if rest else 2
        box = [[1 / 9] * 3] * 3
        return TransformSpec("blur", {"kernel": box, "iterations": iterations})
    if kind == "invert-luma":
        return TransformSpec("invert-luma", {})
    raise ConfigurationError(f"unknown transform spec {spec!r}")


def cmd_make_dataset(args) -> int:
    config = resolve_config(args)
    transform = _parse_transform(args.transform)
    out = Path(args.out)
    make_prompt_set(args.train_pairs, args.test_images, transform, config.seed, out_dir=out)
    _write_resolved(out, "make-dataset", config, {
        "transform": transform.to_dict(),
        "train_pairs": args.train_pairs,
        "test_images": args.test_images,
    })
    print(f"dataset written to {out}")
    return 0


def cmd_train_denoiser(args) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus = build_training_corpus()
    schedule = NoiseSchedule.linear(args.train_steps, args.alpha_bar_end)
    weights = train_denoiser(
        corpus, schedule, args.train_epochs, config.seed,
        base_channels=args.base_channels, lr=args.lr,
    )
    save_weights(out, weights)
    run_dir = out.parent
    _write_resolved(run_dir, "train-denoiser", config, {
        "train_epochs": args.train_epochs,
        "train_steps": args.train_steps,
        "alpha_bar_end": args.alpha_bar_end,
        "base_channels": args.base_channels,
        "lr": args.lr,
        "corpus_size": len(corpus),
        "checkpoint": out.name,
        "fingerprint": weights.fingerprint(),
    })
    log = run_dir / "run.log"
    lines = [
        f"vpbridge train-denoiser v{__version__}",
        f"resolved defaults: T={config.T} w={config.w} tau={config.tau} "
        f"gamma={config.gamma} N={config.N} seed={config.seed}",
        f"corpus: {len(corpus)} images, schedule: {args.train_steps} steps "
        f"down to alpha_bar={args.alpha_bar_end}",
        f"checkpoint: {out} (sha256 {weights.fingerprint()[:16]}...)",
    ]
    lines += [f"epoch {i:4d} loss {v:.6f}" for i, v in enumerate(weights.train_losses)]
    log.write_text("\n".join(lines) + "\n")
    print(f"checkpoint written to {out}")
    print(f"final training loss {weights.train_losses[-1]:.6f}")
    return 0


def cmd_textualize(args) -> int:
    config = resolve_config(args)
    weights = load_weights(args.weights)
    prompt_set = load_prompt_set(args.pairs)
    result = textualize(prompt_set.prompts, weights, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embedding(
        out, result.embedding,
        T=config.T, tau=config.tau, w=config.w, temperature=config.beta_temperature,
        model_fingerprint=weights.fingerprint(),
        prompt_ids=tuple(p.id for p in prompt_set.prompts),
    )
    loss_csv = out.parent / "loss_history.csv"
    with loss_csv.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "beta", "loss"])
        for entry in result.loss_history:
            writer.writerow([entry.epoch, entry.step, f"{entry.beta:.9e}", f"{entry.loss:.9e}"])
    _write_resolved(out.parent, "textualize", config, {
        "pairs": str(args.pairs),
        "weights": str(args.weights),
        "embedding": out.name,
        "final_step_loss": result.loss_history[-1].loss,
    })
    print(f"embedding written to {out}")
    print(f"loss history written to {loss_csv}")
    return 0


def cmd_edit(args) -> int:
    config = resolve_config(args)
    weights = load_weights(args.weights)
    embedding, _meta = load_embedding(
        args.embedding, weights, allow_model_mismatch=config.allow_model_mismatch
    )
    image = load_image(args.image)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.intensity_sweep:
        intensities = [float(v) for v in args.intensity_sweep.split(",")]
        written = []
        for lam in intensities:
            target = out.with_name(f"{out.stem}_intensity{lam:g}{out.suffix}")
            save_image(target, edit(image, embedding, weights, config, lam))
            written.append(target.name)
        extra = {"intensities": intensities, "outputs": written}
    else:
        save_image(out, edit(image, embedding, weights, config, args.intensity))
        extra = {"intensity": args.intensity, "outputs": [out.name]}
    _write_resolved(out.parent, "edit", config, {
        "image": str(args.image), "embedding": str(args.embedding),
        "weights": str(args.weights), **extra,
    })
    for name in extra["outputs"]:
        print(f"wrote {out.parent / name}")
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args)
    weights = load_weights(args.weights)
    embedding, _meta = load_embedding(
        args.embedding, weights, allow_model_mismatch=config.allow_model_mismatch
    )
    prompt_set = load_prompt_set(args.dataset)
    shape = (3, weights.height, weights.width)
    providers = [parse_provider(s, shape) for s in args.providers.split(",") if s]
    report = evaluate(prompt_set, embedding, weights, config, providers)
    out = Path(args.out)
    csv_path, json_path = write_report(report, out)
    _write_resolved(out, "eval", config, {
        "dataset": str(args.dataset), "embedding": str(args.embedding),
        "weights": str(args.weights), "providers": args.providers,
    })
    print(f"report written to {csv_path} and {json_path}")
    for key, value in sorted(report.aggregates.items()):
        print(f"  {key}: {value:.4f}")
    if report.failures:
        print(f"  failures: {report.failures}")
    return 0


def cmd_generate(args) -> int:
    config = resolve_config(args)
    weights = load_weights(args.weights)
    embedding, _meta = load_embedding(
        args.embedding, weights, allow_model_mismatch=config.allow_model_mismatch
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(args.count):
        image = generate_from_embedding(embedding, weights, config, config.seed + i)
        target = out if args.count == 1 else out.with_name(f"{out.stem}_{i:02d}{out.suffix}")
        save_image(target, image)
        written.append(target.name)
    _write_resolved(out.parent, "generate", config, {
        "embedding": str(args.embedding), "weights": str(args.weights),
        "count": args.count, "outputs": written,
    })
    for name in written:
        print(f"wrote {out.parent / name}")
    return 0


def cmd_check(args) -> int:
    config = resolve_config(args)
    if args.suite == "gradients":
        results = gradient_suite(seed=config.seed)
    elif args.suite == "attention-merge":
        results = attention_merge_suite(seed=config.seed)
    elif args.suite == "gaussian-order":
        results = gaussian_order_suite(seed=config.seed)
    elif args.suite == "roundtrip":
        if not args.weights:
            raise ConfigurationError("the roundtrip suite needs --weights")
        weights = load_weights(args.weights)
        gen = torch.Generator().manual_seed(config.seed)
        if weights.prototypes is not None:
            idx = torch.randperm(weights.prototypes.shape[0], generator=gen)[:5]
            images = [weights.prototypes[i] for i in idx]
        else:
            images = [
                torch.rand((3, weights.height, weights.width), generator=gen) * 2 - 1
                for _ in range(5)
            ]
        results = roundtrip_suite(weights, images, config)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigurationError(f"unknown suite {args.suite!r}")
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: {r.details}")
        failed += 0 if r.passed else 1
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vpbridge",
        description="Textualize a before/after visual prompt through a diffusion "
                    "bridge and edit new images with the result.",
    )
    parser.add_argument("--version", action="version", version=f"vpbridge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write a toy dataset with ground truth")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--transform", default="color-shift",
                   help="color-shift[:dr,dg,db] | tone[:gamma] | desaturate[:f] | "
                        "blur[:iters] | invert-luma")
    p.add_argument("--train-pairs", type=int, default=1)
    p.add_argument("--test-images", type=int, default=10)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train-denoiser", help="train the toy prior on the shape corpus")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path (TVDB-W1)")
    p.add_argument("--train-epochs", type=int, default=150)
    p.add_argument("--train-steps", type=int, default=200)
    p.add_argument("--alpha-bar-end", type=float, default=0.02)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("textualize", help="learn an embedding from a visual prompt")
    _add_config_flags(p)
    p.add_argument("--pairs", required=True, help="dataset directory with manifest.json")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="embedding path (TVDB-E1)")
    p.add_argument("--ablate-no-attention", action="store_true",
                   help="train without attention injection")
    p.set_defaults(func=cmd_textualize)

    p = sub.add_parser("edit", help="apply a learned embedding to an image")
    _add_config_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--intensity", type=float, default=1.0)
    p.add_argument("--intensity-sweep", help="comma list, e.g. 0,0.5,1,1.5")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="score edits against ground-truth targets")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--providers", default="pixel",
                   help="comma list: pixel | randproj:dim:seed | extern:url | extern-cmd:cmd")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample images from an embedding alone")
    _add_config_flags(p)
    p.add_argument("--embedding", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("check", help="run a verification suite against its oracle")
    _add_config_flags(p)
    p.add_argument("--suite", required=True,
                   choices=["gradients", "roundtrip", "gaussian-order", "attention-merge"])
    p.add_argument("--weights")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ConfigurationError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (NumericalError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
