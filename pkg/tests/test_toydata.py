import json

import numpy as np
import pytest
import torch

import vpbridge as vb
from vpbridge.errors import DomainError
from vpbridge.toydata import (
    BG_COLORS,
    FILL_COLORS,
    SCALE_OPTIONS,
    SHAPE_KINDS,
    SceneSpec,
)

RED = FILL_COLORS["red"]
BLACK = BG_COLORS["black"]
GRAY = BG_COLORS["gray"]


def test_render_deterministic():
    spec = SceneSpec("circle", RED, BLACK, scale=9.0)
    assert torch.equal(vb.render(spec), vb.render(spec))


def test_render_zero_radius_is_background_only():
    img = vb.render(SceneSpec("circle", RED, GRAY, scale=0.0))
    assert torch.equal(img, torch.zeros(3, 32, 32))


def test_render_out_of_canvas_rejected():
    with pytest.raises(DomainError):
        vb.render(SceneSpec("square", RED, BLACK, cx=29.0, scale=8.0))
    with pytest.raises(DomainError):
        vb.render(SceneSpec("circle", RED, BLACK, cy=2.0, scale=9.0))


def test_render_unknown_kind():
    with pytest.raises(DomainError):
        vb.render(SceneSpec("hexagon", RED, BLACK))


def test_all_shapes_have_pixels():
    for kind in SHAPE_KINDS:
        for scale in SCALE_OPTIONS[kind]:
            img = vb.render(SceneSpec(kind, FILL_COLORS["white"], BLACK, scale=scale))
            assert (img > 0).any(), f"{kind} at scale {scale} rendered empty"


def test_tone_gamma_one_is_identity():
    img = vb.render(SceneSpec("square", RED, GRAY))
    out = vb.apply_transform(img, vb.TransformSpec("tone", {"gamma": 1.0}))
    assert torch.allclose(out, img, atol=1e-6)


def test_color_shift_inverse_up_to_clamp():
    img = vb.render(SceneSpec("triangle", (0.3, -0.2, 0.1), (-0.3, 0.1, -0.1), scale=8.0))
    delta = (0.2, -0.15, 0.1)
    fwd = vb.apply_transform(img, vb.TransformSpec("color-shift", {"delta": delta}))
    back = vb.apply_transform(
        fwd, vb.TransformSpec("color-shift", {"delta": tuple(-d for d in delta)})
    )
    assert torch.allclose(back, img, atol=1e-6)  # no clamping at these values


def test_blur_identity_kernel():
    img = vb.render(SceneSpec("circle", RED, BLACK))
    ident = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]
    out = vb.apply_transform(img, vb.TransformSpec("blur", {"kernel": ident, "iterations": 3}))
    assert torch.allclose(out, img, atol=1e-6)


def test_invert_luma_twice_is_identity():
    img = vb.render(SceneSpec("composite", FILL_COLORS["blue"], BG_COLORS["cream"]))
    t = vb.TransformSpec("invert-luma", {})
    assert torch.allclose(vb.apply_transform(vb.apply_transform(img, t), t), img, atol=1e-6)


def test_transform_purity_input_untouched():
    img = vb.render(SceneSpec("square", RED, BLACK))
    copy = img.clone()
    vb.apply_transform(img, vb.TransformSpec("desaturate", {"factor": 0.5}))
    assert torch.equal(img, copy)


def test_transform_param_validation():
    with pytest.raises(DomainError):
        vb.TransformSpec("tone", {"gamma": 0.0})
    with pytest.raises(DomainError):
        vb.TransformSpec("color-shift", {"delta": (1.0, 2.0)})
    with pytest.raises(DomainError):
        vb.TransformSpec("blur", {"kernel": [[1.0]], "iterations": 1})
    with pytest.raises(DomainError):
        vb.TransformSpec("desaturate", {"factor": 2.0})
    with pytest.raises(DomainError):
        vb.TransformSpec("warp", {})


def test_transform_spec_roundtrip():
    t = vb.TransformSpec("color-shift", {"delta": (0.1, 0.2, -0.3)})
    assert vb.TransformSpec.from_dict(t.to_dict()) == t


# --- prompt sets ----------------------------------------------------------------

TRANSFORM = vb.TransformSpec("color-shift", {"delta": (0.3, -0.2, 0.1)})


def test_make_prompt_set_single_pair_and_counts():
    ps = vb.make_prompt_set(1, 8, TRANSFORM, seed=5)
    assert len(ps.prompts) == 1
    assert len(ps.tests) == 8
    for case in ps.tests:
        assert torch.equal(case.target, vb.apply_transform(case.image, TRANSFORM))


def test_prompt_set_specs_disjoint_and_kinds_covered():
    ps = vb.make_prompt_set(2, 12, TRANSFORM, seed=5)
    train = {s.to_dict().__str__() for s in ps.train_specs}
    test = {c.spec.to_dict().__str__() for c in ps.tests}
    assert not train & test
    assert {c.spec.kind for c in ps.tests} == set(SHAPE_KINDS)


def test_prompt_set_regeneration_identical_manifest():
    a = vb.make_prompt_set(1, 6, TRANSFORM, seed=9)
    b = vb.make_prompt_set(1, 6, TRANSFORM, seed=9)
    assert json.dumps(a.manifest, sort_keys=True) == json.dumps(b.manifest, sort_keys=True)


def test_prompt_set_write_and_load(tmp_path):
    ps = vb.make_prompt_set(1, 4, TRANSFORM, seed=2, out_dir=tmp_path)
    assert (tmp_path / "manifest.json").exists()
    for name in ("before_0000.png", "after_0000.png", "test_0003.png", "gt_0003.png"):
        assert (tmp_path / name).exists()
    loaded = vb.load_prompt_set(tmp_path)
    assert len(loaded.prompts) == 1 and len(loaded.tests) == 4
    assert loaded.transform == ps.transform
    # PNG quantization: loaded pixels match the originals to one 8-bit step
    assert (loaded.prompts[0].before - ps.prompts[0].before).abs().max() <= (1 / 127.5) + 1e-6


def test_corpus_covers_label_grid():
    corpus = vb.build_training_corpus()
    assert len(corpus) == len(SHAPE_KINDS) * len(FILL_COLORS) * len(BG_COLORS)
    kinds = {s.label[0] for s in corpus}
    assert kinds == {f"shape:{k}" for k in SHAPE_KINDS}
    shapes = {tuple(s.image.shape) for s in corpus}
    assert shapes == {(3, 32, 32)}


# --- classifier ------------------------------------------------------------------

def test_classifier_self_consistent():
    for kind in SHAPE_KINDS:
        img = vb.render(SceneSpec(kind, FILL_COLORS["yellow"], BG_COLORS["navy"],
                                  scale=SCALE_OPTIONS[kind][0]))
        assert vb.classify_shape(img) == kind


def test_classifier_constant_image_unknown():
    assert vb.classify_shape(torch.full((3, 32, 32), 0.25)) == "unknown"


@pytest.mark.parametrize("transform", [
    vb.TransformSpec("color-shift", {"delta": (0.35, -0.25, 0.15)}),
    vb.TransformSpec("tone", {"gamma": 1.8}),
    vb.TransformSpec("desaturate", {"factor": 0.25}),
    vb.TransformSpec("blur", {"kernel": [[1 / 9] * 3] * 3, "iterations": 2}),
    vb.TransformSpec("invert-luma", {}),
])
def test_classifier_robust_to_transforms(transform):
    rng = np.random.default_rng(0)
    pool = [SceneSpec(kind, fill, bg, scale=scale)
            for kind in SHAPE_KINDS
            for fill in FILL_COLORS.values()
            for bg in BG_COLORS.values()
            for scale in SCALE_OPTIONS[kind]]
    for idx in rng.choice(len(pool), size=24, replace=False):
        spec = pool[idx]
        out = vb.apply_transform(vb.render(spec), transform)
        assert vb.classify_shape(out) == spec.kind, spec
