import pytest
import torch

import vpbridge as vb
from vpbridge.embedding import EMBEDDING_MAGIC, role_layout
from vpbridge.errors import ConfigurationError, DomainError


def test_role_layout_pattern():
    roles = role_layout(8, 3)
    assert roles[0] is vb.TokenRole.START
    assert roles[1:4] == (vb.TokenRole.LEARNABLE,) * 3
    assert roles[4] is vb.TokenRole.END
    assert roles[5:] == (vb.TokenRole.PAD,) * 3


def test_role_layout_null_case():
    roles = role_layout(6, 0)
    assert roles == (vb.TokenRole.START, vb.TokenRole.END) + (vb.TokenRole.PAD,) * 4


@pytest.mark.parametrize("y", [-1, 7, 12])
def test_role_layout_rejects_bad_y(y):
    with pytest.raises(DomainError):
        role_layout(8, y)


def test_embedding_validates_pattern():
    tokens = torch.zeros(6, 4)
    good = role_layout(6, 2)
    vb.PromptEmbedding(tokens, good)
    bad = (vb.TokenRole.END, vb.TokenRole.START) + (vb.TokenRole.PAD,) * 4
    with pytest.raises(ConfigurationError):
        vb.PromptEmbedding(tokens, bad)
    with pytest.raises(ConfigurationError):
        vb.PromptEmbedding(tokens, good[:-1])


def test_embedding_properties_and_masks():
    emb = vb.PromptEmbedding(torch.arange(48, dtype=torch.float32).reshape(8, 6),
                             role_layout(8, 4))
    assert (emb.k, emb.d, emb.y) == (8, 6, 4)
    assert emb.end_index == 5
    assert emb.pad_mask().tolist() == [False] * 6 + [True, True]
    assert torch.equal(emb.learnable_rows(), emb.tokens[1:5])


def test_with_learnable_keeps_frozen_rows():
    emb = vb.PromptEmbedding(torch.randn(8, 6), role_layout(8, 2))
    rows = torch.ones(2, 6)
    out = emb.with_learnable(rows)
    assert torch.equal(out.tokens[1:3], rows)
    assert torch.equal(out.tokens[0], emb.tokens[0])
    assert torch.equal(out.tokens[3:], emb.tokens[3:])
    with pytest.raises(ConfigurationError):
        emb.with_learnable(torch.ones(3, 6))


def test_save_load_roundtrip(tmp_path, small_weights):
    emb = small_weights.embedding_from_rows(torch.randn(3, small_weights.token_dim))
    path = tmp_path / "emb.tvdb"
    vb.save_embedding(
        path, emb, T=50, tau=0.7, w=7.5, temperature=1.0,
        model_fingerprint=small_weights.fingerprint(), prompt_ids=("p0",),
    )
    assert path.read_bytes().startswith(EMBEDDING_MAGIC)
    loaded, meta = vb.load_embedding(path, small_weights)
    assert torch.allclose(loaded.tokens, emb.tokens.to(torch.float32))
    assert loaded.roles == emb.roles
    assert meta["prompt_ids"] == ["p0"]
    assert meta["T"] == 50 and meta["tau"] == 0.7 and meta["w"] == 7.5


def test_load_rejects_model_mismatch(tmp_path, small_weights):
    other = vb.untrained_weights(99, height=16, width=16)
    emb = small_weights.embedding_from_rows(torch.randn(2, small_weights.token_dim))
    path = tmp_path / "emb.tvdb"
    vb.save_embedding(path, emb, T=50, tau=0.7, w=7.5, temperature=1.0,
                      model_fingerprint=small_weights.fingerprint())
    with pytest.raises(ConfigurationError):
        vb.load_embedding(path, other)
    loaded, _ = vb.load_embedding(path, other, allow_model_mismatch=True)
    assert loaded.y == 2


def test_save_is_byte_stable(tmp_path, small_weights):
    emb = small_weights.embedding_from_rows(torch.randn(2, small_weights.token_dim))
    kwargs = dict(T=50, tau=0.7, w=7.5, temperature=1.0,
                  model_fingerprint=small_weights.fingerprint())
    vb.save_embedding(tmp_path / "a.tvdb", emb, **kwargs)
    vb.save_embedding(tmp_path / "b.tvdb", emb, **kwargs)
    assert (tmp_path / "a.tvdb").read_bytes() == (tmp_path / "b.tvdb").read_bytes()
