"""Prompt embeddings: a k x d token matrix with fixed structural roles.

Row layout is always [START, LEARNABLE*y, END, PAD*(k-y-2)]. Only the
LEARNABLE rows are ever optimized; START/END/PAD rows are copied from the
model vocabulary and stay frozen. y == 0 is the null embedding.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field

import torch

from ._io import read_block_file, tensors_to_payload, payload_to_tensors, write_block_file
from .errors import ConfigurationError, DomainError

EMBEDDING_MAGIC = b"TVDB-E1"


class TokenRole(enum.Enum):
    START = "start"
    LEARNABLE = "learnable"
    END = "end"
    PAD = "pad"


def role_layout(k: int, y: int) -> tuple[TokenRole, ...]:
    """The only admissible role pattern for k tokens with y learnable slots."""
    if not 0 <= y <= k - 2:
        raise DomainError(f"y must be in [0, k-2]; got y={y}, k={k}")
    return (
        TokenRole.START,
        *([TokenRole.LEARNABLE] * y),
        TokenRole.END,
        *([TokenRole.PAD] * (k - y - 2)),
    )


@dataclass
class PromptEmbedding:
    tokens: torch.Tensor                 # (k, d); learnable rows may carry autograd history
    roles: tuple[TokenRole, ...]
    model_fingerprint: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ConfigurationError("tokens must be a (k, d) matrix")
        k = self.tokens.shape[0]
        if len(self.roles) != k:
            raise ConfigurationError("roles length must match token count")
        y = sum(r is TokenRole.LEARNABLE for r in self.roles)
        if self.roles != role_layout(k, y):
            raise ConfigurationError(
                "roles must follow [START, LEARNABLE*y, END, PAD*(k-y-2)]"
            )

    @property
    def k(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @property
    def y(self) -> int:
        return sum(r is TokenRole.LEARNABLE for r in self.roles)

    @property
    def learnable_slice(self) -> slice:
        return slice(1, 1 + self.y)

    @property
    def end_index(self) -> int:
        return 1 + self.y

    def pad_mask(self) -> torch.Tensor:
        """Boolean (k,) mask, True at PAD positions (excluded from attention keys)."""
        return torch.tensor([r is TokenRole.PAD for r in self.roles])

    def learnable_rows(self) -> torch.Tensor:
        return self.tokens[self.learnable_slice]

    def with_learnable(self, rows: torch.Tensor) -> "PromptEmbedding":
        """Rebuild with new LEARNABLE rows; frozen rows kept (graph preserved)."""
        if rows.shape != (self.y, self.d):
            raise ConfigurationError(f"expected learnable rows of shape ({self.y}, {self.d})")
        frozen = self.tokens.detach()
        tokens = torch.cat([frozen[:1], rows, frozen[1 + self.y :]], dim=0)
        return PromptEmbedding(tokens, self.roles, self.model_fingerprint)

    def detached(self) -> "PromptEmbedding":
        return PromptEmbedding(self.tokens.detach().clone(), self.roles, self.model_fingerprint)


def save_embedding(
    path,
    embedding: PromptEmbedding,
    *,
    T: int,
    tau: float,
    w: float,
    temperature: float,
    model_fingerprint: str,
    prompt_ids: tuple[str, ...] = (),
    timestamp: str | None = None,
) -> None:
    """Write the TVDB-E1 embedding file.

    `timestamp` defaults to SOURCE_DATE_EPOCH when set, otherwise stays empty so
    that reruns of the same seeded job produce byte-identical files.
    """
    if timestamp is None:
        timestamp = os.environ.get("SOURCE_DATE_EPOCH", "")
    decls, payload = tensors_to_payload([("tokens", embedding.tokens)])
    meta = {
        "k": embedding.k,
        "y": embedding.y,
        "d": embedding.d,
        "T": T,
        "tau": tau,
        "w": w,
        "temperature": temperature,
        "model_hash": model_fingerprint,
        "created": timestamp,
        "prompt_ids": list(prompt_ids),
        "tensors": decls,
    }
    write_block_file(path, EMBEDDING_MAGIC, meta, payload)


def load_embedding(path, weights, *, allow_model_mismatch: bool = False):
    """Read a TVDB-E1 file, checking it was trained against `weights`.

    Returns (PromptEmbedding, metadata). Raises ConfigurationError on a model
    hash mismatch unless allow_model_mismatch is set.
    """
    meta, payload = read_block_file(path, EMBEDDING_MAGIC)
    fingerprint = weights.fingerprint()
    if meta["model_hash"] != fingerprint and not allow_model_mismatch:
        raise ConfigurationError(
            f"embedding was trained against model {meta['model_hash'][:12]}..., "
            f"loaded weights are {fingerprint[:12]}... (pass allow_model_mismatch to override)"
        )
    tensors = payload_to_tensors(meta["tensors"], payload)
    tokens = tensors["tokens"].to(torch.float32)
    roles = role_layout(meta["k"], meta["y"])
    return PromptEmbedding(tokens, roles, meta["model_hash"]), meta
