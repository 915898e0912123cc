"""8-bit RGB PNG conversion at the pipeline boundary.

Load: pixel / 127.5 - 1. Save: clamp to [-1, 1], then (v + 1) * 127.5 with
round-half-even. Encoding goes through PIL and is byte-deterministic.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    arr = image.detach().cpu().numpy()
    arr = np.clip(arr, -1.0, 1.0)
    arr = np.rint((arr + 1.0) * 127.5)
    return arr.astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    out = arr.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(out.transpose(2, 0, 1).copy())


def encode_png(image: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_image(path: str | Path, image: torch.Tensor) -> None:
    Path(path).write_bytes(encode_png(image))


def load_image(path: str | Path) -> torch.Tensor:
    with Image.open(path) as img:
        return from_uint8(np.asarray(img.convert("RGB")))
