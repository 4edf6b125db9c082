"""Image, label-mask and probability-mask file I/O.

Probability masks use the ``DCM1`` binary layout::

    offset 0   magic  b"DCM1"
    offset 4   width   uint32 little-endian
    offset 8   height  uint32 little-endian
    offset 12  classes uint32 little-endian
    offset 16  width*height*classes float32 little-endian, row-major, class fastest

Label masks are single-channel PNGs whose gray values are class indices.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_MAGIC = b"DCM1"
_HEADER = struct.Struct("<4sIII")


def parse_size(text: str) -> tuple[int, int]:
    """Parse ``"768x512"`` into ``(768, 512)`` (width, height)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"size must look like WIDTHxHEIGHT, got {text!r}") from None
    if w < 1 or h < 1:
        raise ValueError(f"size must be positive, got {text!r}")
    return w, h


def iter_image_files(root: str | Path) -> list[Path]:
    """Image files below ``root`` in sorted relative-path order."""
    root = Path(root)
    files = [p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: p.relative_to(root).as_posix())


def read_rgb(path: str | Path, resize: tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resize is not None and im.size != resize:
            im = im.resize(resize, Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(path: str | Path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")


def read_label_mask(path: str | Path, resize: tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            im = im.convert("L")
        if resize is not None and im.size != resize:
            im = im.resize(resize, Image.NEAREST)
        return np.asarray(im).astype(np.int64)


def write_label_mask(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise ValueError("label masks must be 2-D with class indices in [0, 255]")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path, format="PNG")


def encode_prob_mask(probs: np.ndarray) -> bytes:
    probs = np.asarray(probs)
    if probs.ndim != 3:
        raise ValueError(f"probability mask must be (H, W, C), got shape {probs.shape}")
    h, w, c = probs.shape
    return _HEADER.pack(MASK_MAGIC, w, h, c) + probs.astype("<f4").tobytes(order="C")


def decode_prob_mask(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode a DCM1 buffer into a float64 (H, W, C) array.

    Raises DataError naming ``name`` and the byte offset of the problem.
    """
    if len(data) < _HEADER.size:
        raise DataError(f"{name}: truncated header at byte offset {len(data)} (need {_HEADER.size})")
    magic, w, h, c = _HEADER.unpack_from(data)
    if magic != MASK_MAGIC:
        raise DataError(f"{name}: bad magic {magic!r} at byte offset 0")
    if w < 1 or h < 1 or c < 1:
        raise DataError(f"{name}: zero dimension in header at byte offset 4")
    expected = _HEADER.size + 4 * w * h * c
    if len(data) != expected:
        offset = min(len(data), expected)
        raise DataError(
            f"{name}: payload size mismatch at byte offset {offset} "
            f"(expected {expected} bytes total, got {len(data)})"
        )
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise DataError(f"{name}: non-finite value at byte offset {_HEADER.size + 4 * bad}")
    return arr.astype(np.float64)


def read_prob_mask(path: str | Path) -> np.ndarray:
    return decode_prob_mask(Path(path).read_bytes(), str(path))


def write_prob_mask(path: str | Path, probs: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_prob_mask(probs))
