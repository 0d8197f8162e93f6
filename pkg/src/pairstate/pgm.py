"""Binary PGM (P5) image files, the on-disk format for all rasters."""

from __future__ import annotations

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit grayscale image as binary PGM (P5, maxval 255)."""
    if image.ndim != 2:
        raise ValueError(f"expected 2-D grayscale image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got dtype {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def _read_tokens(data: bytes, n: int) -> tuple[list[bytes], int]:
    """First n whitespace-separated header tokens, skipping # comments.

    Returns the tokens and the offset one byte past the single whitespace
    character that terminates the last token (per the PGM format).
    """
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < n:
        if i >= len(data):
            raise ValueError("truncated PGM header")
        c = data[i : i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(data) and data[j : j + 1] not in b" \t\r\n":
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) file into a uint8 array of shape (H, W)."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _read_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = data[offset : offset + w * h]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def read_pgm_size(path) -> tuple[int, int]:
    """Read only the (height, width) of a PGM file, without the pixel payload."""
    with open(path, "rb") as f:
        head = f.read(256)
    tokens, _ = _read_tokens(head, 3)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    return int(tokens[2]), int(tokens[1])
