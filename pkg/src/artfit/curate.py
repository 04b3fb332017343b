"""Raw-pool curation: perceptual-hash deduplication and detection thresholding.

Images are plain (ASCII) PGM or PPM files so hashes are bit-exact on any
platform.  Colour is reduced to integer luma before hashing.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_TAU = 0.95
DEFAULT_HAMMING = 6


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ImageHash:
    image_id: str
    bits: int

    def hex(self) -> str:
        return f"{self.bits:016x}"


def _box_sums(img: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Area-weighted sums of ``img`` over a rows x cols grid of equal cells.

    Works in exact integer arithmetic: the image is conceptually upsampled
    by (rows, cols) so cell borders fall on pixel borders, which makes every
    cell sum an integer multiple of the same cell area.
    """
    H, W = img.shape
    # weight of source row i in target row r: overlap of [i*rows, (i+1)*rows) with [r*H, (r+1)*H)
    def weights(n_src, n_dst):
        w = np.zeros((n_dst, n_src), dtype=np.int64)
        for r in range(n_dst):
            lo, hi = r * n_src, (r + 1) * n_src
            for i in range(n_src):
                a, b = max(lo, i * n_dst), min(hi, (i + 1) * n_dst)
                if b > a:
                    w[r, i] = b - a
        return w

    return weights(H, rows) @ img.astype(np.int64) @ weights(W, cols).T


def dhash(image, image_id: str = "") -> ImageHash:
    """64-bit difference hash.

    The grayscale image is box-averaged to 8 rows by 9 columns; bit (r, c)
    is set when ``p[r, c] < p[r, c + 1]``.  Bits are packed row-major with
    (0, 0) as the most significant bit.
    """
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise ImageFormatError(f"dhash needs a nonempty 2D grayscale image, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.integer):
        raise ImageFormatError("dhash needs integer pixel values")
    p = _box_sums(img, 8, 9)
    bits = 0
    for b in (p[:, :-1] < p[:, 1:]).ravel():
        bits = (bits << 1) | int(b)
    return ImageHash(image_id, bits)


def hamming(a, b) -> int:
    a = a.bits if isinstance(a, ImageHash) else int(a)
    b = b.bits if isinstance(b, ImageHash) else int(b)
    return (a ^ b).bit_count()


def dedup(hashes, hamming_threshold: int = DEFAULT_HAMMING) -> list:
    """Greedy scan in image-id order, dropping images near an already kept one.

    Returns the kept image ids in ascending order.
    """
    if not 0 <= hamming_threshold <= 64:
        raise ValueError("hamming threshold must be in [0, 64]")
    kept: list[ImageHash] = []
    for h in sorted(hashes, key=lambda h: h.image_id):
        if all(hamming(h, k) > hamming_threshold for k in kept):
            kept.append(h)
    return [h.image_id for h in kept]


def filter_detections(dets, tau: float = DEFAULT_TAU) -> list:
    """Keep detections whose score is strictly above ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    return [d for d in dets if d.score > tau]


# --------------------------------------------------------------------------- #
# plain PNM
# --------------------------------------------------------------------------- #


def to_gray(rgb) -> np.ndarray:
    """Integer luma ``(299 R + 587 G + 114 B) / 1000`` rounded half up."""
    rgb = np.asarray(rgb, dtype=np.int64)
    return (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000


def read_pnm(path) -> np.ndarray:
    """Read a plain PGM (P2) or PPM (P3) file as a grayscale integer array."""
    text = Path(path).read_text(encoding="ascii")
    tokens = []
    for line in text.splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] not in ("P2", "P3"):
        raise ImageFormatError(f"{path}: not a plain PGM/PPM file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
        data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    ch = 1 if tokens[0] == "P2" else 3
    if w <= 0 or h <= 0 or data.size != w * h * ch or maxval <= 0:
        raise ImageFormatError(f"{path}: header says {w}x{h}x{ch}, found {data.size} samples")
    if data.min() < 0 or data.max() > maxval:
        raise ImageFormatError(f"{path}: sample outside [0, {maxval}]")
    img = data.reshape(h, w) if ch == 1 else to_gray(data.reshape(h, w, 3))
    return img


def write_pgm(path, img) -> None:
    img = np.asarray(img, dtype=np.int64)
    h, w = img.shape
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in img)
    Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n", encoding="ascii")
