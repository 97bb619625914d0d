"""Patch-level vector quantizer: a k-means codebook over image patches.

Patches live in [0, 1] per channel. The codebook is fit once on a sample of
training patches and frozen; encoding is exact nearest neighbor with ties
broken toward the lowest index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"UWMCODE1"


@dataclass
class Codebook:
    vectors: np.ndarray  # float32 [N, patch_h * patch_w * channels]
    patch_h: int
    patch_w: int
    channels: int = 3

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.patch_h * self.patch_w * self.channels

    def tokens_per_image(self, height: int, width: int) -> int:
        if height % self.patch_h or width % self.patch_w:
            raise ValueError(f"image {height}x{width} not divisible by patch {self.patch_h}x{self.patch_w}")
        return (height // self.patch_h) * (width // self.patch_w)

    def distance_table(self) -> np.ndarray:
        """Pairwise squared distances between entries, float64 [N, N]."""
        v = self.vectors.astype(np.float64)
        sq = (v * v).sum(axis=1)
        d = sq[:, None] + sq[None, :] - 2.0 * (v @ v.T)
        np.maximum(d, 0.0, out=d)
        np.fill_diagonal(d, 0.0)
        return d


def image_to_patches(img: np.ndarray, patch_h: int, patch_w: int) -> np.ndarray:
    """Row-major non-overlapping patches, scaled to [0, 1]. [n, ph*pw*3]."""
    h, w, c = img.shape
    if h % patch_h or w % patch_w:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch_h}x{patch_w}")
    gh, gw = h // patch_h, w // patch_w
    x = img.reshape(gh, patch_h, gw, patch_w, c).transpose(0, 2, 1, 3, 4)
    return (x.reshape(gh * gw, patch_h * patch_w * c).astype(np.float32)) / 255.0


def patches_to_image(patches: np.ndarray, height: int, width: int, patch_h: int, patch_w: int) -> np.ndarray:
    gh, gw = height // patch_h, width // patch_w
    x = patches.reshape(gh, gw, patch_h, patch_w, 3).transpose(0, 2, 1, 3, 4)
    x = x.reshape(height, width, 3) * 255.0
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def nearest_entry(patches: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Index of the closest codebook row per patch, exact squared Euclidean.

    Ties break toward the lowest index (argmin semantics).
    """
    patches = np.asarray(patches, dtype=np.float64)
    vectors = np.asarray(vectors, dtype=np.float64)
    out = np.empty(len(patches), dtype=np.int64)
    chunk = 1024
    for i in range(0, len(patches), chunk):
        d = ((patches[i : i + chunk, None, :] - vectors[None, :, :]) ** 2).sum(axis=-1)
        out[i : i + chunk] = np.argmin(d, axis=1)
    return out


def _nearest_fast(patches: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """GEMM-based assignment for k-means inner loops (same minimizer up to
    float noise; fine for fitting, not used for encoding)."""
    sq = (vectors * vectors).sum(axis=1)
    d = sq[None, :] - 2.0 * (patches @ vectors.T)  # patch self-term constant per row
    return np.argmin(d, axis=1)


def _kmeans_pp_init(patches: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((n, patches.shape[1]), dtype=np.float64)
    first = int(rng.integers(len(patches)))
    centers[0] = patches[first]
    d2 = ((patches - centers[0]) ** 2).sum(axis=1)
    for i in range(1, n):
        total = d2.sum()
        if total <= 0:
            centers[i] = patches[int(rng.integers(len(patches)))]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, len(patches) - 1)
            centers[i] = patches[idx]
        d2 = np.minimum(d2, ((patches - centers[i]) ** 2).sum(axis=1))
    return centers


def fit_codebook(patches: np.ndarray, n: int, iters: int = 25, seed: int = 0, patch_h: int = 4, patch_w: int = 4) -> Codebook:
    """K-means with k-means++ seeding, fixed iterations; deterministic in seed.

    Empty clusters are re-seeded from the point farthest from its assigned
    center, which also guarantees entries stay distinct.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if len(np.unique(patches, axis=0)) < n:
        raise ValueError(f"need at least {n} distinct patches to fit a {n}-entry codebook")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(patches, n, rng)
    for _ in range(iters):
        assign = _nearest_fast(patches, centers)
        dists = ((patches - centers[assign]) ** 2).sum(axis=1)
        for c in range(n):
            mask = assign == c
            if mask.any():
                centers[c] = patches[mask].mean(axis=0)
            else:
                # re-seed an empty cluster from the farthest point
                far = int(np.argmax(dists))
                centers[c] = patches[far]
                dists[far] = 0.0
    return Codebook(vectors=centers.astype(np.float32), patch_h=patch_h, patch_w=patch_w)


def encode_image(img: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Quantize an image into codebook indices, row-major. int32 [n_img]."""
    patches = image_to_patches(img, codebook.patch_h, codebook.patch_w)
    return nearest_entry(patches, codebook.vectors).astype(np.int32)


def decode_image(tokens: np.ndarray, codebook: Codebook, height: int, width: int) -> np.ndarray:
    """Paste codebook patches back into a uint8 image."""
    tokens = np.asarray(tokens)
    expected = codebook.tokens_per_image(height, width)
    if tokens.shape != (expected,):
        raise ValueError(f"expected {expected} tokens for {height}x{width}, got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= codebook.size:
        raise ValueError("image token id outside the codebook range")
    return patches_to_image(codebook.vectors[tokens], height, width, codebook.patch_h, codebook.patch_w)


# ---------------------------------------------------------------------------
# file format: magic, u32 N, u32 patch_h, u32 patch_w, u32 channels, f32 data
# ---------------------------------------------------------------------------


def save_codebook(path: str | Path, codebook: Codebook) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIII", codebook.size, codebook.patch_h, codebook.patch_w, codebook.channels))
        f.write(codebook.vectors.astype("<f4").tobytes())


def load_codebook(path: str | Path) -> Codebook:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a codebook file")
    n, ph, pw, ch = struct.unpack("<IIII", data[8:24])
    vectors = np.frombuffer(data, dtype="<f4", count=n * ph * pw * ch, offset=24)
    return Codebook(vectors=vectors.reshape(n, ph * pw * ch).copy(), patch_h=ph, patch_w=pw, channels=ch)
