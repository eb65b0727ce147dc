"""Deterministic numeric kernels shared by the whole pipeline.

Images are quantized to 256 levels in [0, 1] and carried as float arrays of
shape (H, W, C); per-query changes ("deltas") are plain float arrays of the
same shape with values on the 511-level grid {-255..255}/255. All arithmetic
happens on the dequantized values, never on integer codes.

Spectral transforms use the unnormalized forward DFT, so Parseval reads
sum(psd2(d)) == H*W * mean_over_channels(sum(d_c**2)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

# Pixel quantization: 256 intensity levels, 511 possible difference levels.
LEVELS = 256
DELTA_LEVELS = 2 * (LEVELS - 1) + 1


def quantize(values: np.ndarray) -> np.ndarray:
    """Snap float pixel data onto the 256-level grid in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0.0, 255.0) / 255.0


def _as_delta_array(delta) -> np.ndarray:
    arr = np.asarray(delta, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise InvalidInputError(f"delta must be (H, W, C) with all dims >= 1, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """A quantized image in [0,1]^(H,W,C).

    Every pixel p satisfies 0 <= p <= 1 with p*255 integral. Use
    :func:`quantize` / :meth:`from_float` to build one from arbitrary floats.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise InvalidInputError(f"image must be (H, W, C) with all dims >= 1, got {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise InvalidInputError("pixel values must lie in [0, 1]")
        codes = arr * 255.0
        if not np.allclose(codes, np.rint(codes), atol=1e-6):
            raise InvalidInputError("pixels are not quantized to 256 levels")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_float(cls, values) -> "Image":
        return cls(quantize(values))

    @classmethod
    def from_u8(cls, raw: np.ndarray) -> "Image":
        return cls(np.asarray(raw, dtype=np.float64) / 255.0)

    def to_u8(self) -> np.ndarray:
        return np.rint(self.data * 255.0).astype(np.uint8)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))


def delta_between(after: Image, before: Image) -> np.ndarray:
    """Per-query change after - before; values on the 511-level grid."""
    if after.dims != before.dims:
        raise InvalidInputError(f"image dims differ: {after.dims} vs {before.dims}")
    return after.data - before.data


def pearson(z1, z2) -> float:
    """Pearson correlation of two flat vectors.

    Returns 0.0 when either vector is constant: a constant change carries no
    pattern information, so probability mass is routed to the noise/NULL
    states instead of propagating a 0/0.
    """
    a = np.asarray(z1, dtype=np.float64).ravel()
    b = np.asarray(z2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise InvalidInputError("pearson needs vectors of length >= 2")
    ac = a - a.mean()
    bc = b - b.mean()
    na = np.linalg.norm(ac)
    nb = np.linalg.norm(bc)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(ac, bc) / (na * nb), -1.0, 1.0))


def cosine_sim(v1, v2) -> float:
    """Cosine similarity of two flat vectors; 0.0 if either is all-zero."""
    a = np.asarray(v1, dtype=np.float64).ravel()
    b = np.asarray(v2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def psd2(delta) -> np.ndarray:
    """Two-dimensional power spectral density of a per-query change.

    Computes |FFT2(delta_c)|^2 per channel with the unnormalized forward
    transform and averages over channels. The DC bin is included; output
    shape is the spatial (H, W).
    """
    arr = _as_delta_array(delta)
    spec = np.abs(np.fft.fft2(arr, axes=(0, 1))) ** 2
    return spec.mean(axis=2)


def binarize(spec, threshold_factor: float) -> np.ndarray:
    """Binary peak mask of a spectrum: 1 where entry > factor * median.

    An all-zero spectrum yields an all-zero mask (median 0 and no entry
    strictly above it).
    """
    if threshold_factor <= 0:
        raise InvalidInputError("threshold_factor must be positive")
    arr = np.asarray(spec, dtype=np.float64)
    if arr.size and arr.min() < 0:
        raise InvalidInputError("spectrum entries must be non-negative")
    return (arr > threshold_factor * np.median(arr)).astype(np.uint8)


def mse(a, b) -> float:
    """Mean squared elementwise difference."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))
