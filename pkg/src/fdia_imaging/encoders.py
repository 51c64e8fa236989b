"""Gramian Angular (summation) Field and Recurrence Plot images of feature vectors."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

__all__ = [
    "ImageTensor",
    "PolarEncoding",
    "rescale_unit",
    "polar_encode",
    "gaf_encode",
    "gaf_from_unit",
    "gaf_from_unit_product",
    "rp_encode",
    "encode_dataset",
    "encode_matrix",
    "downsample",
    "write_pgm",
    "PixelScaler",
]


@dataclass(frozen=True, eq=False)
class ImageTensor:
    data: np.ndarray  # (channels, height, width)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def matrix(self) -> np.ndarray:
        return self.data[0]


@dataclass(frozen=True, eq=False)
class PolarEncoding:
    phi: np.ndarray
    radius: np.ndarray


def _check(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError("need a 1-D vector of length >= 2")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains NaN or Inf")
    return v


def rescale_unit(v) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant vector maps to all 0.5."""
    v = _check(v)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def polar_encode(x_unit) -> PolarEncoding:
    """Angle arccos(x) and timestamp radius t/N for an already-rescaled series."""
    x = np.asarray(x_unit, dtype=np.float64)
    n = x.size
    return PolarEncoding(np.arccos(x), np.arange(1, n + 1) / n)


def gaf_from_unit(x_unit) -> np.ndarray:
    """cos(phi_l + phi_k) from the polar angles."""
    phi = polar_encode(x_unit).phi
    return np.cos(phi[:, None] + phi[None, :])


def gaf_from_unit_product(x_unit) -> np.ndarray:
    """Same field via x_l x_k - sqrt(1 - x_l^2) sqrt(1 - x_k^2), no trigonometry."""
    x = np.asarray(x_unit, dtype=np.float64)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    return np.outer(x, x) - np.outer(s, s)


def gaf_encode(v) -> ImageTensor:
    return ImageTensor(gaf_from_unit_product(rescale_unit(v))[None])


def rp_encode(v, epsilon_frac: float = 0.1, mode: Literal["binary", "distance"] = "distance") -> ImageTensor:
    """Recurrence plot of scalar points (embedding dimension 1).

    ``binary`` thresholds |v_i - v_j| at ``epsilon_frac`` times the largest
    distance; ``distance`` returns 1 - d / max(d).  Zero spread gives all ones.
    """
    v = _check(v)
    if not 0 < epsilon_frac <= 1:
        raise ValueError("epsilon_frac must lie in (0, 1]")
    d = np.abs(v[:, None] - v[None, :])
    dmax = d.max()
    if dmax == 0:
        return ImageTensor(np.ones((1,) + d.shape))
    if mode == "binary":
        r = (d <= epsilon_frac * dmax).astype(np.float64)
    elif mode == "distance":
        r = 1.0 - d / dmax
    else:
        raise ValueError(f"unknown recurrence mode {mode!r}")
    return ImageTensor(r[None])


def downsample(img: np.ndarray, size: int) -> np.ndarray:
    """Area-average a (..., H, W) stack to (..., size, size).

    Output pixels average the input area they cover, with fractional overlap
    weights when H is not a multiple of ``size``.
    """
    h, w = img.shape[-2:]
    if size > min(h, w):
        raise ValueError(f"cannot downsample {h}x{w} to {size}x{size}")
    return _area_weights(h, size) @ img @ _area_weights(w, size).T


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    edges = np.linspace(0.0, n_in, n_out + 1)
    wts = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for p in range(int(np.floor(lo)), int(np.ceil(hi))):
            wts[i, p] = min(hi, p + 1) - max(lo, p)
        wts[i] /= hi - lo
    return wts


def _gaf_batch(x):
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    return x[:, :, None] * x[:, None, :] - s[:, :, None] * s[:, None, :]


def _rp_batch(v, epsilon_frac, mode):
    d = np.abs(v[:, :, None] - v[:, None, :])
    dmax = d.max(axis=(1, 2), keepdims=True)
    flat = dmax == 0
    safe = np.where(flat, 1.0, dmax)
    if mode == "binary":
        r = (d <= epsilon_frac * dmax).astype(np.float64)
    elif mode == "distance":
        r = 1.0 - d / safe
    else:
        raise ValueError(f"unknown recurrence mode {mode!r}")
    return np.where(flat, 1.0, r)


def encode_matrix(features: np.ndarray, encoder: str = "rp", image_size: int | None = None,
                  epsilon_frac: float = 0.1, mode: str = "distance", chunk: int = 256) -> np.ndarray:
    """Encode each row of a (N, L) array; returns (N, 1, S, S) float64.

    Batched equivalent of :func:`gaf_encode` / :func:`rp_encode` per row,
    followed by :func:`downsample` when ``image_size`` is smaller than L.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if encoder not in ("gaf", "rp"):
        raise ValueError(f"unknown encoder {encoder!r}")
    n, length = features.shape
    if length < 2:
        raise ValueError("need feature vectors of length >= 2")
    bad = np.flatnonzero(~np.all(np.isfinite(features), axis=1))
    if bad.size:
        raise ValueError(f"sample {bad[0]}: vector contains NaN or Inf")
    if encoder == "rp" and not 0 < epsilon_frac <= 1:
        raise ValueError("epsilon_frac must lie in (0, 1]")
    size = length if image_size is None else int(image_size)
    if size > length:
        raise ValueError(f"cannot downsample {length}x{length} to {size}x{size}")
    wts = _area_weights(length, size) if size != length else None
    out = np.empty((n, 1, size, size))
    for start in range(0, n, chunk):
        v = features[start:start + chunk]
        if encoder == "gaf":
            lo = v.min(axis=1, keepdims=True)
            span = v.max(axis=1, keepdims=True) - lo
            x = np.where(span == 0, 0.5, np.clip((v - lo) / np.where(span == 0, 1.0, span), 0.0, 1.0))
            img = _gaf_batch(x)
        else:
            img = _rp_batch(v, epsilon_frac, mode)
        if wts is not None:
            img = wts @ img @ wts.T
        out[start:start + chunk, 0] = img
    return out


def encode_dataset(ds, encoder: str = "rp", **params) -> list[tuple[ImageTensor, int]]:
    if len(ds) == 0:
        return []
    images = encode_matrix(ds.features, encoder, **params)
    return [(ImageTensor(images[i]), int(ds.labels[i])) for i in range(len(ds))]


def write_pgm(path, image: np.ndarray, lo: float | None = None, hi: float | None = None) -> Path:
    """Quantize a 2-D array to 8-bit and write a binary (P5) PGM."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        a = a[0]
    lo = a.min() if lo is None else lo
    hi = a.max() if hi is None else hi
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    pix = np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return path


@dataclass(frozen=True, eq=False)
class PixelScaler:
    """Per-position standardization fitted on a training stack.

    Encoded samples share a large common pattern; subtracting the per-pixel
    training mean and dividing by the per-pixel spread leaves the deviations
    that separate classes.  Positions with spread below ``floor`` divide by 1.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images, floor: float = 1e-8) -> "PixelScaler":
        x = np.asarray(images, dtype=np.float64)
        if len(x) == 0:
            raise ValueError("cannot fit a scaler on an empty stack")
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std < floor, 1.0, std))

    def transform(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.shape[1:] != self.mean.shape:
            raise ValueError(f"scaler fitted on {self.mean.shape}, got {x.shape[1:]}")
        return (x - self.mean) / self.std

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "wb") as fh:
            np.save(fh, np.stack([self.mean, self.std]).astype("<f8"))
        return path

    @classmethod
    def load(cls, path) -> "PixelScaler":
        arr = np.load(Path(path))
        if arr.ndim < 2 or arr.shape[0] != 2:
            raise ValueError("scaler file must hold a stacked mean/std pair")
        return cls(arr[0], arr[1])
