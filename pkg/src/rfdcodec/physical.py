"""Underwater physical scattering model.

A captured underwater image J relates to the clear scene I through a
per-pixel transmission map T and a global ambient light A:

    J = I * T + A * (1 - T),        T = exp(-alpha * d)

All operations are pure functions on float arrays with intensities in
[0, 1]. Clamping to [0, 1] happens only at operation boundaries; pass
``clamp=False`` to compose operations algebraically (round trips are then
exact up to float error).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateTransmissionError

# Transmission floor: restore() divides by T, so amplification is bounded
# at 1/EPS_T = 1000x.
EPS_T = 1e-3

# Window for the local min filter used by the transmission estimator.
DCP_WINDOW = 15

# Fraction of pixels (brightest by dark channel) averaged for ambient light.
BRIGHT_FRACTION = 0.001


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check an H x W x 3 intensity array and return it as float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must have positive height and width")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return img


@dataclass
class UnderwaterPriors:
    """Per-image transmission map T and ambient light A.

    T is stored per channel (H x W x 3) even when synthesized from a scalar
    depth map, because attenuation is per channel. ``alpha`` and ``d`` are
    present only when T was synthesized from a depth map.
    """

    T: np.ndarray
    A: np.ndarray
    alpha: np.ndarray | None = None
    d: np.ndarray | None = None

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64).reshape(3)
        if self.T.ndim != 3 or self.T.shape[2] != 3:
            raise ValueError(f"T must be H x W x 3, got shape {self.T.shape}")
        if not np.isfinite(self.T).all() or not np.isfinite(self.A).all():
            raise ValueError("priors contain non-finite values")
        if self.T.min() <= 0.0 or self.T.max() > 1.0:
            raise ValueError("T must lie in (0, 1]")
        if self.A.min() < 0.0 or self.A.max() > 1.0:
            raise ValueError("A must lie in [0, 1]")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(3)
        if self.d is not None:
            self.d = np.asarray(self.d, dtype=np.float64)


def transmission_from_depth(alpha, d) -> np.ndarray:
    """T[y, x, c] = exp(-alpha[c] * d[y, x]), floored at EPS_T."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(3)
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"depth map must be 2-D, got shape {d.shape}")
    if not np.isfinite(alpha).all() or not np.isfinite(d).all():
        raise ValueError("alpha and d must be finite")
    if alpha.min() < 0.0 or d.min() < 0.0:
        raise ValueError("alpha and d must be non-negative")
    T = np.exp(-d[:, :, None] * alpha[None, None, :])
    return np.maximum(T, EPS_T)


def degrade(image: np.ndarray, priors: UnderwaterPriors, clamp: bool = True) -> np.ndarray:
    """Apply the scattering model: J = I*T + A*(1-T)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != priors.T.shape:
        raise ValueError(
            f"image shape {image.shape} does not match T shape {priors.T.shape}"
        )
    out = image * priors.T + priors.A[None, None, :] * (1.0 - priors.T)
    return np.clip(out, 0.0, 1.0) if clamp else out


def restore(image: np.ndarray, priors: UnderwaterPriors, clamp: bool = True) -> np.ndarray:
    """Invert the scattering model: I = (J - A*(1-T)) / T."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != priors.T.shape:
        raise ValueError(
            f"image shape {image.shape} does not match T shape {priors.T.shape}"
        )
    if priors.T.min() < EPS_T:
        raise DegenerateTransmissionError(
            f"T contains values below the floor {EPS_T}"
        )
    out = (image - priors.A[None, None, :] * (1.0 - priors.T)) / priors.T
    return np.clip(out, 0.0, 1.0) if clamp else out


def style_transfer(
    image: np.ndarray,
    priors_src: UnderwaterPriors,
    priors_dst: UnderwaterPriors,
    clamp: bool = True,
) -> np.ndarray:
    """Re-style ``image`` from its own priors to the destination priors.

    Restores the clear scene with the source priors, then degrades it with
    the destination priors. With equal priors this is the identity (before
    clamping).
    """
    clear = restore(image, priors_src, clamp=False)
    return degrade(clear, priors_dst, clamp=clamp)


def _dark_channel(image: np.ndarray, window: int) -> np.ndarray:
    """Windowed minimum over channels and a square spatial neighborhood."""
    min_channel = image.min(axis=2)
    if window <= 1:
        return min_channel
    return ndimage.minimum_filter(min_channel, size=window, mode="nearest")


def estimate_priors(image: np.ndarray, window: int = DCP_WINDOW) -> UnderwaterPriors:
    """Classical dark-channel-style estimate of (T, A) from a single image.

    A is the mean color of the brightest 0.1% of pixels ranked by their
    per-pixel minimum channel; T is one minus the windowed dark channel of
    J / A, clamped to [EPS_T, 1] and replicated per channel.
    """
    image = validate_image(image)
    h, w = image.shape[:2]
    n = h * w

    per_pixel_min = image.min(axis=2).reshape(-1)
    n_bright = max(int(round(n * BRIGHT_FRACTION)), 1)
    order = np.argsort(per_pixel_min, kind="stable")
    bright_idx = order[n - n_bright:]
    A = image.reshape(-1, 3)[bright_idx].mean(axis=0)
    A = np.clip(A, 0.0, 1.0)

    normalized = image / np.maximum(A[None, None, :], 1e-6)
    T_scalar = 1.0 - _dark_channel(normalized, window)
    T_scalar = np.clip(T_scalar, EPS_T, 1.0)
    T = np.repeat(T_scalar[:, :, None], 3, axis=2)
    return UnderwaterPriors(T=T, A=A)


# --- priors file I/O (JSON manifest + float32 sidecars) ---


def save_priors(priors: UnderwaterPriors, path) -> None:
    """Write a priors manifest: JSON with A/alpha inline, T/d as .f32 sidecars.

    Sidecars are row-major little-endian float32 with a .f32 suffix next to
    the manifest.
    """
    path = Path(path)
    manifest: dict = {"A": [float(v) for v in priors.A]}
    if priors.alpha is not None:
        manifest["alpha"] = [float(v) for v in priors.alpha]
    t_path = path.with_suffix(".T.f32")
    priors.T.astype("<f4").tofile(t_path)
    manifest["T"] = t_path.name
    manifest["T_shape"] = list(priors.T.shape)
    if priors.d is not None:
        d_path = path.with_suffix(".d.f32")
        priors.d.astype("<f4").tofile(d_path)
        manifest["d"] = d_path.name
        manifest["d_shape"] = list(priors.d.shape)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_priors(path) -> UnderwaterPriors:
    path = Path(path)
    manifest = json.loads(path.read_text())
    A = np.asarray(manifest["A"], dtype=np.float64)
    T = np.fromfile(path.parent / manifest["T"], dtype="<f4").astype(np.float64)
    T = T.reshape(manifest["T_shape"])
    alpha = manifest.get("alpha")
    d = None
    if "d" in manifest:
        d = np.fromfile(path.parent / manifest["d"], dtype="<f4").astype(np.float64)
        d = d.reshape(manifest["d_shape"])
    return UnderwaterPriors(T=np.clip(T, EPS_T, 1.0), A=A, alpha=alpha, d=d)
