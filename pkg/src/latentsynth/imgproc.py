"""Canonicalization, CLAHE enhancement and on-the-fly training augmentation.

All functions are pure: they take a FingerprintImage and return a new one,
keeping uint8 pixels in [0, 255].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import cv2
import numpy as np

from .fpcore import CANONICAL_PPI, FingerprintImage

WHITE = 255

DEFAULT_TRAIN_SIZE = 256
DEFAULT_CLAHE_CLIP = 2.0
DEFAULT_CLAHE_TILES = 8
MAX_TRANSLATE_PX = 100.0
MAX_ROTATE_DEG = 15.0


class InvalidImageError(ValueError):
    pass


def _fit_shape(h: float, w: float, target: int) -> tuple[int, int]:
    s = target / max(h, w)
    # epsilon guards 256.00000001 -> 257
    nh = min(target, max(1, math.ceil(h * s - 1e-6)))
    nw = min(target, max(1, math.ceil(w * s - 1e-6)))
    return nh, nw


def to_canonical(img: FingerprintImage, target_size: int = DEFAULT_TRAIN_SIZE) -> FingerprintImage:
    """Resample to 500 ppi, fit inside a square of ``target_size`` and pad white.

    The aspect ratio is preserved; the content block is centered.
    """
    if img.width == 0 or img.height == 0:
        raise InvalidImageError(f"{img.id}: degenerate image {img.width}x{img.height}")
    if target_size <= 0:
        raise InvalidImageError("target_size must be positive")
    if img.resolution == CANONICAL_PPI and img.width == target_size and img.height == target_size:
        return img.with_pixels(img.pixels)

    ppi_scale = CANONICAL_PPI / img.resolution
    nh, nw = _fit_shape(img.height * ppi_scale, img.width * ppi_scale, target_size)
    src = np.asarray(img.pixels)
    if (nh, nw) != src.shape:
        src = cv2.resize(src, (nw, nh), interpolation=cv2.INTER_LINEAR)
    out = np.full((target_size, target_size), WHITE, dtype=np.uint8)
    top = (target_size - nh) // 2
    left = (target_size - nw) // 2
    out[top:top + nh, left:left + nw] = src
    return FingerprintImage(out, img.id, CANONICAL_PPI)


def clahe(img: FingerprintImage, clip_limit: float = DEFAULT_CLAHE_CLIP, tiles: int = DEFAULT_CLAHE_TILES) -> FingerprintImage:
    """Contrast-limited adaptive histogram equalization (OpenCV implementation)."""
    if not clip_limit > 0:
        raise ValueError("clip_limit must be > 0")
    if int(tiles) < 1:
        raise ValueError("tiles must be >= 1")
    op = cv2.createCLAHE(clipLimit=float(clip_limit), tileGridSize=(int(tiles), int(tiles)))
    return img.with_pixels(op.apply(np.ascontiguousarray(img.pixels)))


@dataclass(frozen=True)
class AugmentParams:
    dx: float = 0.0
    dy: float = 0.0
    theta_deg: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0 and self.theta_deg == 0

    def as_dict(self) -> dict:
        return asdict(self)


def sample_augment_params(
    rng: np.random.Generator | int | None,
    max_translate_px: float = MAX_TRANSLATE_PX,
    max_rotate_deg: float = MAX_ROTATE_DEG,
    translate_scale: float = 1.0,
) -> AugmentParams:
    """Draw uniform translations and rotation.

    ``translate_scale`` rescales the native-resolution pixel bound to the
    training raster (train_size / original_size).
    """
    rng = np.random.default_rng(rng)
    bound = max_translate_px * translate_scale
    dx, dy = rng.uniform(-bound, bound, size=2) if bound > 0 else (0.0, 0.0)
    theta = rng.uniform(-max_rotate_deg, max_rotate_deg) if max_rotate_deg > 0 else 0.0
    return AugmentParams(float(dx), float(dy), float(theta))


def affine_matrix(shape: tuple[int, int], p: AugmentParams) -> np.ndarray:
    h, w = shape
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), p.theta_deg, 1.0)
    m[0, 2] += p.dx
    m[1, 2] += p.dy
    return m


def warp_array(pixels: np.ndarray, p: AugmentParams, fill: float = WHITE) -> np.ndarray:
    if p.is_identity:
        return np.array(pixels, copy=True)
    h, w = pixels.shape[:2]
    return cv2.warpAffine(
        np.ascontiguousarray(pixels), affine_matrix((h, w), p), (w, h),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=fill,
    )


def apply_augmentation(img: FingerprintImage, p: AugmentParams) -> FingerprintImage:
    return img.with_pixels(warp_array(np.asarray(img.pixels), p))


def augment(
    img: FingerprintImage,
    rng_seed: np.random.Generator | int | None,
    max_translate_px: float = MAX_TRANSLATE_PX,
    max_rotate_deg: float = MAX_ROTATE_DEG,
    translate_scale: float = 1.0,
) -> FingerprintImage:
    """Random translation (up to ``max_translate_px``) and rotation, white fill."""
    p = sample_augment_params(rng_seed, max_translate_px, max_rotate_deg, translate_scale)
    return apply_augmentation(img, p)
