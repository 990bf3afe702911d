"""Procedural stand-in corpora.

Master ridge patterns are grown by iterated orientation-steered Gabor
filtering of seeded noise over a zero-pole orientation field (core/delta
model).  Rolled impressions add small rigid motion, pressure variation and
sensor noise; latent impressions add blur, noise, contrast loss, occlusion
and background clutter at a chosen severity.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import cv2
import numpy as np

from .fpcore import (
    LATENT, ROLLED, SYNTHETIC, DomainSet, FingerprintImage, FingerRecord, Impression,
)
from .imgproc import AugmentParams, warp_array

N_ORIENT_BINS = 16


@lru_cache(maxsize=32)
def _gabor_bank(period: float, n_bins: int = N_ORIENT_BINS) -> tuple[np.ndarray, ...]:
    ksize = int(2 * round(period) + 1)
    sigma = 0.5 * period
    bank = []
    for b in range(n_bins):
        theta = np.pi * b / n_bins
        # cv2 theta is the normal of the stripes; ridges run along the orientation
        k = cv2.getGaborKernel((ksize, ksize), sigma, theta + np.pi / 2, period, 1.0, 0, ktype=cv2.CV_32F)
        k -= k.mean()
        k /= np.abs(k).sum()
        bank.append(k)
    return tuple(bank)


def orientation_field(size: int, rng: np.random.Generator) -> np.ndarray:
    """Ridge orientation in [0, pi) from a random core/delta configuration."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    z = xx + 1j * yy
    c = size / 2.0
    kind = rng.choice(["arch", "loop", "loop", "whorl"])
    base = rng.uniform(-0.3, 0.3)
    theta = np.full((size, size), base)
    if kind == "arch":
        amp = rng.uniform(0.3, 0.7)
        theta += amp * np.sin(np.pi * (xx - c) / size) * np.exp(-((yy - c * rng.uniform(0.6, 1.2)) / size) ** 2)
        return np.mod(theta, np.pi)
    cores = [complex(c + rng.uniform(-0.15, 0.15) * size, c + rng.uniform(-0.25, 0.05) * size)]
    deltas = [complex(cores[0].real + rng.uniform(-0.45, 0.45) * size, cores[0].imag + rng.uniform(0.3, 0.5) * size)]
    if kind == "whorl":
        cores.append(cores[0] + complex(rng.uniform(-0.1, 0.1) * size, rng.uniform(0.08, 0.16) * size))
        deltas.append(complex(2 * c - deltas[0].real, deltas[0].imag))
    for p in cores:
        theta += 0.5 * np.angle(z - p)
    for p in deltas:
        theta -= 0.5 * np.angle(z - p)
    return np.mod(theta, np.pi)


def grow_ridges(theta: np.ndarray, period: float, rng: np.random.Generator, iterations: int = 6) -> np.ndarray:
    """Iterated Gabor filtering; returns ridge map in [-1, 1] (+1 = ridge)."""
    bank = _gabor_bank(float(period))
    n = len(bank)
    bins = np.round(theta / np.pi * n).astype(int) % n
    field = rng.standard_normal(theta.shape).astype(np.float32)
    for _ in range(iterations):
        out = np.zeros_like(field)
        for b, k in enumerate(bank):
            sel = bins == b
            if sel.any():
                out[sel] = cv2.filter2D(field, -1, k, borderType=cv2.BORDER_REFLECT)[sel]
        field = np.tanh(4.0 * out / (out.std() + 1e-8))
    return field


def finger_mask(size: int, rng: np.random.Generator, soft: float = 3.0) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    ax = size * rng.uniform(0.40, 0.47)
    ay = size * rng.uniform(0.44, 0.50)
    d = np.sqrt(((xx - c) / ax) ** 2 + ((yy - c - size * 0.03) / ay) ** 2)
    return np.clip((1.0 - d) * min(ax, ay) / soft, 0.0, 1.0)


@dataclass(frozen=True)
class MasterPrint:
    identity: str
    ridges: np.ndarray  # [-1, 1], ridge = +1
    mask: np.ndarray  # [0, 1]


def make_master(identity: str, seed: int, size: int = 96, period: float = 6.5) -> MasterPrint:
    rng = np.random.default_rng(seed)
    theta = orientation_field(size, rng)
    p = period * rng.uniform(0.92, 1.08)
    return MasterPrint(identity, grow_ridges(theta, p, rng), finger_mask(size, rng))


def render(ridges: np.ndarray, mask: np.ndarray, contrast: float = 1.0, dark: float = 35.0, light: float = 230.0) -> np.ndarray:
    """Dark ridges on a white background; ``contrast`` scales ridge depth."""
    mid = 0.5 * (dark + light)
    amp = 0.5 * (light - dark) * contrast
    finger = mid - amp * np.clip(ridges, -1, 1)
    return mask * finger + (1.0 - mask) * 255.0


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def rolled_impression(master: MasterPrint, rng: np.random.Generator, jitter: bool = True, img_id: str | None = None) -> FingerprintImage:
    ridges, mask = master.ridges, master.mask
    if jitter:
        p = AugmentParams(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-6, 6))
        ridges = warp_array(ridges.astype(np.float32), p, fill=-1.0)
        mask = warp_array(mask.astype(np.float32), p, fill=0.0)
    size = ridges.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] / size
    pressure = 0.85 + 0.15 * np.cos(2 * np.pi * (rng.uniform() + 0.5 * xx + 0.3 * yy))
    img = render(ridges, mask, contrast=1.0) * 1.0
    img = 255.0 - (255.0 - img) * pressure
    img += rng.normal(0, 4.0, img.shape)
    return FingerprintImage(_to_u8(img), img_id or f"{master.identity}_roll")


# -- latent degradation ------------------------------------------------------

@dataclass(frozen=True)
class LatentStyle:
    """Severity knobs of a latent-style degradation."""

    name: str
    blur_sigma: float
    noise_std: float
    contrast: float
    occlusion: float  # fraction of the finger area hidden
    clutter: float  # background line-texture strength, 0..1
    crop: float  # fraction of the finger cut away by a random half-plane


LATENT_STYLES = {
    "good": LatentStyle("good", 0.6, 8.0, 0.85, 0.00, 0.10, 0.00),
    "bad": LatentStyle("bad", 1.3, 18.0, 0.55, 0.15, 0.35, 0.15),
    "ugly": LatentStyle("ugly", 2.0, 28.0, 0.35, 0.30, 0.60, 0.30),
}


def _blob_occluder(shape, frac: float, rng: np.random.Generator, within: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask covering roughly ``frac`` of ``within`` with soft blobs."""
    if frac <= 0:
        return np.zeros(shape, bool)
    h, w = shape
    noise = cv2.GaussianBlur(rng.standard_normal(shape).astype(np.float32), (0, 0), max(h, w) / 8.0)
    region = within if within is not None else np.ones(shape, bool)
    vals = noise[region]
    if vals.size == 0:
        return np.zeros(shape, bool)
    thr = np.quantile(vals, 1.0 - frac)
    return (noise >= thr) & region


def _clutter(shape, strength: float, rng: np.random.Generator) -> np.ndarray:
    if strength <= 0:
        return np.zeros(shape)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    ang = rng.uniform(0, np.pi)
    per = rng.uniform(9, 16)
    lines = np.cos(2 * np.pi * (xx * np.cos(ang) + yy * np.sin(ang)) / per)
    lines = (lines > 0.85).astype(np.float64)
    stain = cv2.GaussianBlur(rng.standard_normal(shape).astype(np.float32), (0, 0), 6.0)
    stain = stain / (np.abs(stain).max() + 1e-8)
    return strength * (90.0 * lines + 40.0 * stain)


def degrade(pixels: np.ndarray, style: LatentStyle, rng: np.random.Generator) -> np.ndarray:
    """Apply a latent-style degradation to an 8-bit rolled-like raster."""
    img = pixels.astype(np.float64)
    h, w = img.shape
    finger = img < 250
    # contrast loss toward a mid-gray substrate
    substrate = 200.0
    img = substrate + (img - substrate) * style.contrast
    if style.crop > 0:
        ang = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        proj = (xx - w / 2) * np.cos(ang) + (yy - h / 2) * np.sin(ang)
        vals = proj[finger] if finger.any() else proj.ravel()
        cut = proj > np.quantile(vals, 1.0 - style.crop)
        img[cut] = substrate
    occ = _blob_occluder((h, w), style.occlusion, rng, within=finger)
    img[occ] = substrate + rng.normal(0, 3.0, int(occ.sum()))
    img = np.where(finger | occ, img, substrate)
    img -= _clutter((h, w), style.clutter, rng)
    if style.blur_sigma > 0:
        img = cv2.GaussianBlur(img, (0, 0), style.blur_sigma)
    img += rng.normal(0, style.noise_std, img.shape)
    return _to_u8(img)


def latent_impression(master: MasterPrint, style: LatentStyle, rng: np.random.Generator, img_id: str | None = None) -> FingerprintImage:
    base = rolled_impression(master, rng, jitter=True)
    return FingerprintImage(degrade(np.asarray(base.pixels), style, rng), img_id or f"{master.identity}_lat-{style.name}")


def blur_occlude(img: FingerprintImage, sigma: float, occlusion: float, rng: np.random.Generator) -> FingerprintImage:
    """Controlled degradation: Gaussian blur then blank a fraction of the finger area."""
    px = np.asarray(img.pixels, dtype=np.float64)
    if sigma > 0:
        px = cv2.GaussianBlur(px, (0, 0), sigma)
    occ = _blob_occluder(px.shape, occlusion, rng, within=np.asarray(img.pixels) < 250)
    px[occ] = 255.0
    return img.with_pixels(_to_u8(px))


# -- corpora -------------------------------------------------------------------


def _seed_for(base_seed: int, identity_index: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([base_seed, identity_index, salt]).generate_state(1)[0])


def make_identities(n: int, seed: int, prefix: str = "f", size: int = 96, period: float = 6.5, start: int = 0) -> list[MasterPrint]:
    return [
        make_master(f"{prefix}{i:04d}", _seed_for(seed, i), size, period)
        for i in range(start, start + n)
    ]


def make_records(
    masters: list[MasterPrint],
    seed: int,
    rolled_per_finger: int = 1,
    latent_styles: tuple[str, ...] = (),
) -> list[FingerRecord]:
    """Rolled impressions plus one latent per requested style for each master."""
    records = []
    for idx, m in enumerate(masters):
        rng = np.random.default_rng(_seed_for(seed, idx, 1))
        imps = []
        for r in range(rolled_per_finger):
            suffix = "" if r == 0 else str(r + 1)
            imps.append(Impression(rolled_impression(m, rng, img_id=f"{m.identity}_roll{suffix}"), ROLLED))
        for s in latent_styles:
            imps.append(Impression(latent_impression(m, LATENT_STYLES[s], rng), LATENT))
        records.append(FingerRecord(m.identity, tuple(imps)))
    return records


def smoke_domains(n: int = 32, seed: int = 0, size: int = 96, styles: tuple[str, ...] = ("good", "ugly")) -> tuple[DomainSet, DomainSet, list[MasterPrint]]:
    """Unpaired clean (rolled) and degraded (latent) training domains.

    Latent styles are cycled across a disjoint set of identities so the two
    domains share no fingers, as in unpaired training.
    """
    masters = make_identities(2 * n, seed, size=size)
    rolled_m, latent_m = masters[:n], masters[n:]
    rolled = []
    latent = []
    for i, m in enumerate(rolled_m):
        rng = np.random.default_rng(_seed_for(seed, i, 2))
        rolled.append(rolled_impression(m, rng))
    for i, m in enumerate(latent_m):
        rng = np.random.default_rng(_seed_for(seed, i, 3))
        style = LATENT_STYLES[styles[i % len(styles)]]
        latent.append(latent_impression(m, style, rng))
    return DomainSet("rolled", tuple(rolled), ROLLED), DomainSet("latent", tuple(latent), LATENT), rolled_m


__all__ = [
    "LATENT_STYLES", "LatentStyle", "MasterPrint", "blur_occlude", "degrade", "latent_impression",
    "make_identities", "make_master", "make_records", "rolled_impression", "smoke_domains", "SYNTHETIC",
]
