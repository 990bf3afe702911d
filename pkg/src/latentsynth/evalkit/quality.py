"""Image quality scores: external NFIQ 2 adapter or an internal coherence proxy."""

from __future__ import annotations

import csv
import logging
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from ..fpcore import FingerprintImage, write_image
from .minutiae import orientation_field

logger = logging.getLogger(__name__)

EXTERNAL_NFIQ2 = "external-nfiq2"
INTERNAL_PROXY = "internal-proxy"
N_BINS = 20


@dataclass(frozen=True)
class QualityScore:
    value: float
    source: str
    image_id: str

    def __post_init__(self):
        if not 0 <= self.value <= 100:
            raise ValueError(f"{self.image_id}: quality {self.value} outside [0, 100]")
        if self.source not in (EXTERNAL_NFIQ2, INTERNAL_PROXY):
            raise ValueError(f"unknown quality source {self.source!r}")


def proxy_quality(img: FingerprintImage, block: int = 16, sigma: float = 1.0) -> float:
    """Mean block orientation coherence scaled to [0, 100].

    Gradients are taken after light smoothing; blocks without any gradient
    energy score 0, so blank images score 0.
    """
    g = cv2.GaussianBlur(np.asarray(img.pixels, np.float32), (0, 0), sigma)
    gx = cv2.Sobel(g, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(g, cv2.CV_64F, 0, 1, ksize=3)
    h, w = g.shape
    hb, wb = max(1, h // block), max(1, w // block)
    vals = []
    for by in range(hb):
        for bx in range(wb):
            sl = (slice(by * block, (by + 1) * block), slice(bx * block, (bx + 1) * block))
            xx, yy, xy = (gx[sl] ** 2).sum(), (gy[sl] ** 2).sum(), (gx[sl] * gy[sl]).sum()
            e = xx + yy
            vals.append(np.sqrt((xx - yy) ** 2 + 4 * xy ** 2) / e if e > 1e-9 else 0.0)
    return float(np.clip(100.0 * np.mean(vals), 0.0, 100.0))


def nfiq2_binary(tool_cfg: dict | None = None) -> str | None:
    tool_cfg = tool_cfg or {}
    return tool_cfg.get("nfiq2_path") or os.environ.get("NFIQ2_BIN") or None


def run_nfiq2(binary: str, img: FingerprintImage, timeout: float = 60.0) -> float:
    """Score one image with an external NFIQ 2 executable (prints an integer)."""
    with tempfile.TemporaryDirectory() as tmp:
        path = write_image(img.with_pixels(img.pixels, resolution=500), Path(tmp) / f"{img.id}.png")
        proc = subprocess.run([binary, str(path)], capture_output=True, text=True, timeout=timeout)
    if proc.returncode != 0:
        raise RuntimeError(f"nfiq2 exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
    tokens = proc.stdout.strip().split()
    if not tokens:
        raise RuntimeError("nfiq2 produced no output")
    return float(int(tokens[-1]))


@dataclass
class QualityReport:
    scores: list
    counts: np.ndarray
    edges: np.ndarray
    source: str
    failures: dict = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([self.source, repr(float(lo)), repr(float(hi)), int(c)])
        return path


def quality_histogram(images: Sequence[FingerprintImage], tool_cfg: dict | None = None) -> QualityReport:
    """One score per image and a 20-bin histogram over [0, 100].

    With an NFIQ 2 binary configured every score comes from it; failed
    images are reported, never back-filled with the proxy.
    """
    binary = nfiq2_binary(tool_cfg)
    source = EXTERNAL_NFIQ2 if binary else INTERNAL_PROXY
    scores, failures = [], {}
    for im in images:
        if binary:
            try:
                v = run_nfiq2(binary, im)
            except (OSError, RuntimeError, ValueError, subprocess.TimeoutExpired) as exc:
                failures[im.id] = str(exc)
                logger.warning("nfiq2 failed on %s: %s", im.id, exc)
                continue
        else:
            v = proxy_quality(im)
        scores.append(QualityScore(v, source, im.id))
    counts, edges = np.histogram([s.value for s in scores], bins=N_BINS, range=(0, 100))
    return QualityReport(scores, counts, edges, source, failures)


def coherence_map(img: FingerprintImage) -> np.ndarray:
    return orientation_field(np.asarray(img.pixels))[1]
