"""Style clustering of latent prints: deep/texture features + K-Means."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np

from .fpcore import DomainSet, FingerprintImage

logger = logging.getLogger(__name__)

FEATURE_DIM = 2048


class ConfigurationError(RuntimeError):
    pass


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    image_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{self.image_id}: non-finite feature values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


class FeatureExtractor(Protocol):
    name: str
    dim: int

    def __call__(self, images: Sequence[FingerprintImage]) -> np.ndarray: ...


class TextureExtractor:
    """Cheap deterministic style descriptor with a fixed 2048-d output.

    Concatenates intensity, local-contrast and gradient histograms at three
    scales, a radial power spectrum and a coarse 8x8 layout of block means
    and spreads, then lifts the result through a fixed seeded random ReLU
    layer to ``dim`` outputs.
    """

    name = "texture-2048"

    def __init__(self, dim: int = FEATURE_DIM, seed: int = 1234, size: int = 96):
        self.dim = dim
        self.size = size
        base_dim = 64 * 8 + 128
        rng = np.random.default_rng(seed)
        self._w = rng.standard_normal((base_dim, dim)) / np.sqrt(base_dim)
        self._b = rng.uniform(-0.5, 0.5, dim)

    def describe(self, pixels: np.ndarray) -> np.ndarray:
        img = cv2.resize(np.asarray(pixels, np.float32), (self.size, self.size), interpolation=cv2.INTER_AREA) / 255.0
        parts = [np.histogram(img, 64, (0, 1))[0] / img.size]
        for s in (1.0, 2.0, 4.0):
            mu = cv2.GaussianBlur(img, (0, 0), s)
            sd = np.sqrt(np.maximum(cv2.GaussianBlur(img * img, (0, 0), s) - mu * mu, 0))
            parts.append(np.histogram(sd, 64, (0, 0.5))[0] / img.size)
            gx = cv2.Sobel(mu, cv2.CV_32F, 1, 0)
            gy = cv2.Sobel(mu, cv2.CV_32F, 0, 1)
            parts.append(np.histogram(np.hypot(gx, gy), 64, (0, 2.0))[0] / img.size)
        spec = np.abs(np.fft.fftshift(np.fft.fft2(img - img.mean()))) ** 2
        yy, xx = np.indices(spec.shape)
        r = np.hypot(yy - self.size / 2, xx - self.size / 2)
        radial = np.histogram(r, 64, (0, self.size / 2), weights=spec)[0]
        parts.append(np.log1p(radial) / 10.0)
        blocks = img.reshape(8, self.size // 8, 8, self.size // 8)
        parts.append(blocks.mean(axis=(1, 3)).ravel())
        parts.append(blocks.std(axis=(1, 3)).ravel())
        return np.concatenate(parts)

    def __call__(self, images: Sequence[FingerprintImage]) -> np.ndarray:
        base = np.stack([self.describe(im.pixels) for im in images]) * 4.0
        return np.maximum(base @ self._w + self._b, 0.0)


class KerasResNet152V2Extractor:
    """Pooled 2048-d features of ImageNet ResNet152V2 (needs tensorflow + weights)."""

    name = "resnet152v2"
    dim = FEATURE_DIM

    def __init__(self, weights: str = "imagenet"):
        try:
            from tensorflow.keras.applications import resnet_v2
            self._pre = resnet_v2.preprocess_input
            self._model = resnet_v2.ResNet152V2(include_top=False, pooling="avg", weights=weights)
        except Exception as exc:
            raise ConfigurationError(
                f"feature extractor unavailable: expected backbone ResNet152V2 ({weights} weights): {exc}"
            ) from exc

    def __call__(self, images: Sequence[FingerprintImage]) -> np.ndarray:
        batch = np.stack([
            np.repeat(cv2.resize(np.asarray(im.pixels), (224, 224), interpolation=cv2.INTER_LINEAR)[..., None], 3, -1)
            for im in images
        ]).astype(np.float32)
        return np.asarray(self._model.predict(self._pre(batch), verbose=0), dtype=np.float64)


EXTRACTORS = {"texture": TextureExtractor, "resnet152v2": KerasResNet152V2Extractor}


def get_extractor(name: str, **kw) -> FeatureExtractor:
    try:
        cls = EXTRACTORS[name]
    except KeyError:
        raise ConfigurationError(f"unknown feature extractor {name!r}; choose from {sorted(EXTRACTORS)}") from None
    return cls(**kw)


def extract_features(images: Sequence[FingerprintImage], extractor: FeatureExtractor | None = None) -> list[FeatureVector]:
    if extractor is None:
        raise ConfigurationError("no feature extractor loaded (expected backbone ResNet152V2 or a 2048-d substitute)")
    if not images:
        return []
    raw = np.asarray(extractor(images), dtype=np.float64)
    if raw.shape != (len(images), extractor.dim):
        raise ConfigurationError(f"extractor {extractor.name} returned shape {raw.shape}, expected ({len(images)}, {extractor.dim})")
    return [FeatureVector(row, im.id) for row, im in zip(raw, images)]


# -- K-Means ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: dict  # image id -> cluster index
    centroids: np.ndarray  # (k, dim)
    k: int
    objective_history: tuple = field(default_factory=tuple)

    def __post_init__(self):
        counts = np.bincount(np.fromiter(self.labels.values(), int, len(self.labels)), minlength=self.k)
        if len(counts) != self.k or np.any(counts == 0):
            raise ClusteringError(f"assignment has empty clusters: sizes {counts.tolist()}")

    @property
    def sizes(self) -> list[int]:
        return np.bincount(list(self.labels.values()), minlength=self.k).tolist()

    @property
    def objective(self) -> float:
        return self.objective_history[-1] if self.objective_history else float("nan")

    def members(self, index: int) -> list[str]:
        return [i for i, c in self.labels.items() if c == index]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.maximum((x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :], 0.0)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx]).min(1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            j = int(rng.choice(n, p=d2 / total))
        else:
            remaining = np.setdiff1d(np.arange(n), idx)
            j = int(rng.choice(remaining))
        idx.append(j)
        d2 = np.minimum(d2, _sq_dists(x, x[[j]])[:, 0])
    return x[idx].copy()


def kmeans_cluster(
    features: Sequence[FeatureVector],
    k: int = 3,
    seed: int = 0,
    max_iter: int = 300,
    l2norm: bool = False,
) -> ClusterAssignment:
    """Lloyd's algorithm from a k-means++ start; stops when assignments are stable."""
    if k < 1:
        raise ClusteringError("k must be >= 1")
    if len(features) < k:
        raise ClusteringError(f"need at least k={k} feature vectors, got {len(features)}")
    x = np.stack([f.values for f in features])
    if l2norm:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(x, k, rng)
    labels = None
    history = []
    for it in range(max_iter):
        d2 = _sq_dists(x, centroids)
        new = d2.argmin(1)
        # refill empty clusters with the point farthest from its centroid
        for c in range(k):
            if not np.any(new == c):
                far = d2[np.arange(len(x)), new]
                donors = np.flatnonzero(np.bincount(new, minlength=k)[new] > 1)
                j = int(donors[np.argmax(far[donors])])
                new[j] = c
        centroids = np.stack([x[new == c].mean(0) for c in range(k)])
        history.append(float(((x - centroids[new]) ** 2).sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    logger.info("k-means: k=%d, %d iterations, objective %.4g", k, len(history), history[-1])
    return ClusterAssignment(
        {f.image_id: int(c) for f, c in zip(features, labels)}, centroids, k, tuple(history)
    )


def partition_dataset(latents: DomainSet, assignment: ClusterAssignment) -> list[DomainSet]:
    missing = [im.id for im in latents.images if im.id not in assignment.labels]
    if missing:
        raise ClusteringError(f"images missing from assignment: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    parts = [
        DomainSet(f"{latents.name}-c{c}", tuple(im for im in latents.images if assignment.labels[im.id] == c), latents.domain)
        for c in range(assignment.k)
    ]
    logger.info("cluster sizes: %s", [len(p) for p in parts])
    return parts


def export_assignment(assignment: ClusterAssignment, csv_path: str | Path, centroids_path: str | Path | None = None) -> None:
    """Write ``image_id, cluster_index`` rows and the (k x dim) centroid array (.npz)."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "cluster_index"])
        for img_id, c in assignment.labels.items():
            w.writerow([img_id, c])
    if centroids_path is None:
        centroids_path = csv_path.with_suffix(".npz")
    np.savez(centroids_path, centroids=assignment.centroids)


def load_assignment(csv_path: str | Path, centroids_path: str | Path | None = None) -> ClusterAssignment:
    csv_path = Path(csv_path)
    with open(csv_path, newline="") as fh:
        labels = {row["image_id"]: int(row["cluster_index"]) for row in csv.DictReader(fh)}
    centroids_path = Path(centroids_path) if centroids_path else csv_path.with_suffix(".npz")
    centroids = np.load(centroids_path)["centroids"]
    return ClusterAssignment(labels, centroids, centroids.shape[0])
