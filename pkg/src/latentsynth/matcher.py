"""Desk-scale embedding matcher, fine-tuning harness and score fusion.

The network is a small CNN identity classifier with a 192-d L2-normalized
bottleneck.  An optional spatial-transformer head warps the input before
embedding; its reconstruction loss (undoing the training-time geometric
augmentation) is weighted by ``alignment_weight``.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .fpcore import LATENT, FingerprintImage, MatedPair
from .imgproc import apply_augmentation, sample_augment_params, to_canonical

logger = logging.getLogger(__name__)

EMBED_DIM = 192
GENUINE, IMPOSTOR, UNKNOWN = "genuine", "impostor", "unknown"

# localization hyper-parameter values of the reference protocol
ALIGNMENT_PRESETS = {"DeepPrint": 0.035, "DeepPrint1": 0.018, "DeepPrint2": 0.018, "DeepPrint3": 0.007}


class MatcherError(ValueError):
    pass


class DegenerateRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MatcherConfig:
    alignment_weight: float = 0.035
    embedding_dim: int = EMBED_DIM
    input_size: int = 96
    channels: tuple = (16, 32, 64, 128)
    use_alignment: bool = True
    epochs: int = 12
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-4
    samples_per_identity: int = 4
    margin: float = 0.2
    scale: float = 16.0
    max_translate_px: float = 100.0
    max_rotate_deg: float = 15.0
    native_size: int = 512
    noise_std: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.alignment_weight < 0:
            raise MatcherError("alignment_weight must be >= 0")
        object.__setattr__(self, "channels", tuple(self.channels))

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    image_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        n = np.linalg.norm(v)
        if abs(n - 1.0) > 1e-6:
            raise MatcherError(f"{self.image_id}: embedding norm {n} is not 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    probe_id: str
    gallery_id: str
    label: str = UNKNOWN


class AlignmentHead(nn.Module):
    """Predicts a bounded rotation + translation and resamples the input."""

    max_angle = math.radians(15.0)
    max_shift = 0.3

    def __init__(self, size: int):
        super().__init__()
        self.loc = nn.Sequential(
            nn.AvgPool2d(2),
            nn.Conv2d(1, 8, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(4), nn.Flatten(),
            nn.Linear(16 * 16, 32), nn.ReLU(),
            nn.Linear(32, 3),
        )
        nn.init.zeros_(self.loc[-1].weight)
        nn.init.zeros_(self.loc[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = torch.tanh(self.loc(x))
        a = p[:, 0] * self.max_angle
        cos, sin = torch.cos(a), torch.sin(a)
        theta = torch.stack([
            torch.stack([cos, -sin, p[:, 1] * self.max_shift], 1),
            torch.stack([sin, cos, p[:, 2] * self.max_shift], 1),
        ], 1)
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        # input is ink density (white = 0) so zero padding means paper
        return F.grid_sample(x, grid, padding_mode="zeros", align_corners=False)


class EmbeddingNet(nn.Module):
    def __init__(self, cfg: MatcherConfig):
        super().__init__()
        self.align = AlignmentHead(cfg.input_size) if cfg.use_alignment else None
        layers = []
        ch = 1
        for i, c in enumerate(cfg.channels):
            k = 5 if i == 0 else 3
            layers += [nn.Conv2d(ch, c, k, stride=2, padding=k // 2, bias=False), nn.BatchNorm2d(c), nn.ReLU()]
            ch = c
        self.features = nn.Sequential(*layers)
        side = cfg.input_size
        for _ in cfg.channels:
            side = (side + 1) // 2
        self.embed = nn.Sequential(nn.Flatten(), nn.Dropout(0.2), nn.Linear(ch * side * side, cfg.embedding_dim))

    def forward(self, x: torch.Tensor, return_aligned: bool = False):
        aligned = self.align(x) if self.align is not None else x
        e = F.normalize(self.embed(self.features(aligned)), dim=1)
        return (e, aligned) if return_aligned else e


@dataclass
class MatcherHandle:
    name: str
    net: EmbeddingNet
    config: MatcherConfig
    history: list = field(default_factory=list)

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), d / "weights.pt")
        (d / "config.json").write_text(json.dumps({"name": self.name, "config": self.config.as_dict()}, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> MatcherHandle:
        d = Path(directory)
        meta = json.loads((d / "config.json").read_text())
        cfg = MatcherConfig(**meta["config"])
        net = EmbeddingNet(cfg)
        net.load_state_dict(torch.load(d / "weights.pt", map_location="cpu", weights_only=True))
        net.eval()
        return cls(meta["name"], net, cfg)


def _ink(pixels: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(p, np.float32) for p in pixels])[:, None]
    return torch.from_numpy((255.0 - arr) / 255.0)


def _prepare(img: FingerprintImage, size: int) -> np.ndarray:
    if img.pixels.shape != (size, size):
        img = to_canonical(img, size)
    return np.asarray(img.pixels)


@torch.no_grad()
def embed_batch(model: MatcherHandle, images: Sequence[FingerprintImage], batch_size: int = 64) -> list[EmbeddingVector]:
    model.net.eval()
    out = []
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size]
        e = model.net(_ink([_prepare(im, model.config.input_size) for im in chunk])).double()
        e = F.normalize(e, dim=1).numpy()
        out += [EmbeddingVector(v, im.id) for v, im in zip(e, chunk)]
    return out


def embed(model: MatcherHandle, img: FingerprintImage) -> EmbeddingVector:
    return embed_batch(model, [img])[0]


def match_score(a: EmbeddingVector, b: EmbeddingVector, label: str = UNKNOWN) -> SimilarityScore:
    """Cosine similarity of two unit embeddings."""
    v = float(np.clip(np.dot(a.values, b.values), -1.0, 1.0))
    return SimilarityScore(v, a.image_id, b.image_id, label)


def score_matrix(probes: Sequence[EmbeddingVector], gallery: Sequence[EmbeddingVector]) -> np.ndarray:
    p = np.stack([e.values for e in probes])
    g = np.stack([e.values for e in gallery])
    return np.clip(p @ g.T, -1.0, 1.0)


# -- training -----------------------------------------------------------------------


def _cosface_logits(emb: torch.Tensor, weight: torch.Tensor, labels: torch.Tensor, margin: float, scale: float) -> torch.Tensor:
    cos = emb @ F.normalize(weight, dim=1).T
    return scale * (cos - margin * F.one_hot(labels, weight.shape[0]).to(cos.dtype))


def _train(net: EmbeddingNet, samples: list[tuple[np.ndarray, int]], n_classes: int, cfg: MatcherConfig,
           init_weight: torch.Tensor | None = None) -> list[dict]:
    """Identity-classification training over (pixels, label) samples."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    weight = nn.Parameter(init_weight.clone() if init_weight is not None else torch.randn(n_classes, cfg.embedding_dim))
    opt = torch.optim.Adam(list(net.parameters()) + [weight], lr=cfg.lr, weight_decay=cfg.weight_decay)
    scale = cfg.input_size / cfg.native_size
    history = []
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = np.concatenate([rng.permutation(len(samples)) for _ in range(cfg.samples_per_identity)])
        total, n = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            clean, warped, labels = [], [], []
            for j in idx:
                px, lab = samples[j]
                p = sample_augment_params(rng, cfg.max_translate_px, cfg.max_rotate_deg, scale)
                w = np.asarray(apply_augmentation(FingerprintImage(px, "s"), p).pixels, np.float32)
                w = np.clip(w + rng.normal(0, cfg.noise_std, w.shape), 0, 255)
                clean.append(px)
                warped.append(w)
                labels.append(lab)
            x = _ink(warped)
            y = torch.as_tensor(labels)
            emb, aligned = net(x, return_aligned=True)
            loss = F.cross_entropy(_cosface_logits(emb, weight, y, cfg.margin, cfg.scale), y)
            if net.align is not None and cfg.alignment_weight > 0:
                loss = loss + cfg.alignment_weight * 100.0 * F.mse_loss(aligned, _ink(clean))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            n += len(idx)
        history.append({"epoch": epoch, "loss": total / n})
        logger.info("matcher epoch %d loss %.4f", epoch, total / n)
    net.eval()
    return history


def pretrain(
    images_by_identity: dict[str, Sequence[FingerprintImage]],
    cfg: MatcherConfig = MatcherConfig(),
    name: str = "DeepPrint",
) -> MatcherHandle:
    """Train a fresh matcher from identity-labelled (typically rolled-only) images."""
    idents = sorted(images_by_identity)
    if not idents:
        raise MatcherError("no identities to train on")
    samples = [
        (_prepare(im, cfg.input_size), k) for k, ident in enumerate(idents) for im in images_by_identity[ident]
    ]
    torch.manual_seed(cfg.seed)
    net = EmbeddingNet(cfg)
    history = _train(net, samples, len(idents), cfg)
    return MatcherHandle(name, net, cfg, history)


@torch.no_grad()
def _imprint(net: EmbeddingNet, samples, n_classes: int, dim: int) -> torch.Tensor:
    net.eval()
    w = torch.zeros(n_classes, dim)
    for px, lab in samples:
        w[lab] += net(_ink([px]))[0]
    return F.normalize(w, dim=1)


def finetune(
    base: MatcherHandle,
    pairs: Sequence[MatedPair],
    cfg: MatcherConfig | None = None,
    name: str | None = None,
) -> MatcherHandle:
    """Fine-tune a copy of ``base`` on rolled + latent impressions of mated pairs.

    Synthetic latents share the rolled print's frame and need no alignment;
    real latent pairs must be marked ``aligned``.
    """
    cfg = cfg or base.config
    if (cfg.embedding_dim, cfg.input_size, cfg.channels, cfg.use_alignment) != (
        base.config.embedding_dim, base.config.input_size, base.config.channels, base.config.use_alignment
    ):
        raise MatcherError("fine-tune config changes the network architecture")
    for p in pairs:
        if not p.identity:
            raise MatcherError(f"pair with unknown identity (latent {p.latent.id!r})")
        if p.latent_kind == LATENT and not p.aligned:
            raise MatcherError(f"real latent {p.latent.id!r} is not pre-aligned to its rolled mate")
    net = copy.deepcopy(base.net)
    handle = MatcherHandle(name or f"{base.name}-ft", net, cfg)
    if cfg.epochs == 0 or not pairs:
        net.eval()
        return handle
    idents = sorted({p.identity for p in pairs})
    index = {ident: k for k, ident in enumerate(idents)}
    samples = []
    seen_rolled = set()
    for p in pairs:
        if p.rolled.id not in seen_rolled:
            samples.append((_prepare(p.rolled, cfg.input_size), index[p.identity]))
            seen_rolled.add(p.rolled.id)
        samples.append((_prepare(p.latent, cfg.input_size), index[p.identity]))
    init_w = _imprint(net, samples, len(idents), cfg.embedding_dim)
    handle.history = _train(net, samples, len(idents), cfg, init_weight=init_w)
    return handle


# -- normalization and fusion --------------------------------------------------------


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        warnings.warn("degenerate score range: all scores equal, normalized to 0", DegenerateRangeWarning, stacklevel=3)
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def minmax_normalize(scores: Sequence[SimilarityScore], scope: str = "global") -> list[SimilarityScore]:
    """Min-max scale one model's scores to [0, 1] (whole run, or per probe)."""
    if not scores:
        return []
    vals = np.array([s.value for s in scores], dtype=np.float64)
    if scope == "global":
        norm = _minmax(vals)
    elif scope == "per-probe":
        norm = np.empty_like(vals)
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(scores):
            groups.setdefault(s.probe_id, []).append(i)
        for idx in groups.values():
            norm[idx] = _minmax(vals[idx])
    else:
        raise MatcherError(f"unknown normalization scope {scope!r}")
    return [replace(s, value=float(v)) for s, v in zip(scores, norm)]


def minmax_matrix(scores: np.ndarray, scope: str = "global") -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if scope == "global":
        return _minmax(s.ravel()).reshape(s.shape)
    if scope == "per-probe":
        return np.stack([_minmax(row) for row in s])
    raise MatcherError(f"unknown normalization scope {scope!r}")


def fuse_scores(ns2: SimilarityScore, ns3: SimilarityScore) -> SimilarityScore:
    """Mean of two normalized scores for the same (probe, gallery) comparison."""
    if (ns2.probe_id, ns2.gallery_id) != (ns3.probe_id, ns3.gallery_id):
        raise MatcherError(f"cannot fuse scores of different comparisons: {(ns2.probe_id, ns2.gallery_id)} vs {(ns3.probe_id, ns3.gallery_id)}")
    if ns2.label != ns3.label:
        raise MatcherError(f"label mismatch for {(ns2.probe_id, ns2.gallery_id)}: {ns2.label} vs {ns3.label}")
    return SimilarityScore((ns2.value + ns3.value) / 2, ns2.probe_id, ns2.gallery_id, ns2.label)


# -- score files ----------------------------------------------------------------------

SCORE_COLUMNS = ("probe_id", "gallery_id", "model_id", "raw_score", "norm_score", "label")


def write_scores(path: str | Path, raw: Sequence[SimilarityScore], model_id: str,
                 norm: Sequence[SimilarityScore] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    norm = norm if norm is not None else minmax_normalize(raw)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r, n in zip(raw, norm):
            w.writerow([r.probe_id, r.gallery_id, model_id, repr(float(r.value)), repr(float(n.value)), r.label])
    return path


def read_scores(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_COLUMNS:
            raise MatcherError(f"{path}: expected columns {SCORE_COLUMNS}, got {reader.fieldnames}")
        rows = []
        for lineno, row in enumerate(reader, 2):
            try:
                row["raw_score"] = float(row["raw_score"])
                row["norm_score"] = float(row["norm_score"])
            except ValueError:
                raise MatcherError(f"{path}:{lineno}: non-numeric score") from None
            rows.append(row)
    return rows
