"""Verification (ROC, TDR @ FAR) and closed-set identification (CMC) metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


def _as_scores(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise MetricError(f"{name} score list is empty")
    if not np.all(np.isfinite(a)):
        raise MetricError(f"{name} scores contain non-finite values")
    return a


def far_threshold(impostor, far: float, candidates=None) -> float:
    """Smallest candidate score t with (#impostors >= t) / n_impostor <= far.

    Candidates default to the impostor scores; returns +inf when no
    candidate qualifies.
    """
    imp = np.sort(_as_scores(impostor, "impostor"))
    cand = np.unique(imp if candidates is None else np.asarray(candidates, np.float64))
    n = imp.size
    ge = n - np.searchsorted(imp, cand, side="left")
    ok = np.flatnonzero(ge / n <= far)
    return float(cand[ok[0]]) if ok.size else float("inf")


def roc_tdr_at_far(genuine, impostor, far: float) -> float:
    """True detection rate at a false-accept rate (empirical step ROC).

    The threshold is the smallest observed score whose impostor acceptance
    rate does not exceed ``far``; TDR is the fraction of genuine scores at
    or above it.
    """
    gen = _as_scores(genuine, "genuine")
    imp = _as_scores(impostor, "impostor")
    if not 0 < far < 1:
        raise MetricError("far must lie in (0, 1)")
    t = far_threshold(imp, far, np.concatenate([gen, imp]))
    return float(np.count_nonzero(gen >= t) / gen.size)


def roc_curve(genuine, impostor) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(far, tdr, threshold) at every distinct observed score, descending threshold."""
    gen = np.sort(_as_scores(genuine, "genuine"))
    imp = np.sort(_as_scores(impostor, "impostor"))
    thr = np.unique(np.concatenate([gen, imp]))[::-1]
    far = (imp.size - np.searchsorted(imp, thr, side="left")) / imp.size
    tdr = (gen.size - np.searchsorted(gen, thr, side="left")) / gen.size
    return far, tdr, thr


def write_roc_csv(path: str | Path, genuine, impostor, label: str = "") -> Path:
    far, tdr, thr = roc_curve(genuine, impostor)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "threshold", "far", "tdr"])
        for t, f, d in zip(thr, far, tdr):
            w.writerow([label, repr(float(t)), repr(float(f)), repr(float(d))])
    return path


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Probe x gallery similarity scores with each probe's true mate."""

    probes: tuple
    gallery: tuple
    scores: np.ndarray
    mate_map: dict

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "probes", tuple(self.probes))
        object.__setattr__(self, "gallery", tuple(self.gallery))
        if s.shape != (len(self.probes), len(self.gallery)):
            raise MetricError(f"score matrix shape {s.shape} != ({len(self.probes)}, {len(self.gallery)})")
        if not np.all(np.isfinite(s)):
            raise MetricError("score matrix contains non-finite values")
        if len(set(self.gallery)) != len(self.gallery):
            raise MetricError("duplicate gallery ids")
        index = {g: i for i, g in enumerate(self.gallery)}
        for p in self.probes:
            if self.mate_map.get(p) not in index:
                raise MetricError(f"probe {p!r} has no mate in the gallery (open-set search is unsupported)")
        object.__setattr__(self, "scores", s)

    def mate_columns(self) -> np.ndarray:
        index = {g: i for i, g in enumerate(self.gallery)}
        return np.array([index[self.mate_map[p]] for p in self.probes], dtype=int)

    def genuine_impostor(self) -> tuple[np.ndarray, np.ndarray]:
        cols = self.mate_columns()
        rows = np.arange(len(self.probes))
        mask = np.zeros(self.scores.shape, bool)
        mask[rows, cols] = True
        return self.scores[mask], self.scores[~mask]


def mate_ranks(m: ScoreMatrix) -> np.ndarray:
    """1-based rank of each probe's mate; tied non-mates rank ahead of it."""
    cols = m.mate_columns()
    mate = m.scores[np.arange(len(m.probes)), cols]
    ahead = (m.scores >= mate[:, None]).sum(1) - 1
    return ahead + 1


def cmc_ranks(m: ScoreMatrix, max_rank: int | None = None) -> list[float]:
    """Cumulative match characteristic: CMC[r-1] = fraction of probes with rank <= r."""
    if max_rank is None:
        max_rank = len(m.gallery)
    if max_rank < 1:
        raise MetricError("max_rank must be >= 1")
    ranks = mate_ranks(m)
    return [float(np.count_nonzero(ranks <= r) / ranks.size) for r in range(1, max_rank + 1)]


def write_cmc_csv(path: str | Path, cmc: Sequence[float], label: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "rank", "accuracy"])
        for r, a in enumerate(cmc, 1):
            w.writerow([label, r, repr(float(a))])
    return path
