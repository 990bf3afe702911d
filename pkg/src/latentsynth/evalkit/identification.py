"""Closed-set 1:N search of probes against mates plus a background gallery."""

from __future__ import annotations

from typing import Sequence

from ..fpcore import FingerprintImage, FingerRecord
from ..matcher import MatcherHandle, embed_batch, score_matrix
from .metrics import MetricError, ScoreMatrix


def build_gallery(mates: Sequence[FingerRecord], background: Sequence[FingerRecord]) -> tuple[list[FingerprintImage], dict[str, str]]:
    """Gallery images (first rolled print per finger) and gallery id -> identity."""
    mate_ids = {r.identity for r in mates}
    clash = sorted(mate_ids & {r.identity for r in background})
    if clash:
        raise MetricError(f"identity collision between mates and background: {clash[:5]}")
    gallery, owner = [], {}
    for rec in list(mates) + list(background):
        rolled = rec.rolled
        if not rolled:
            raise MetricError(f"record {rec.identity!r} has no rolled print for the gallery")
        im = rolled[0]
        if im.id in owner:
            continue
        gallery.append(im)
        owner[im.id] = rec.identity
    return gallery, owner


def identify_1toN(
    probes: Sequence[FingerprintImage],
    probe_identities: Sequence[str],
    mates: Sequence[FingerRecord],
    background: Sequence[FingerRecord],
    matcher: MatcherHandle,
) -> ScoreMatrix:
    """Score every probe against every gallery print with ``matcher``."""
    gallery, owner = build_gallery(mates, background)
    by_identity = {ident: gid for gid, ident in owner.items()}
    mate_map = {}
    for p, ident in zip(probes, probe_identities):
        if ident not in by_identity:
            raise MetricError(f"probe {p.id!r}: identity {ident!r} has no mate in the gallery")
        mate_map[p.id] = by_identity[ident]
    pe = embed_batch(matcher, list(probes))
    ge = embed_batch(matcher, gallery)
    return ScoreMatrix(tuple(p.id for p in probes), tuple(g.id for g in gallery), score_matrix(pe, ge), mate_map)
