"""Desk-scale data-augmentation experiment for the embedding matcher.

A baseline matcher is trained on clean rolled prints only. Two variants are
fine-tuned on (rolled, synthetic latent) pairs from the Bad and Ugly style
models with different alignment weights, and their min-max normalized scores
are fused by averaging. All four are searched 1:N with degraded latent probes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .corpora import LATENT_STYLES, _seed_for, latent_impression, make_identities, make_records
from .evalkit.identification import build_gallery
from .evalkit.metrics import ScoreMatrix, cmc_ranks
from .fpcore import FingerRecord, MatedPair, QualityTier, SYNTHETIC
from .matcher import ALIGNMENT_PRESETS, MatcherConfig, embed_batch, finetune, minmax_matrix, pretrain, score_matrix
from .pipeline import as_translator

logger = logging.getLogger(__name__)

BASELINE, DP2, DP3, FUSED = "DeepPrint", "DeepPrint2", "DeepPrint3", "DeepPrint4"


@dataclass
class ExperimentScale:
    image_size: int = 96
    n_pretrain: int = 120
    n_synth: int = 60
    n_test: int = 20
    n_background: int = 200
    probe_styles: tuple = ("good", "bad", "ugly")
    pretrain_epochs: int = 12
    finetune_epochs: int = 12


@dataclass
class ExperimentCorpus:
    pretrain: list
    synth: list
    test: list
    background: list
    probes: list
    probe_identities: list


@dataclass
class AugmentationResult:
    seed: int
    rank1: dict
    cmc: dict = field(default_factory=dict)

    @property
    def finetune_ok(self) -> bool:
        base = self.rank1[BASELINE]
        return self.rank1[DP2] >= base and self.rank1[DP3] >= base

    @property
    def fusion_ok(self) -> bool:
        return self.rank1[FUSED] >= max(self.rank1[DP2], self.rank1[DP3])

    @property
    def direction_ok(self) -> bool:
        return self.finetune_ok and self.fusion_ok

    def summary(self) -> str:
        r = ", ".join(f"{k} {100 * v:.1f}%" for k, v in self.rank1.items())
        return f"seed {self.seed}: Rank-1 {r}; direction {'ok' if self.direction_ok else 'violated'}"


def build_corpus(seed: int, scale: ExperimentScale = ExperimentScale()) -> ExperimentCorpus:
    """Four disjoint identity sets plus degraded probes of the test identities."""
    size = scale.image_size

    def records(prefix, n, salt):
        s = _seed_for(seed, salt, 31)
        return make_records(make_identities(n, s, prefix=prefix, size=size), s, rolled_per_finger=2)

    pre = records("p", scale.n_pretrain, 1)
    syn = records("s", scale.n_synth, 2)
    test = records("t", scale.n_test, 3)
    bg = records("b", scale.n_background, 4)
    test_masters = make_identities(scale.n_test, _seed_for(seed, 3, 31), prefix="t", size=size)
    probes = []
    for i, m in enumerate(test_masters):
        style = LATENT_STYLES[scale.probe_styles[i % len(scale.probe_styles)]]
        probes.append(latent_impression(m, style, np.random.default_rng(_seed_for(seed, i, 37))))
    return ExperimentCorpus(pre, syn, test, bg, probes, [m.identity for m in test_masters])


def synthetic_pairs(models: Sequence, tiers: dict, records: Sequence[FingerRecord], keep=(QualityTier.BAD, QualityTier.UGLY), rolled_index: int = 1) -> list[MatedPair]:
    """(first rolled print, synthetic latent from another acquisition) pairs from the kept tiers."""
    pairs = []
    for m in models:
        t = as_translator(m)
        if tiers.get(t.model_id) not in keep:
            continue
        sources = [r.rolled[rolled_index] for r in records]
        for rec, syn in zip(records, t.synthesize(sources)):
            syn = syn.with_pixels(syn.pixels, id=f"{rec.identity}_syn-{t.model_id}")
            pairs.append(MatedPair(rec.identity, rec.rolled[0], syn, SYNTHETIC))
    if not pairs:
        raise ValueError("no style model carries a kept tier")
    return pairs


def _search(matrix: np.ndarray, probes, probe_identities, gallery, owner) -> ScoreMatrix:
    by_identity = {ident: gid for gid, ident in owner.items()}
    mate_map = {p.id: by_identity[i] for p, i in zip(probes, probe_identities)}
    return ScoreMatrix(tuple(p.id for p in probes), tuple(g.id for g in gallery), matrix, mate_map)


def augmentation_experiment(
    models: Sequence,
    tiers: dict,
    seed: int = 0,
    scale: ExperimentScale = ExperimentScale(),
    fusion_scope: str = "global",
) -> AugmentationResult:
    corpus = build_corpus(seed, scale)
    base_cfg = MatcherConfig(alignment_weight=ALIGNMENT_PRESETS[BASELINE], input_size=scale.image_size,
                             epochs=scale.pretrain_epochs, seed=seed)
    baseline = pretrain({r.identity: r.rolled for r in corpus.pretrain}, base_cfg, BASELINE)
    pairs = synthetic_pairs(models, tiers, corpus.synth)
    tuned = {}
    for name in (DP2, DP3):
        cfg = replace(base_cfg, alignment_weight=ALIGNMENT_PRESETS[name], epochs=scale.finetune_epochs, seed=seed + 1)
        tuned[name] = finetune(baseline, pairs, cfg, name)

    gallery, owner = build_gallery(corpus.test, corpus.background)
    raw = {}
    for name, h in ((BASELINE, baseline), *tuned.items()):
        raw[name] = score_matrix(embed_batch(h, corpus.probes), embed_batch(h, gallery))
    raw[FUSED] = (minmax_matrix(raw[DP2], fusion_scope) + minmax_matrix(raw[DP3], fusion_scope)) / 2.0
    rank1, cmc = {}, {}
    for name, s in raw.items():
        curve = cmc_ranks(_search(s, corpus.probes, corpus.probe_identities, gallery, owner), max_rank=20)
        rank1[name], cmc[name] = curve[0], curve
    result = AugmentationResult(seed, rank1, cmc)
    logger.info(result.summary())
    return result
