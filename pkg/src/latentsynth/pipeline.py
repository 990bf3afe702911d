"""End-to-end latent synthesis: coarse model, style clusters, fine-tuned style
models, batch synthesis with provenance, and Good/Bad/Ugly tiering."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np

from . import config as config_mod
from .corpora import LATENT_STYLES, _seed_for, blur_occlude, latent_impression, make_identities, make_records
from .cyclegan import StyleModel, TrainConfig, train_stage, translate_batch
from .evalkit.metrics import roc_tdr_at_far, write_roc_csv
from .evalkit.minutiae import count_minutiae, minutiae_tier_stats
from .evalkit.quality import quality_histogram
from .fpcore import (
    LATENT, ROLLED, DomainSet, FingerprintImage, FingerRecord, Layout, ManifestEntry, MatedPair, QualityTier,
    SynthesisManifest, domain_from_records, load_dataset, write_image, write_manifest,
)
from .imgproc import AugmentParams, apply_augmentation, clahe, sample_augment_params, to_canonical, warp_array
from .matcher import MatcherHandle, embed_batch, score_matrix
from .stylecluster import (
    ClusterAssignment, FeatureExtractor, export_assignment, extract_features, get_extractor, kmeans_cluster,
    partition_dataset,
)

logger = logging.getLogger(__name__)

TIER_ORDER = (QualityTier.GOOD, QualityTier.BAD, QualityTier.UGLY)


class PipelineError(RuntimeError):
    pass


class Translator(Protocol):
    model_id: str
    cluster_index: int | str

    def synthesize(self, images: Sequence[FingerprintImage]) -> list[FingerprintImage]: ...


@dataclass
class StyleTranslator:
    """Adapter giving a trained StyleModel the Translator interface."""

    model: StyleModel

    @property
    def model_id(self) -> str:
        return self.model.model_id

    @property
    def cluster_index(self):
        return self.model.cluster_index

    def synthesize(self, images):
        return translate_batch(self.model, list(images))


@dataclass
class DegradationModel:
    """Controlled-degradation translator: Gaussian blur plus occlusion."""

    model_id: str
    sigma: float
    occlusion: float
    seed: int = 0
    cluster_index: int | str = -1

    def synthesize(self, images):
        out = []
        for im in images:
            rng = np.random.default_rng([self.seed, *im.id.encode()])
            out.append(blur_occlude(im, self.sigma, self.occlusion, rng))
        return out


def as_translator(m) -> Translator:
    return StyleTranslator(m) if isinstance(m, StyleModel) else m


# -- similarity backends used for tiering ------------------------------------------------


class CorrelationMatcher:
    """Training-free matcher: best normalized cross-correlation of band-passed
    images over small shifts and rotations of the gallery print.

    Suited to synthetic latents, which keep the frame of their source print.
    """

    name = "correlation"

    def __init__(self, max_shift: int = 8, angles=(-8.0, -4.0, 0.0, 4.0, 8.0), blur: float = 0.8, background: float = 2.5):
        self.max_shift = max_shift
        self.angles = tuple(float(a) for a in angles)
        self.blur = blur
        self.background = background

    def _prep(self, pixels: np.ndarray) -> np.ndarray:
        # difference of Gaussians around the ridge band; drops the finger silhouette
        g = np.asarray(pixels, np.float32)
        return cv2.GaussianBlur(g, (0, 0), self.blur) - cv2.GaussianBlur(g, (0, 0), self.background)

    def similarity(self, probes: Sequence[FingerprintImage], gallery: Sequence[FingerprintImage]) -> np.ndarray:
        s = self.max_shift
        views = [
            [self._prep(warp_array(np.asarray(g.pixels), AugmentParams(0.0, 0.0, a))) for a in self.angles]
            for g in gallery
        ]
        out = np.zeros((len(probes), len(gallery)))
        for i, p in enumerate(probes):
            tpl = self._prep(p.pixels)[s:-s, s:-s]
            if tpl.std() < 1e-6:
                continue
            for j, vs in enumerate(views):
                out[i, j] = max(float(cv2.matchTemplate(v, tpl, cv2.TM_CCOEFF_NORMED).max()) for v in vs)
        return np.nan_to_num(out)


def similarity_matrix(matcher, probes: Sequence[FingerprintImage], gallery: Sequence[FingerprintImage]) -> np.ndarray:
    if isinstance(matcher, MatcherHandle):
        return score_matrix(embed_batch(matcher, list(probes)), embed_batch(matcher, list(gallery)))
    if hasattr(matcher, "similarity"):
        return np.asarray(matcher.similarity(probes, gallery), dtype=np.float64)
    if callable(matcher):
        return np.asarray(matcher(probes, gallery), dtype=np.float64)
    raise PipelineError(f"unsupported matcher {matcher!r}")


# -- stages ------------------------------------------------------------------------------------


def _canonical_domain(d: DomainSet, size: int) -> DomainSet:
    return DomainSet(d.name, tuple(to_canonical(im, size) for im in d.images), d.domain)


def run_first_stage(rolled: DomainSet, latents: DomainSet, cfg: TrainConfig, out_dir: str | Path | None = None, **kw) -> StyleModel:
    """Coarse rolled -> latent model on all latents."""
    if len(rolled) == 0 or len(latents) == 0:
        raise PipelineError(f"first stage needs non-empty domains (rolled={len(rolled)}, latent={len(latents)})")
    out = Path(out_dir) / "coarse" if out_dir is not None else None
    return train_stage(rolled, latents, cfg, model_id="coarse", cluster_index="coarse", out_dir=out, **kw)


def cluster_latents(latents: DomainSet, k: int, extractor: FeatureExtractor | None = None, seed: int = 0, l2norm: bool = False) -> ClusterAssignment:
    extractor = extractor or get_extractor("texture")
    feats = extract_features(list(latents.images), extractor)
    return kmeans_cluster(feats, k, seed=seed, l2norm=l2norm)


def run_second_stage(
    coarse: StyleModel,
    rolled: DomainSet,
    latents: DomainSet,
    k: int,
    cfg: TrainConfig,
    extractor: FeatureExtractor | None = None,
    assignment: ClusterAssignment | None = None,
    finetune_max_epochs: int | None = None,
    out_dir: str | Path | None = None,
) -> list[StyleModel]:
    """Cluster the latents and fine-tune one copy of ``coarse`` per cluster."""
    if k < 1:
        raise PipelineError("k must be >= 1")
    if assignment is None:
        assignment = cluster_latents(latents, k, extractor, seed=cfg.seed)
    if assignment.k != k:
        raise PipelineError(f"assignment has k={assignment.k}, expected {k}")
    parts = partition_dataset(latents, assignment)
    epochs = finetune_max_epochs or max(1, cfg.max_epochs // 2)
    models = []
    for c, part in enumerate(parts):
        if len(part) == 0:
            raise PipelineError(f"cluster {c} is empty")
        bs = cfg.batch_size
        if len(part) < bs:
            logger.warning("cluster %d has %d latents (< batch size %d); clamping batch size", c, len(part), bs)
            bs = len(part)
        if len(part) < 10:
            logger.warning("cluster %d is small (%d latents); fine-tuning may not converge well", c, len(part))
        ft_cfg = replace(cfg, max_epochs=epochs, batch_size=bs, seed=cfg.seed + 1 + c)
        out = Path(out_dir) / f"style-c{c}" if out_dir is not None else None
        models.append(train_stage(rolled, part, ft_cfg, init=coarse, model_id=f"style-c{c}", cluster_index=c, out_dir=out))
    return models


def _synthetic_id(identity: str, model_id: str) -> str:
    return f"{identity}_syn-{model_id}"


def synthesize_set(
    models: Sequence,
    rolled: Sequence[FingerRecord],
    per_model: int | Sequence[int] | None = None,
    seed: int = 0,
    rolled_index: int = 0,
    augment: dict | None = None,
    tiers: dict | None = None,
) -> tuple[dict[str, FingerprintImage], SynthesisManifest]:
    """Translate rolled prints with every model; one manifest entry per output.

    ``per_model`` limits how many rolled prints each model translates (a
    seeded selection); ``None`` translates every print with every model.
    """
    translators = [as_translator(m) for m in models]
    if not translators:
        raise PipelineError("no style models given")
    sources = []
    for rec in rolled:
        prints = rec.rolled
        if len(prints) <= rolled_index:
            raise PipelineError(f"record {rec.identity!r} has no rolled print #{rolled_index}")
        sources.append((rec.identity, prints[rolled_index]))
    rng = np.random.default_rng(seed)
    if per_model is None:
        counts = [len(sources)] * len(translators)
    elif isinstance(per_model, int):
        counts = [per_model] * len(translators)
    else:
        counts = list(per_model)
        if len(counts) != len(translators):
            raise PipelineError("per_model counts must match the number of models")
    images: dict[str, FingerprintImage] = {}
    entries = []
    for t, n in zip(translators, counts):
        n = min(n, len(sources))
        chosen = sorted(rng.permutation(len(sources))[:n].tolist())
        batch = [sources[i] for i in chosen]
        outs = t.synthesize([im for _, im in batch]) if batch else []
        for (identity, src), out in zip(batch, outs):
            sid = _synthetic_id(identity, t.model_id)
            entry_seed = _seed_for(seed, len(entries), 7) % (2 ** 31)
            aug = {}
            if augment:
                p = sample_augment_params(entry_seed, augment.get("max_translate_px", 0.0),
                                          augment.get("max_rotate_deg", 0.0), augment.get("translate_scale", 1.0))
                out = apply_augmentation(out, p)
                aug = p.as_dict()
            images[sid] = out.with_pixels(out.pixels, id=sid)
            tier = (tiers or {}).get(t.model_id)
            entries.append(ManifestEntry(sid, src.id, t.model_id, t.cluster_index, tier, int(entry_seed), aug))
    entries.sort(key=lambda e: (e.source_rolled_id, e.model_id))
    return images, SynthesisManifest(tuple(entries))


@dataclass
class TierResult:
    tiers: dict
    tdr: dict
    mean_genuine: dict
    genuine: dict = field(default_factory=dict)
    impostor: dict = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model_id", "tier", "tdr", "mean_genuine"])
            for mid in sorted(self.tiers, key=lambda m: -self.tiers[m].rank):
                w.writerow([mid, self.tiers[mid].value, repr(self.tdr[mid]), repr(self.mean_genuine[mid])])
        return path


def assign_tiers(models: Sequence, eval_pairs: Sequence[MatedPair], matcher=None, far: float = 0.001) -> TierResult:
    """Rank three style models by TDR @ FAR of their synthetic latents.

    For each eval pair the ``latent`` slot holds the print to synthesize
    from and ``rolled`` the gallery mate (they may be the same image).
    Highest TDR is Good, lowest Ugly; ties fall back to mean genuine score,
    then model id.
    """
    if len(models) != 3:
        raise PipelineError(f"tier assignment needs exactly 3 models, got {len(models)}")
    if not eval_pairs:
        raise PipelineError("tier assignment needs evaluation pairs")
    matcher = matcher if matcher is not None else CorrelationMatcher()
    translators = [as_translator(m) for m in models]
    mates = [p.rolled for p in eval_pairs]
    idents = [p.identity for p in eval_pairs]
    same = np.array([[a == b for b in idents] for a in idents])
    tdr, mean_gen, gen_d, imp_d = {}, {}, {}, {}
    for t in translators:
        synth = t.synthesize([p.latent for p in eval_pairs])
        s = similarity_matrix(matcher, synth, mates)
        gen, imp = s[same], s[~same]
        if imp.size == 0:
            raise PipelineError("tier assignment needs at least two identities for impostor scores")
        tdr[t.model_id] = roc_tdr_at_far(gen, imp, far)
        mean_gen[t.model_id] = float(gen.mean())
        gen_d[t.model_id], imp_d[t.model_id] = gen, imp
    order = sorted(tdr, key=lambda m: (-tdr[m], -mean_gen[m], m))
    tiers = dict(zip(order, TIER_ORDER))
    logger.info("tiers: %s", {m: (tiers[m].value, tdr[m]) for m in order})
    return TierResult(tiers, tdr, mean_gen, gen_d, imp_d)


# -- procedural corpora for runs ---------------------------------------------------------------------


@dataclass
class RunData:
    rolled_domain: DomainSet
    latent_domain: DomainSet
    synth_records: list  # FingerRecords with >= 2 rolled acquisitions


def procedural_data(cfg: dict) -> RunData:
    d = cfg["data"]
    size, seed = d["image_size"], d["seed"]
    masters = make_identities(d["n_rolled"], seed, prefix="r", size=size)
    records = make_records(masters, seed, rolled_per_finger=2)
    rolled = DomainSet("rolled", tuple(r.rolled[0] for r in records), ROLLED)
    lat_masters = make_identities(d["n_latent"], seed + 7919, prefix="l", size=size)
    styles = d["latent_styles"]
    lats = []
    for i, m in enumerate(lat_masters):
        rng = np.random.default_rng(_seed_for(seed, i, 11))
        lats.append(latent_impression(m, LATENT_STYLES[styles[i % len(styles)]], rng))
    n_syn = min(cfg["synthesis"]["n_identities"], len(records))
    return RunData(rolled, DomainSet("latent", tuple(lats), LATENT), records[:n_syn])


def directory_data(cfg: dict) -> RunData:
    layout = Layout.from_config(cfg["layout"])
    rolled_recs = load_dataset(cfg["data"]["rolled_dir"], layout)
    latent_recs = load_dataset(cfg["data"]["latent_dir"], layout) if cfg["data"]["latent_dir"] else rolled_recs
    rolled = domain_from_records(rolled_recs, ROLLED, "rolled")
    latents = domain_from_records(latent_recs, LATENT, "latent")
    return RunData(rolled, latents, list(rolled_recs))


def load_run_data(cfg: dict) -> RunData:
    src = cfg["data"]["source"]
    if src == "procedural":
        data = procedural_data(cfg)
    elif src == "directory":
        data = directory_data(cfg)
    else:
        raise PipelineError(f"unknown data.source {src!r}")
    size = cfg["img"]["train_size"]
    lat = data.latent_domain
    if cfg["img"]["apply_clahe"]:
        c = cfg["img"]["clahe"]
        lat = DomainSet(lat.name, tuple(clahe(im, c["clip"], c["tiles"]) for im in lat.images), lat.domain)
    return RunData(_canonical_domain(data.rolled_domain, size), _canonical_domain(lat, size), data.synth_records)


def canonical_records(records: Sequence[FingerRecord], size: int) -> list[FingerRecord]:
    from .fpcore import Impression
    return [
        FingerRecord(r.identity, tuple(Impression(to_canonical(i.image, size), i.kind) for i in r.impressions))
        for r in records
    ]


# -- run directory -------------------------------------------------------------------------------------


class EventLog:
    """Line-delimited JSON events under ``logs/events.jsonl``."""

    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, event: str, **fields) -> None:
        if self.path is None:
            return
        rec = {"time": round(time.time(), 3), "event": event, **fields}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")


def tier_matcher(cfg: dict):
    name = cfg["tiering"]["matcher"]
    if name == "correlation":
        return CorrelationMatcher()
    return MatcherHandle.load(name)


@dataclass
class PipelineResult:
    run_dir: Path | None
    coarse: StyleModel
    models: list
    assignment: ClusterAssignment
    images: dict
    manifest: SynthesisManifest
    tiers: TierResult | None = None
    records: list = field(default_factory=list)


def run_pipeline(cfg: dict, run_dir: str | Path | None = None, seed: int | None = None) -> PipelineResult:
    """Both stages, synthesis, tiering (k == 3) and summary metrics."""
    if seed is not None:
        cfg = config_mod.apply_override(cfg, f"data.seed={int(seed)}")
    run_dir = Path(run_dir) if run_dir is not None else None
    log = EventLog(run_dir / "logs" / "events.jsonl" if run_dir else None)
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(config_mod.dumps(cfg))
    data = load_run_data(cfg)
    log("data", rolled=len(data.rolled_domain), latent=len(data.latent_domain), synth=len(data.synth_records))
    tcfg = config_mod.train_config(cfg)
    models_dir = run_dir / "models" if run_dir else None

    coarse = run_first_stage(data.rolled_domain, data.latent_domain, tcfg, models_dir)
    log("first_stage", epochs=len(coarse.loss_log), best_epoch=coarse.best_epoch)

    k = cfg["cluster"]["k"]
    extractor = get_extractor(cfg["cluster"]["extractor"])
    assignment = cluster_latents(data.latent_domain, k, extractor, seed=tcfg.seed, l2norm=cfg["cluster"]["l2norm"])
    if run_dir:
        export_assignment(assignment, run_dir / "clusters.csv")
    log("cluster", k=k, sizes=assignment.sizes)
    models = run_second_stage(coarse, data.rolled_domain, data.latent_domain, k, tcfg, assignment=assignment,
                              finetune_max_epochs=cfg["gan"]["finetune_max_epochs"] or None, out_dir=models_dir)
    log("second_stage", models=[m.model_id for m in models])

    size = tcfg.train_size
    records = canonical_records(data.synth_records, size)
    counts = cfg["synthesis"]["per_model_counts"] or None
    if counts is None:
        n_each = len(records) // len(models)
        counts = [n_each] * len(models)
    images, manifest = synthesize_set(models, records, counts, seed=tcfg.seed, rolled_index=cfg["synthesis"]["rolled_index"])

    tiers = None
    if k == 3:
        pairs = [MatedPair(r.identity, r.rolled[0], r.rolled[cfg["synthesis"]["rolled_index"]], ROLLED) for r in records]
        tiers = assign_tiers(models, pairs, tier_matcher(cfg), cfg["tiering"]["far"])
        manifest = manifest.with_tiers(tiers.tiers)
        log("tiers", tiers={m: t.value for m, t in tiers.tiers.items()}, tdr=tiers.tdr)

    if run_dir:
        for sid, im in images.items():
            write_image(im, run_dir / "synth" / f"{sid}.png")
        write_manifest(manifest, run_dir / "manifest.jsonl", records)
        write_run_metrics(run_dir, cfg, data, images, manifest, tiers)
        log("done", synthetic=len(manifest))
    return PipelineResult(run_dir, coarse, models, assignment, images, manifest, tiers, records)


def write_run_metrics(run_dir: Path, cfg: dict, data: RunData, images: dict, manifest: SynthesisManifest, tiers: TierResult | None) -> None:
    metrics = run_dir / "metrics"
    metrics.mkdir(parents=True, exist_ok=True)
    tool = {"nfiq2_path": cfg["quality"]["nfiq2_path"]}
    quality_histogram(list(data.latent_domain.images), tool).write_csv(metrics / "quality_latent.csv")
    quality_histogram(list(images.values()), tool).write_csv(metrics / "quality_synthetic.csv")
    counts = count_minutiae(list(images.values()))
    with open(metrics / "minutiae_counts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["synthetic_id", "model_id", "tier", "count"])
        for e in manifest.entries:
            w.writerow([e.synthetic_id, e.model_id, e.tier.value if e.tier else "", counts[e.synthetic_id]])
    if tiers is not None:
        tiers.write_csv(metrics / "tiers.csv")
        for mid in sorted(tiers.tiers):
            write_roc_csv(metrics / f"roc_{mid}.csv", tiers.genuine[mid], tiers.impostor[mid], label=tiers.tiers[mid].value)
        stats = minutiae_tier_stats(manifest, counts=counts)
        with open(metrics / "minutiae_tiers.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tier", "n", "mean", "std"])
            for t in ("Good", "Bad", "Ugly"):
                w.writerow([t, stats.n[t], repr(stats.mean[t]), repr(stats.std[t])])
