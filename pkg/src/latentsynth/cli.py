"""Command-line entry point: ``latentsynth <subcommand> [--config f] [--seed n] [--out dir]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .cyclegan import StyleModel, TrainingError
from .evalkit.metrics import MetricError, ScoreMatrix, cmc_ranks, roc_tdr_at_far, write_cmc_csv, write_roc_csv
from .fpcore import (
    SYNTHETIC, DatasetError, Layout, ManifestError, MatedPair, QualityTier, load_dataset,
    read_image, read_manifest, write_image, write_manifest,
)
from .matcher import (
    ALIGNMENT_PRESETS, GENUINE, IMPOSTOR, MatcherError, MatcherHandle, SimilarityScore, embed_batch, finetune,
    minmax_matrix, pretrain,
    read_scores, score_matrix, write_scores,
)
from .pipeline import (
    EventLog, PipelineError, assign_tiers, canonical_records, cluster_latents, load_run_data, run_first_stage,
    run_second_stage, synthesize_set, tier_matcher,
)
from .stylecluster import ClusteringError, ConfigurationError, export_assignment, get_extractor, load_assignment

logger = logging.getLogger("latentsynth")

DOMAIN_ERRORS = (
    config_mod.ConfigError, DatasetError, ManifestError, PipelineError, TrainingError, MetricError, MatcherError,
    ClusteringError, ConfigurationError, FileNotFoundError,
)

# config sections each subcommand reads; listed in its --help
READS = {
    "train-coarse": ["data", "layout", "img", "aug", "gan"],
    "cluster": ["data", "layout", "img", "cluster"],
    "finetune-styles": ["data", "layout", "img", "aug", "gan", "cluster"],
    "synthesize": ["data", "layout", "img", "synthesis"],
    "assign-tiers": ["data", "layout", "img", "synthesis.rolled_index", "tiering"],
    "finetune-matcher": ["data", "layout", "img", "matcher", "aug"],
    "evaluate": ["evaluate"],
    "identify": ["data.seed", "layout", "matcher.input_size", "fusion"],
    "report": ["data", "layout", "img", "quality", "cluster.extractor"],
}

HELP = {
    "train-coarse": "train the coarse rolled -> latent style model on all latents",
    "cluster": "cluster latent styles (texture or ResNet152V2 features + K-Means)",
    "finetune-styles": "fine-tune one style model per latent cluster from the coarse model",
    "synthesize": "translate rolled prints with every style model; write images and manifest",
    "assign-tiers": "rank three style models by TDR@FAR into Good/Bad/Ugly",
    "finetune-matcher": "fine-tune the embedding matcher on rolled + Bad/Ugly synthetic pairs",
    "evaluate": "ROC and TDR@FAR from a score file",
    "identify": "closed-set 1:N search with one or two matchers (two are also fused)",
    "report": "quality histograms, minutiae tier stats and a t-SNE map of a run",
}


def _keys_epilog(prefixes: list[str]) -> str:
    lines = ["config keys read:"]
    for key, doc in config_mod.KEY_DOCS.items():
        if any(key == p or key.startswith(p + ".") for p in prefixes):
            lines.append(f"  {key:28s} {doc}")
    return "\n".join(lines)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="TOML run configuration")
    p.add_argument("--seed", type=int, default=d(None), help="seed (overrides data.seed)")
    p.add_argument("--out", default=d("runs/default"), help="run directory (default runs/default)")
    p.add_argument("--set", dest="overrides", action="append", default=d([]), metavar="KEY=VALUE",
                   help="override a config key, e.g. --set gan.max_epochs=5")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False), help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentsynth", description="Latent fingerprint synthesis and evaluation.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    cmds = {}
    for name, help_text in HELP.items():
        sp = sub.add_parser(name, help=help_text, description=help_text, epilog=_keys_epilog(READS[name]),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        _global_flags(sp, suppress=True)
        cmds[name] = sp
    cmds["cluster"].add_argument("--k", type=int, help="override cluster.k")
    cmds["finetune-styles"].add_argument("--clusters", help="cluster CSV (default <out>/clusters.csv, computed if absent)")
    cmds["synthesize"].add_argument("--per-model", type=int, help="rolled prints per model (default: equal split)")
    cmds["assign-tiers"].add_argument("--models", nargs="+", help="three style model directories (default <out>/models/style-c*)")
    fm = cmds["finetune-matcher"]
    fm.add_argument("--base", help="pretrained matcher directory (default: pretrain on rolled prints)")
    fm.add_argument("--name", default="DeepPrint2", help="name of the fine-tuned matcher")
    ev = cmds["evaluate"]
    ev.add_argument("--scores", required=True, help="score CSV (probe_id,gallery_id,model_id,raw_score,norm_score,label)")
    ev.add_argument("--far", type=float, help="FAR operating point (default evaluate.far)")
    ev.add_argument("--column", choices=("raw_score", "norm_score"), default="raw_score")
    idf = cmds["identify"]
    idf.add_argument("--matcher", action="append", required=True, help="matcher directory; give two to also fuse")
    idf.add_argument("--probes", help="dataset directory of latent probes (default: procedural test corpus)")
    idf.add_argument("--gallery", help="dataset directory of rolled mates + background")
    idf.add_argument("--max-rank", type=int, default=20)
    return parser


# -- helpers ------------------------------------------------------------------------------


def _load_cfg(args) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"data.seed={args.seed}")
    return config_mod.load_config(args.config, overrides)


def _style_dirs(out: Path) -> list[Path]:
    dirs = sorted(p for p in (out / "models").glob("style-c*") if (p / "weights.pt").exists())
    if not dirs:
        raise PipelineError(f"no style models under {out / 'models'}; run finetune-styles first")
    return dirs


def _load_tiers(out: Path) -> dict:
    path = out / "metrics" / "tiers.csv"
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {r["model_id"]: QualityTier(r["tier"]) for r in csv.DictReader(fh)}


def _synth_records(cfg: dict) -> list:
    return canonical_records(load_run_data(cfg).synth_records, cfg["img"]["train_size"])


# -- subcommands --------------------------------------------------------------------------


def cmd_train_coarse(args, cfg, out: Path, log: EventLog) -> int:
    data = load_run_data(cfg)
    model = run_first_stage(data.rolled_domain, data.latent_domain, config_mod.train_config(cfg), out / "models")
    log("train-coarse", epochs=len(model.loss_log), best_epoch=model.best_epoch)
    print(f"coarse model: {out / 'models' / 'coarse'} ({len(model.loss_log)} epochs, best {model.best_epoch})")
    return 0


def cmd_cluster(args, cfg, out: Path, log: EventLog) -> int:
    k = args.k or cfg["cluster"]["k"]
    data = load_run_data(cfg)
    a = cluster_latents(data.latent_domain, k, get_extractor(cfg["cluster"]["extractor"]), seed=cfg["data"]["seed"],
                        l2norm=cfg["cluster"]["l2norm"])
    export_assignment(a, out / "clusters.csv")
    log("cluster", k=k, sizes=a.sizes, objective=a.objective)
    print(f"k={k} cluster sizes {a.sizes} -> {out / 'clusters.csv'}")
    return 0


def cmd_finetune_styles(args, cfg, out: Path, log: EventLog) -> int:
    coarse = StyleModel.load(out / "models" / "coarse")
    data = load_run_data(cfg)
    tcfg = config_mod.train_config(cfg)
    k = cfg["cluster"]["k"]
    path = Path(args.clusters) if args.clusters else out / "clusters.csv"
    if path.exists():
        assignment = load_assignment(path)
    else:
        assignment = cluster_latents(data.latent_domain, k, get_extractor(cfg["cluster"]["extractor"]), seed=tcfg.seed,
                                     l2norm=cfg["cluster"]["l2norm"])
        export_assignment(assignment, out / "clusters.csv")
    models = run_second_stage(coarse, data.rolled_domain, data.latent_domain, assignment.k, tcfg, assignment=assignment,
                              finetune_max_epochs=cfg["gan"]["finetune_max_epochs"] or None, out_dir=out / "models")
    log("finetune-styles", models=[m.model_id for m in models], sizes=assignment.sizes)
    for m in models:
        print(f"{m.model_id}: cluster {m.cluster_index}, {len(m.loss_log)} epochs")
    return 0


def cmd_synthesize(args, cfg, out: Path, log: EventLog) -> int:
    models = [StyleModel.load(d) for d in _style_dirs(out)]
    records = _synth_records(cfg)
    counts = args.per_model or cfg["synthesis"]["per_model_counts"] or [len(records) // len(models)] * len(models)
    images, manifest = synthesize_set(models, records, counts, seed=cfg["data"]["seed"],
                                      rolled_index=cfg["synthesis"]["rolled_index"], tiers=_load_tiers(out))
    for sid, im in images.items():
        write_image(im, out / "synth" / f"{sid}.png")
    write_manifest(manifest, out / "manifest.jsonl", records)
    log("synthesize", n=len(manifest), models=[m.model_id for m in models])
    print(f"{len(manifest)} synthetic latents -> {out / 'synth'}; manifest {out / 'manifest.jsonl'}")
    return 0


def cmd_assign_tiers(args, cfg, out: Path, log: EventLog) -> int:
    dirs = [Path(d) for d in args.models] if args.models else _style_dirs(out)
    models = [StyleModel.load(d) for d in dirs]
    records = _synth_records(cfg)
    ri = cfg["synthesis"]["rolled_index"]
    pairs = [MatedPair(r.identity, r.rolled[0], r.rolled[ri], "rolled") for r in records]
    result = assign_tiers(models, pairs, tier_matcher(cfg), cfg["tiering"]["far"])
    result.write_csv(out / "metrics" / "tiers.csv")
    for mid in sorted(result.tiers):
        write_roc_csv(out / "metrics" / f"roc_{mid}.csv", result.genuine[mid], result.impostor[mid], result.tiers[mid].value)
    mpath = out / "manifest.jsonl"
    if mpath.exists():
        write_manifest(read_manifest(mpath).with_tiers(result.tiers), mpath, records)
    log("assign-tiers", tiers={m: t.value for m, t in result.tiers.items()}, tdr=result.tdr)
    for mid in sorted(result.tiers, key=lambda m: -result.tiers[m].rank):
        print(f"{mid}: {result.tiers[mid].value} (TDR {100 * result.tdr[mid]:.2f}% @ FAR {cfg['tiering']['far']})")
    return 0


def cmd_finetune_matcher(args, cfg, out: Path, log: EventLog) -> int:
    manifest = read_manifest(out / "manifest.jsonl")
    records = {r.identity: r for r in _synth_records(cfg)}
    by_rolled = {im.id: r for r in records.values() for im in r.rolled}
    keep = {QualityTier.BAD, QualityTier.UGLY}
    entries = [e for e in manifest.entries if e.tier in keep]
    if not entries:
        raise PipelineError("manifest has no Bad/Ugly entries; run assign-tiers first")
    pairs = []
    for e in entries:
        rec = by_rolled.get(e.source_rolled_id)
        if rec is None:
            raise ManifestError(f"{e.synthetic_id}: source {e.source_rolled_id!r} not in the configured data")
        syn = read_image(out / "synth" / f"{e.synthetic_id}.png")
        pairs.append(MatedPair(rec.identity, rec.rolled[0], syn, SYNTHETIC))
    mcfg = config_mod.matcher_config(cfg, seed=cfg["data"]["seed"])
    if args.base:
        base = MatcherHandle.load(args.base)
    else:
        data = load_run_data(cfg)
        base_cfg = replace(mcfg, alignment_weight=ALIGNMENT_PRESETS["DeepPrint"])
        base = pretrain({im.id: [im] for im in data.rolled_domain.images}, base_cfg)
        base.save(out / "matchers" / "DeepPrint")
    tuned = finetune(base, pairs, mcfg, args.name)
    tuned.save(out / "matchers" / args.name)
    log("finetune-matcher", name=args.name, pairs=len(pairs), alignment_weight=mcfg.alignment_weight)
    print(f"{args.name}: {len(pairs)} pairs -> {out / 'matchers' / args.name}")
    return 0


def cmd_evaluate(args, cfg, out: Path, log: EventLog) -> int:
    far = args.far if args.far is not None else cfg["evaluate"]["far"]
    rows = read_scores(args.scores)
    models = sorted({r["model_id"] for r in rows})
    for mid in models:
        sel = [r for r in rows if r["model_id"] == mid]
        gen = np.array([r[args.column] for r in sel if r["label"] == GENUINE])
        imp = np.array([r[args.column] for r in sel if r["label"] == IMPOSTOR])
        tdr = roc_tdr_at_far(gen, imp, far)
        write_roc_csv(out / "metrics" / f"roc_{mid}.csv", gen, imp, mid)
        log("evaluate", model_id=mid, far=far, tdr=tdr, genuine=len(gen), impostor=len(imp))
        print(f"{mid}: TDR {100 * tdr:.2f}% @ FAR {far:g} ({len(gen)} genuine, {len(imp)} impostor)")
    return 0


def _identify_sets(args, cfg):
    if bool(args.probes) != bool(args.gallery):
        raise PipelineError("--probes and --gallery go together")
    if args.probes:
        layout = Layout.from_config(cfg["layout"])
        prec = load_dataset(args.probes, layout)
        grec = load_dataset(args.gallery, layout)
        probes, pid = [], []
        for r in prec:
            for im in r.latents:
                probes.append(im)
                pid.append(r.identity)
        idents = set(pid)
        mates = [r for r in grec if r.identity in idents]
        background = [r for r in grec if r.identity not in idents]
        return probes, pid, mates, background
    from .experiments import build_corpus

    c = build_corpus(cfg["data"]["seed"])
    return c.probes, c.probe_identities, c.test, c.background


def cmd_identify(args, cfg, out: Path, log: EventLog) -> int:
    from .evalkit.identification import build_gallery

    if len(args.matcher) > 2:
        raise PipelineError("identify takes one or two matchers")
    probes, pid, mates, background = _identify_sets(args, cfg)
    gallery, owner = build_gallery(mates, background)
    by_identity = {ident: gid for gid, ident in owner.items()}
    missing = sorted({i for i in pid if i not in by_identity})
    if missing:
        raise MetricError(f"probe identities without gallery mates: {missing[:5]}")
    mate_map = {p.id: by_identity[i] for p, i in zip(probes, pid)}
    raw = {}
    for d in args.matcher:
        h = MatcherHandle.load(d)
        raw[h.name] = score_matrix(embed_batch(h, probes), embed_batch(h, gallery))
    scope = cfg["fusion"]["scope"]
    norm = {name: minmax_matrix(s, scope) for name, s in raw.items()}
    if len(raw) == 2:
        a, b = list(raw)
        raw["fused"] = (norm[a] + norm[b]) / 2.0
        norm["fused"] = raw["fused"]
    for name, s in raw.items():
        m = ScoreMatrix(tuple(p.id for p in probes), tuple(g.id for g in gallery), s, mate_map)
        rs, ns = [], []
        for i, p in enumerate(probes):
            for j, g in enumerate(gallery):
                label = GENUINE if mate_map[p.id] == g.id else IMPOSTOR
                rs.append(SimilarityScore(float(s[i, j]), p.id, g.id, label))
                ns.append(SimilarityScore(float(norm[name][i, j]), p.id, g.id, label))
        write_scores(out / "scores" / f"{name}.csv", rs, name, ns)
        cmc = cmc_ranks(m, max_rank=min(args.max_rank, len(gallery)))
        write_cmc_csv(out / "metrics" / f"cmc_{name}.csv", cmc, name)
        log("identify", matcher=name, rank1=cmc[0], probes=len(probes), gallery=len(gallery))
        print(f"{name}: Rank-1 {100 * cmc[0]:.2f}%  Rank-10 {100 * cmc[min(9, len(cmc) - 1)]:.2f}%  "
              f"({len(probes)} probes, gallery {len(gallery)})")
    return 0


def cmd_report(args, cfg, out: Path, log: EventLog) -> int:
    from .evalkit.minutiae import count_minutiae, minutiae_tier_stats
    from .evalkit.quality import quality_histogram
    from .evalkit.tsne import plot_scatter, tsne_embed, write_scatter_json
    from .stylecluster import extract_features

    manifest = read_manifest(out / "manifest.jsonl")
    synth = [read_image(out / "synth" / f"{e.synthetic_id}.png") for e in manifest.entries]
    data = load_run_data(cfg)
    tool = {"nfiq2_path": cfg["quality"]["nfiq2_path"]}
    metrics = out / "metrics"
    for label, images in (("latent", list(data.latent_domain.images)), ("synthetic", synth)):
        rep = quality_histogram(images, tool)
        rep.write_csv(metrics / f"quality_{label}.csv")
        print(f"quality ({label}, {rep.source}): mean {np.mean([s.value for s in rep.scores]):.1f} over {len(rep.scores)} images")
    if all(e.tier is not None for e in manifest.entries):
        stats = minutiae_tier_stats(manifest, counts=count_minutiae(synth))
        print("minutiae per tier:", stats.report())
        (metrics / "minutiae_tiers.json").write_text(json.dumps(
            {"mean": stats.mean, "std": stats.std, "n": stats.n, "monotone": stats.monotone}, indent=1, sort_keys=True) + "\n")
    ex = get_extractor(cfg["cluster"]["extractor"])
    feats = extract_features(list(data.latent_domain.images) + synth, ex)
    labels = ["latent"] * len(data.latent_domain) + [
        f"synthetic-{e.tier.value if e.tier else e.model_id}" for e in manifest.entries]
    pts = tsne_embed(np.stack([f.values for f in feats]), seed=cfg["data"]["seed"])
    write_scatter_json(metrics / "tsne.json", pts, labels, [f.image_id for f in feats])
    plot_scatter(metrics / "tsne.png", pts, labels)
    log("report", synthetic=len(synth))
    print(f"report written under {metrics}")
    return 0


COMMANDS = {
    "train-coarse": cmd_train_coarse,
    "cluster": cmd_cluster,
    "finetune-styles": cmd_finetune_styles,
    "synthesize": cmd_synthesize,
    "assign-tiers": cmd_assign_tiers,
    "finetune-matcher": cmd_finetune_matcher,
    "evaluate": cmd_evaluate,
    "identify": cmd_identify,
    "report": cmd_report,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    log = EventLog(out / "logs" / "events.jsonl")
    try:
        cfg = _load_cfg(args)
        out.mkdir(parents=True, exist_ok=True)
        log("start", command=args.command, seed=cfg["data"]["seed"], config=args.config, overrides=args.overrides)
        code = COMMANDS[args.command](args, cfg, out, log)
    except DOMAIN_ERRORS as exc:
        log("error", command=args.command, error=f"{type(exc).__name__}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    log("end", command=args.command, code=code)
    return code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
