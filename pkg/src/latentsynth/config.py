"""Single structured run configuration (TOML) with dotted-key overrides."""

from __future__ import annotations

import copy
import json
import sys
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cyclegan import DiscriminatorSpec, GeneratorSpec, TrainConfig
from .fpcore import Layout
from .matcher import MatcherConfig

DEFAULTS: dict[str, Any] = {
    "data": {
        "source": "procedural",
        "rolled_dir": "",
        "latent_dir": "",
        "n_rolled": 2000,
        "n_latent": 2074,
        "latent_styles": ["good", "bad", "ugly"],
        "image_size": 256,
        "seed": 0,
    },
    "layout": {"pattern": Layout.pattern, "rolled_tag": "roll", "latent_tag": "lat", "synthetic_tag": "syn"},
    "img": {"train_size": 256, "apply_clahe": False, "clahe": {"clip": 2.0, "tiles": 8}},
    "aug": {"enabled": True, "max_translate_px": 100.0, "max_rotate_deg": 15.0, "native_size": 512},
    "gan": {
        "residual_blocks": 6, "alpha": 0.2, "ngf": 64, "ndf": 64,
        "lr_generator": 0.0003, "lr_discriminator": 0.0001, "beta1": 0.5, "beta2": 0.999,
        "cycle_weight": 10.0, "patience": 50, "max_epochs": 200, "finetune_max_epochs": 0,
        "batch_size": 1, "replay_buffer": True, "buffer_size": 50,
    },
    "cluster": {"k": 3, "extractor": "texture", "l2norm": False},
    "synthesis": {"per_model_counts": [], "rolled_index": 1, "n_identities": 2000},
    "tiering": {"far": 0.001, "matcher": "correlation"},
    "matcher": {"alignment_weight": 0.018, "embed_dim": 192, "epochs": 30, "input_size": 256},
    "fusion": {"scope": "global"},
    "quality": {"nfiq2_path": ""},
    "evaluate": {"far": 0.001},
}

KEY_DOCS = {
    "data.source": "'procedural' stand-in corpora or 'directory' datasets",
    "data.rolled_dir": "rolled dataset directory (directory source)",
    "data.latent_dir": "latent dataset directory (directory source)",
    "data.n_rolled": "procedural rolled identities",
    "data.n_latent": "procedural latent images",
    "data.latent_styles": "procedural latent styles cycled over the latent domain",
    "data.image_size": "procedural raster side in pixels",
    "data.seed": "procedural corpus seed",
    "layout.pattern": "filename regex with identity and kind groups",
    "layout.rolled_tag": "kind prefix of rolled prints",
    "layout.latent_tag": "kind prefix of latent prints",
    "layout.synthetic_tag": "kind prefix of synthetic latents",
    "img.train_size": "square training raster side",
    "img.apply_clahe": "CLAHE on latent inputs before training/evaluation",
    "img.clahe.clip": "CLAHE clip limit",
    "img.clahe.tiles": "CLAHE tile grid",
    "aug.enabled": "on-the-fly augmentation during GAN training",
    "aug.max_translate_px": "translation bound at native resolution",
    "aug.max_rotate_deg": "rotation bound in degrees",
    "aug.native_size": "native raster side used to rescale the translation bound",
    "gan.residual_blocks": "generator residual blocks",
    "gan.alpha": "generator LeakyReLU slope",
    "gan.ngf": "generator base width",
    "gan.ndf": "discriminator base width",
    "gan.lr_generator": "generator learning rate",
    "gan.lr_discriminator": "discriminator learning rate",
    "gan.beta1": "Adam beta1",
    "gan.beta2": "Adam beta2",
    "gan.cycle_weight": "cycle-consistency weight",
    "gan.patience": "early-stopping patience (epochs)",
    "gan.max_epochs": "coarse-stage epoch cap",
    "gan.finetune_max_epochs": "style fine-tuning epoch cap (0 = half of gan.max_epochs)",
    "gan.batch_size": "batch size",
    "gan.replay_buffer": "feed discriminators from a pool of past fakes",
    "gan.buffer_size": "replay pool size",
    "cluster.k": "number of latent style clusters",
    "cluster.extractor": "feature extractor: 'texture' or 'resnet152v2'",
    "cluster.l2norm": "L2-normalize features before K-Means",
    "synthesis.per_model_counts": "rolled prints translated per model (empty = equal split of all)",
    "synthesis.rolled_index": "which rolled acquisition feeds synthesis",
    "synthesis.n_identities": "procedural identities used for synthesis",
    "tiering.far": "FAR operating point for tier assignment",
    "tiering.matcher": "'correlation' or a matcher checkpoint directory",
    "matcher.alignment_weight": "alignment-head loss weight",
    "matcher.embed_dim": "embedding size",
    "matcher.epochs": "training epochs",
    "matcher.input_size": "matcher input raster side",
    "fusion.scope": "min-max scope: 'global' or 'per-probe'",
    "quality.nfiq2_path": "external NFIQ 2 executable (else $NFIQ2_BIN, else proxy)",
    "evaluate.far": "FAR operating point for reports",
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} is a section")
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def _parse_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_override(cfg: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    nested: dict = {}
    cur = nested
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = _parse_value(raw.strip())
    return _merge(cfg, nested)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as fh:
                cfg = _merge(cfg, tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for ov in overrides or []:
        cfg = apply_override(cfg, ov)
    return cfg


def get(cfg: dict, dotted: str) -> Any:
    cur: Any = cfg
    for p in dotted.split("."):
        cur = cur[p]
    return cur


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    g, a = cfg["gan"], cfg["aug"]
    return TrainConfig(
        lr_generator=g["lr_generator"], lr_discriminator=g["lr_discriminator"],
        beta1=g["beta1"], beta2=g["beta2"], cycle_weight=g["cycle_weight"],
        early_stop_patience=g["patience"], max_epochs=g["max_epochs"], batch_size=g["batch_size"],
        seed=cfg["data"]["seed"] if seed is None else seed,
        train_size=cfg["img"]["train_size"], replay_buffer=g["replay_buffer"], buffer_size=g["buffer_size"],
        augment=a["enabled"], max_translate_px=a["max_translate_px"], max_rotate_deg=a["max_rotate_deg"],
        native_size=a["native_size"],
        generator=GeneratorSpec(residual_blocks=g["residual_blocks"], alpha=g["alpha"], ngf=g["ngf"]),
        discriminator=DiscriminatorSpec(ndf=g["ndf"]),
    )


def matcher_config(cfg: dict, seed: int = 0, **kw) -> MatcherConfig:
    m, a = cfg["matcher"], cfg["aug"]
    return MatcherConfig(
        alignment_weight=m["alignment_weight"], embedding_dim=m["embed_dim"], epochs=m["epochs"],
        input_size=m["input_size"], max_translate_px=a["max_translate_px"], max_rotate_deg=a["max_rotate_deg"],
        native_size=a["native_size"], seed=seed, **kw,
    )


def dumps(cfg: dict) -> str:
    """Canonical JSON snapshot of a config."""
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
