"""Training loop, checkpoints and inference for style models."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..fpcore import DomainSet, FingerprintImage
from ..imgproc import apply_augmentation, sample_augment_params, to_canonical
from .losses import (
    DISCRIMINATOR, GENERATOR, adversarial_losses, combine_adversarial, cycle_consistency_loss,
    total_generator_loss,
)
from .networks import NET_NAMES, DiscriminatorSpec, GeneratorSpec, build_networks

logger = logging.getLogger(__name__)

LOSS_COLUMNS = (
    "epoch", "loss_G_total", "loss_cyc_A", "loss_cyc_B",
    "loss_D_A_global", "loss_D_A_patch", "loss_D_B_global", "loss_D_B_patch",
)

ROLLED_TO_LATENT = "rolled->latent"
LATENT_TO_ROLLED = "latent->rolled"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_generator: float = 0.0003
    lr_discriminator: float = 0.0001
    beta1: float = 0.5
    beta2: float = 0.999
    cycle_weight: float = 10.0
    early_stop_patience: int = 50
    max_epochs: int = 200
    batch_size: int = 1
    seed: int = 0
    train_size: int = 256
    replay_buffer: bool = True
    buffer_size: int = 50
    augment: bool = True
    max_translate_px: float = 100.0
    max_rotate_deg: float = 15.0
    native_size: int = 512
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("generator"), dict):
            d["generator"] = GeneratorSpec(**d["generator"])
        if isinstance(d.get("discriminator"), dict):
            d["discriminator"] = DiscriminatorSpec(**d["discriminator"])
        return cls(**d)

    def with_overrides(self, **kw) -> TrainConfig:
        return replace(self, **kw)


@dataclass
class StyleModel:
    """Trained rolled <-> latent translator tagged with its style cluster."""

    model_id: str
    cluster_index: int | str
    nets: dict
    config: TrainConfig
    loss_log: list = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def G(self):
        return self.nets["G"]

    @property
    def F(self):
        return self.nets["F"]

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save({k: self.nets[k].state_dict() for k in NET_NAMES}, d / "weights.pt")
        snapshot = {
            "model_id": self.model_id,
            "cluster_index": self.cluster_index,
            "best_epoch": self.best_epoch,
            "config": self.config.as_dict(),
        }
        (d / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        write_loss_log(self.loss_log, d / "loss-log.csv")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> StyleModel:
        d = Path(directory)
        try:
            snap = json.loads((d / "config.json").read_text())
            cfg = TrainConfig.from_dict(snap["config"])
            nets = build_networks(cfg.generator, cfg.discriminator)
            state = torch.load(d / "weights.pt", map_location="cpu", weights_only=True)
            for k in NET_NAMES:
                nets[k].load_state_dict(state[k])
        except (OSError, KeyError, RuntimeError, ValueError, TypeError) as exc:
            raise TrainingError(f"cannot load style model from {d}: {exc}") from exc
        for net in nets.values():
            net.eval()
        log = read_loss_log(d / "loss-log.csv") if (d / "loss-log.csv").exists() else []
        return cls(snap["model_id"], snap["cluster_index"], nets, cfg, log, snap.get("best_epoch"))


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def write_loss_log(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in LOSS_COLUMNS])


def read_loss_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


# -- tensors <-> images ----------------------------------------------------------


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(a, dtype=np.float32) for a in images])[:, None]
    return torch.from_numpy(arr / 127.5 - 1.0)


def to_uint8(t: torch.Tensor) -> np.ndarray:
    arr = (t.detach().cpu().numpy()[:, 0] + 1.0) * 127.5
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


class ReplayBuffer:
    """Pool of past fakes fed to the discriminators (seeded)."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.items: list[torch.Tensor] = []

    def push_and_sample(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size <= 0:
            return batch
        out = []
        for img in batch.detach():
            img = img.unsqueeze(0)
            if len(self.items) < self.size:
                self.items.append(img)
                out.append(img)
            elif self.rng.random() < 0.5:
                j = int(self.rng.integers(self.size))
                out.append(self.items[j].clone())
                self.items[j] = img
            else:
                out.append(img)
        return torch.cat(out, 0)


def _prepare(domain: DomainSet, size: int) -> list[np.ndarray]:
    if len(domain) == 0:
        raise TrainingError(f"domain {domain.name!r} is empty")
    return [np.asarray(to_canonical(im, size).pixels) for im in domain.images]


def _set_requires_grad(nets, flag: bool) -> None:
    for n in nets:
        for p in n.parameters():
            p.requires_grad_(flag)


def generator_objective(nets: dict, real_a: torch.Tensor, real_b: torch.Tensor, lam: float) -> dict:
    """Forward pass of both generators; returns every generator-side term."""
    fake_b = nets["G"](real_a)
    fake_a = nets["F"](real_b)
    rec_a = nets["F"](fake_b)
    rec_b = nets["G"](fake_a)
    adv_g = combine_adversarial(
        adversarial_losses(None, nets["D_B_global"](fake_b), GENERATOR),
        adversarial_losses(None, nets["D_B_patch"](fake_b), GENERATOR),
    )
    adv_f = combine_adversarial(
        adversarial_losses(None, nets["D_A_global"](fake_a), GENERATOR),
        adversarial_losses(None, nets["D_A_patch"](fake_a), GENERATOR),
    )
    cyc_a = cycle_consistency_loss(real_a, rec_a)
    cyc_b = cycle_consistency_loss(real_b, rec_b)
    return {
        "fake_a": fake_a, "fake_b": fake_b,
        "adv_G": adv_g, "adv_F": adv_f, "cyc_A": cyc_a, "cyc_B": cyc_b,
        "total": total_generator_loss(adv_g, adv_f, cyc_a, cyc_b, lam),
    }


def _disc_terms(d_global, d_patch, real, fake):
    g = adversarial_losses(d_global(real), d_global(fake.detach()), DISCRIMINATOR)
    p = adversarial_losses(d_patch(real), d_patch(fake.detach()), DISCRIMINATOR)
    return g, p


def train_stage(
    domain_A: DomainSet,
    domain_B: DomainSet,
    cfg: TrainConfig = TrainConfig(),
    init: StyleModel | None = None,
    model_id: str = "coarse",
    cluster_index: int | str = "coarse",
    out_dir: str | Path | None = None,
    monitor_fn: Callable[[dict], float] | None = None,
    epoch_callback: Callable[[dict], None] | None = None,
) -> StyleModel:
    """Train (or fine-tune from ``init``) a CycleGAN between rolled A and latent B.

    The monitored quantity is the epoch-mean total generator loss unless
    ``monitor_fn`` maps the epoch row to something else.  Training stops
    after ``early_stop_patience`` epochs without improvement or at
    ``max_epochs``; the best epoch's weights are returned.
    """
    imgs_a = _prepare(domain_A, cfg.train_size)
    imgs_b = _prepare(domain_B, cfg.train_size)
    if init is not None and (init.config.generator != cfg.generator or init.config.discriminator != cfg.discriminator):
        raise TrainingError("init model architecture does not match the training config")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    nets = build_networks(cfg.generator, cfg.discriminator)
    if init is not None:
        for k in NET_NAMES:
            nets[k].load_state_dict(init.nets[k].state_dict())
    gens = [nets["G"], nets["F"]]
    discs = [nets[k] for k in NET_NAMES[2:]]
    opt_g = torch.optim.Adam([p for n in gens for p in n.parameters()], lr=cfg.lr_generator, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam([p for n in discs for p in n.parameters()], lr=cfg.lr_discriminator, betas=(cfg.beta1, cfg.beta2))
    pool_a = ReplayBuffer(cfg.buffer_size if cfg.replay_buffer else 0, rng)
    pool_b = ReplayBuffer(cfg.buffer_size if cfg.replay_buffer else 0, rng)
    translate_scale = cfg.train_size / cfg.native_size

    def batch_of(images, idx):
        out = []
        for i in idx:
            px = images[i]
            if cfg.augment:
                p = sample_augment_params(rng, cfg.max_translate_px, cfg.max_rotate_deg, translate_scale)
                px = np.asarray(apply_augmentation(FingerprintImage(px, "aug"), p).pixels)
            out.append(px)
        return to_tensor(out)

    n_steps = math.ceil(max(len(imgs_a), len(imgs_b)) / cfg.batch_size)
    log: list[dict] = []
    best = math.inf
    best_state = None
    best_epoch = None
    stale = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    for net in nets.values():
        net.train()

    for epoch in range(1, cfg.max_epochs + 1):
        order_a = np.resize(rng.permutation(len(imgs_a)), n_steps * cfg.batch_size)
        order_b = np.resize(rng.permutation(len(imgs_b)), n_steps * cfg.batch_size)
        sums = dict.fromkeys(LOSS_COLUMNS[1:], 0.0)
        for step in range(n_steps):
            sl = slice(step * cfg.batch_size, (step + 1) * cfg.batch_size)
            real_a = batch_of(imgs_a, order_a[sl])
            real_b = batch_of(imgs_b, order_b[sl])

            _set_requires_grad(discs, False)
            opt_g.zero_grad()
            terms = generator_objective(nets, real_a, real_b, cfg.cycle_weight)
            terms["total"].backward()
            opt_g.step()

            _set_requires_grad(discs, True)
            opt_d.zero_grad()
            fake_b = pool_b.push_and_sample(terms["fake_b"])
            fake_a = pool_a.push_and_sample(terms["fake_a"])
            da_g, da_p = _disc_terms(nets["D_A_global"], nets["D_A_patch"], real_a, fake_a)
            db_g, db_p = _disc_terms(nets["D_B_global"], nets["D_B_patch"], real_b, fake_b)
            (combine_adversarial(da_g, da_p) + combine_adversarial(db_g, db_p)).backward()
            opt_d.step()

            step_vals = {
                "loss_G_total": terms["total"], "loss_cyc_A": terms["cyc_A"], "loss_cyc_B": terms["cyc_B"],
                "loss_D_A_global": da_g, "loss_D_A_patch": da_p, "loss_D_B_global": db_g, "loss_D_B_patch": db_p,
            }
            for k, v in step_vals.items():
                v = float(v.detach())
                if not math.isfinite(v):
                    partial = StyleModel(model_id, cluster_index, nets, cfg, log, best_epoch)
                    where = ""
                    if out_dir is not None:
                        where = f"; diagnostic checkpoint at {partial.save(out_dir / 'diagnostic')}"
                    raise TrainingError(f"non-finite {k} at epoch {epoch}, step {step}{where}")
                sums[k] += v

        row = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
        log.append(row)
        logger.info("epoch %d %s", epoch, " ".join(f"{k}={row[k]:.4f}" for k in LOSS_COLUMNS[1:]))
        if epoch_callback is not None:
            epoch_callback(row)
        monitored = monitor_fn(row) if monitor_fn is not None else row["loss_G_total"]
        if monitored < best:
            best, best_epoch, stale = monitored, epoch, 0
            best_state = {k: copy.deepcopy(n.state_dict()) for k, n in nets.items()}
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                logger.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
                break

    for k, n in nets.items():
        n.load_state_dict(best_state[k])
        n.eval()
    model = StyleModel(model_id, cluster_index, nets, cfg, log, best_epoch)
    if out_dir is not None:
        model.save(out_dir)
    return model


@torch.no_grad()
def translate_batch(model: StyleModel, images: Sequence[FingerprintImage], direction: str = ROLLED_TO_LATENT) -> list[FingerprintImage]:
    if direction == ROLLED_TO_LATENT:
        net = model.G
    elif direction == LATENT_TO_ROLLED:
        net = model.F
    else:
        raise ValueError(f"unknown direction {direction!r}")
    net.eval()
    size = model.config.train_size
    for im in images:
        if im.pixels.shape != (size, size):
            raise TrainingError(f"{im.id}: expected {size}x{size} canonical input for model {model.model_id}, got {im.pixels.shape}")
    out = to_uint8(net(to_tensor([im.pixels for im in images])))
    return [im.with_pixels(o) for im, o in zip(images, out)]


def translate(model: StyleModel, img: FingerprintImage, direction: str = ROLLED_TO_LATENT) -> FingerprintImage:
    """Deterministic inference; no augmentation."""
    return translate_batch(model, [img], direction)[0]


def untrained_model(cfg: TrainConfig, model_id: str = "untrained", cluster_index: int | str = "coarse") -> StyleModel:
    torch.manual_seed(cfg.seed)
    nets = build_networks(cfg.generator, cfg.discriminator)
    for n in nets.values():
        n.eval()
    return StyleModel(model_id, cluster_index, nets, cfg)
