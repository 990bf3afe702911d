"""Core data model: fingerprint images, finger records, domain sets and
synthesis manifests, plus dataset loading and manifest (de)serialization."""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

CANONICAL_PPI = 500

ROLLED = "rolled"
LATENT = "latent"
SYNTHETIC = "synthetic-latent"
IMPRESSION_KINDS = (ROLLED, LATENT, SYNTHETIC)

MANIFEST_KEYS = ("synthetic_id", "source_rolled_id", "model_id", "cluster_index", "tier", "seed", "aug")


class DatasetError(Exception):
    """Raised when a dataset directory cannot be turned into finger records."""


class ManifestError(Exception):
    """Raised for invalid manifests or malformed manifest files."""


class QualityTier(enum.Enum):
    """SD27-style latent quality tier. Ordering follows expected accuracy."""

    GOOD = "Good"
    BAD = "Bad"
    UGLY = "Ugly"

    @property
    def rank(self) -> int:
        return {"Good": 2, "Bad": 1, "Ugly": 0}[self.value]

    def __lt__(self, other: QualityTier) -> bool:
        return self.rank < other.rank

    def __le__(self, other: QualityTier) -> bool:
        return self.rank <= other.rank

    def __gt__(self, other: QualityTier) -> bool:
        return self.rank > other.rank

    def __ge__(self, other: QualityTier) -> bool:
        return self.rank >= other.rank


@dataclass(frozen=True, eq=False)
class FingerprintImage:
    """8-bit grayscale fingerprint raster with its resolution in ppi."""

    pixels: np.ndarray
    id: str
    resolution: int = CANONICAL_PPI

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"{self.id}: expected a 2-D raster, got shape {px.shape}")
        if px.dtype != np.uint8:
            if px.size and (np.nanmin(px) < 0 or np.nanmax(px) > 255):
                raise ValueError(f"{self.id}: intensities outside [0, 255]")
            px = np.rint(px).astype(np.uint8)
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def is_canonical(self) -> bool:
        return self.resolution == CANONICAL_PPI

    def with_pixels(self, pixels: np.ndarray, id: str | None = None, resolution: int | None = None):
        return FingerprintImage(pixels, id or self.id, self.resolution if resolution is None else resolution)

    def same_as(self, other: FingerprintImage) -> bool:
        return (
            self.id == other.id
            and self.resolution == other.resolution
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )

    def __repr__(self) -> str:
        return f"FingerprintImage(id={self.id!r}, {self.width}x{self.height} @{self.resolution}ppi)"


@dataclass(frozen=True)
class Impression:
    image: FingerprintImage
    kind: str

    def __post_init__(self):
        if self.kind not in IMPRESSION_KINDS:
            raise ValueError(f"unknown impression kind {self.kind!r}")


@dataclass(frozen=True)
class FingerRecord:
    """All impressions of one finger."""

    identity: str
    impressions: tuple[Impression, ...] = ()

    def of_kind(self, kind: str) -> list[FingerprintImage]:
        return [imp.image for imp in self.impressions if imp.kind == kind]

    @property
    def rolled(self) -> list[FingerprintImage]:
        return self.of_kind(ROLLED)

    @property
    def latents(self) -> list[FingerprintImage]:
        return self.of_kind(LATENT)


@dataclass(frozen=True)
class DomainSet:
    """Unpaired training domain (rolled or latent)."""

    name: str
    images: tuple[FingerprintImage, ...]
    domain: str = LATENT

    def __post_init__(self):
        if self.domain not in (ROLLED, LATENT):
            raise ValueError(f"domain must be {ROLLED!r} or {LATENT!r}")
        object.__setattr__(self, "images", tuple(self.images))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def ids(self) -> list[str]:
        return [im.id for im in self.images]


@dataclass(frozen=True)
class MatedPair:
    identity: str
    rolled: FingerprintImage
    latent: FingerprintImage
    latent_kind: str = LATENT
    aligned: bool = False


def mated_pairs(records: Iterable[FingerRecord], latent_kind: str = LATENT, aligned: bool = False) -> list[MatedPair]:
    """Identity join: the first rolled print of each record against each of its latents."""
    pairs = []
    for rec in records:
        rolled = rec.rolled
        if not rolled:
            continue
        for lat in rec.of_kind(latent_kind):
            pairs.append(MatedPair(rec.identity, rolled[0], lat, latent_kind, aligned))
    return pairs


def validate_record(r: FingerRecord, require_canonical: bool = True) -> list[str]:
    """Return every invariant violation of ``r``; an empty list means valid."""
    violations = []
    if not r.identity:
        violations.append("identity is empty")
    seen = set()
    for imp in r.impressions:
        im = imp.image
        if im.id in seen:
            violations.append(f"duplicate impression id {im.id!r}")
        seen.add(im.id)
        if im.width <= 0 or im.height <= 0:
            violations.append(f"{im.id}: degenerate size {im.width}x{im.height}")
        if require_canonical and im.resolution != CANONICAL_PPI:
            violations.append(f"{im.id}: resolution != {CANONICAL_PPI} (got {im.resolution})")
    return violations


# -- image io ---------------------------------------------------------------


def read_image(path: str | Path, default_ppi: int = CANONICAL_PPI) -> FingerprintImage:
    path = Path(path)
    try:
        with Image.open(path) as im:
            dpi = im.info.get("dpi")
            pixels = np.array(im.convert("L"))
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    ppi = int(round(float(dpi[0]))) if dpi else default_ppi
    return FingerprintImage(pixels, path.stem, ppi)


def write_image(img: FingerprintImage, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(img.pixels, dtype=np.uint8), mode="L").save(
        path, dpi=(img.resolution, img.resolution)
    )
    return path


# -- dataset loading ----------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    """Filename convention used to recover identity and impression kind.

    ``pattern`` is a regex with named groups ``identity`` and ``kind``; the
    kind token is classified by prefix against the three tags.
    """

    pattern: str = r"^(?P<identity>.+)_(?P<kind>[^_]+)$"
    rolled_tag: str = "roll"
    latent_tag: str = "lat"
    synthetic_tag: str = "syn"
    extensions: tuple[str, ...] = (".png",)
    default_ppi: int = CANONICAL_PPI

    @classmethod
    def from_config(cls, cfg: dict | None) -> Layout:
        cfg = dict(cfg or {})
        if "extensions" in cfg:
            cfg["extensions"] = tuple(cfg["extensions"])
        return cls(**cfg)

    def classify(self, kind_token: str) -> str | None:
        # longest tag first so e.g. "lat" does not shadow "latent_x" style tags
        tags = sorted(
            [(self.synthetic_tag, SYNTHETIC), (self.latent_tag, LATENT), (self.rolled_tag, ROLLED)],
            key=lambda t: -len(t[0]),
        )
        for tag, kind in tags:
            if kind_token.startswith(tag):
                return kind
        return None


def load_dataset(root_path: str | Path, layout: Layout | dict | None = None) -> list[FingerRecord]:
    """Group every image under ``root_path`` into finger records by identity.

    Records are sorted by identity and impressions by image id, so the result
    only depends on directory contents.
    """
    if not isinstance(layout, Layout):
        layout = Layout.from_config(layout)
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory does not exist: {root}")
    rx = re.compile(layout.pattern)

    groups: dict[str, list[Impression]] = {}
    for path in sorted(p for p in root.rglob("*") if p.suffix.lower() in layout.extensions):
        m = rx.match(path.stem)
        if not m:
            logger.warning("skipping %s: name does not match layout pattern", path)
            continue
        kind = layout.classify(m.group("kind"))
        if kind is None:
            logger.warning("skipping %s: unknown kind token %r", path, m.group("kind"))
            continue
        img = read_image(path, layout.default_ppi)
        groups.setdefault(m.group("identity"), []).append(Impression(img, kind))

    if not groups:
        raise DatasetError(f"dataset is empty: no matching images under {root}")
    return [
        FingerRecord(ident, tuple(sorted(imps, key=lambda i: i.image.id)))
        for ident, imps in sorted(groups.items())
    ]


def domain_from_records(records: Sequence[FingerRecord], kind: str, name: str | None = None) -> DomainSet:
    domain = ROLLED if kind == ROLLED else LATENT
    images = [im for r in records for im in r.of_kind(kind)]
    return DomainSet(name or kind, tuple(images), domain)


# -- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    synthetic_id: str
    source_rolled_id: str
    model_id: str
    cluster_index: int | str
    tier: QualityTier | None
    seed: int
    aug: dict = field(default_factory=dict)

    def to_json(self) -> str:
        rec = {
            "synthetic_id": self.synthetic_id,
            "source_rolled_id": self.source_rolled_id,
            "model_id": self.model_id,
            "cluster_index": self.cluster_index,
            "tier": self.tier.value if self.tier is not None else None,
            "seed": self.seed,
            "aug": {k: self.aug[k] for k in sorted(self.aug)},
        }
        return json.dumps(rec, ensure_ascii=True)


@dataclass(frozen=True)
class SynthesisManifest:
    entries: tuple[ManifestEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def violations(self, records: Sequence[FingerRecord] | None = None) -> list[str]:
        out = []
        seen = set()
        for e in self.entries:
            if e.synthetic_id in seen:
                out.append(f"duplicate synthetic_id {e.synthetic_id!r}")
            seen.add(e.synthetic_id)
        if records is not None:
            owner = {im.id: r.identity for r in records for im in r.rolled}
            for e in self.entries:
                if e.source_rolled_id not in owner:
                    out.append(f"{e.synthetic_id}: source {e.source_rolled_id!r} not found among rolled prints")
        return out

    def with_tiers(self, tiers: dict[str, QualityTier]) -> SynthesisManifest:
        return SynthesisManifest(
            tuple(
                ManifestEntry(e.synthetic_id, e.source_rolled_id, e.model_id, e.cluster_index,
                              tiers.get(e.model_id, e.tier), e.seed, e.aug)
                for e in self.entries
            )
        )


def write_manifest(m: SynthesisManifest, path: str | Path, records: Sequence[FingerRecord] | None = None) -> Path:
    problems = m.violations(records)
    if problems:
        raise ManifestError("refusing to write invalid manifest: " + "; ".join(problems))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in m.entries:
            fh.write(e.to_json() + "\n")
    return path


def _entry_from_obj(obj: dict, lineno: int) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    keys = tuple(obj)
    if set(keys) != set(MANIFEST_KEYS):
        missing = sorted(set(MANIFEST_KEYS) - set(keys))
        extra = sorted(set(keys) - set(MANIFEST_KEYS))
        raise ManifestError(f"line {lineno}: bad keys (missing={missing}, unexpected={extra})")
    for key in ("synthetic_id", "source_rolled_id", "model_id"):
        if not isinstance(obj[key], str) or not obj[key]:
            raise ManifestError(f"line {lineno}: field {key!r} must be a non-empty string")
    ci = obj["cluster_index"]
    if not (isinstance(ci, int) and not isinstance(ci, bool)) and ci != "coarse":
        raise ManifestError(f"line {lineno}: field 'cluster_index' must be an integer or 'coarse'")
    tier = obj["tier"]
    if tier is not None:
        try:
            tier = QualityTier(tier)
        except ValueError:
            raise ManifestError(f"line {lineno}: field 'tier' has unknown value {tier!r}") from None
    if not isinstance(obj["seed"], int) or isinstance(obj["seed"], bool):
        raise ManifestError(f"line {lineno}: field 'seed' must be an integer")
    if not isinstance(obj["aug"], dict):
        raise ManifestError(f"line {lineno}: field 'aug' must be an object")
    return ManifestEntry(obj["synthetic_id"], obj["source_rolled_id"], obj["model_id"], ci, tier,
                         obj["seed"], dict(obj["aug"]))


def read_manifest(path: str | Path) -> SynthesisManifest:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            entries.append(_entry_from_obj(obj, lineno))
    m = SynthesisManifest(tuple(entries))
    problems = m.violations()
    if problems:
        raise ManifestError("; ".join(problems))
    return m
