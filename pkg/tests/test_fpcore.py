import json

import numpy as np
import pytest

from conftest import gray
from latentsynth.fpcore import (
    LATENT, ROLLED, SYNTHETIC, DatasetError, DomainSet, FingerprintImage, FingerRecord, Impression, Layout,
    ManifestEntry, ManifestError, QualityTier, SynthesisManifest, domain_from_records, load_dataset, mated_pairs,
    read_image, read_manifest, validate_record, write_image, write_manifest,
)


def _write(root, name, value=100):
    write_image(gray(value, img_id=name), root / f"{name}.png")


def test_pixels_are_read_only():
    im = gray(10)
    with pytest.raises(ValueError):
        im.pixels[0, 0] = 1


def test_quality_tier_order():
    assert QualityTier.GOOD > QualityTier.BAD > QualityTier.UGLY
    assert sorted([QualityTier.BAD, QualityTier.GOOD, QualityTier.UGLY]) == [QualityTier.UGLY, QualityTier.BAD, QualityTier.GOOD]


def test_load_groups_by_shared_prefix(tmp_path):
    _write(tmp_path, "A_roll")
    _write(tmp_path, "A_lat")
    recs = load_dataset(tmp_path)
    assert len(recs) == 1
    assert recs[0].identity == "A"
    assert sorted(i.kind for i in recs[0].impressions) == [LATENT, ROLLED]


def test_load_empty_directory(tmp_path):
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(tmp_path)


def test_load_missing_directory(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope")


def test_load_sorted_identities(tmp_path):
    for ident in ("delta", "alpha", "charlie", "bravo"):
        _write(tmp_path, f"{ident}_roll")
        _write(tmp_path, f"{ident}_lat1")
    recs = load_dataset(tmp_path)
    assert [r.identity for r in recs] == ["alpha", "bravo", "charlie", "delta"]
    assert all(len(r.impressions) == 2 for r in recs)
    assert [im.id for im in recs[0].latents] == ["alpha_lat1"]


def test_load_custom_layout(tmp_path):
    _write(tmp_path, "F01-R")
    _write(tmp_path, "F01-L")
    _write(tmp_path, "README")  # does not match the pattern; skipped
    layout = Layout.from_config({"pattern": r"^(?P<identity>F\d+)-(?P<kind>[RL])$", "rolled_tag": "R", "latent_tag": "L"})
    recs = load_dataset(tmp_path, layout)
    assert [(r.identity, len(r.rolled), len(r.latents)) for r in recs] == [("F01", 1, 1)]


def test_layout_classify_synthetic():
    assert Layout().classify("syn-style-c0") == SYNTHETIC
    assert Layout().classify("roll2") == ROLLED
    assert Layout().classify("xyz") is None


def test_validate_duplicate_ids():
    im = gray(1, img_id="dup")
    rec = FingerRecord("A", (Impression(im, ROLLED), Impression(im, LATENT)))
    v = validate_record(rec)
    assert len(v) == 1 and "dup" in v[0]


def test_validate_valid_record():
    rec = FingerRecord("A", (Impression(gray(1, img_id="a"), ROLLED), Impression(gray(1, img_id="b"), LATENT)))
    assert validate_record(rec) == []


def test_validate_resolution():
    rec = FingerRecord("A", (Impression(gray(1, img_id="a", resolution=1000), ROLLED),))
    v = validate_record(rec)
    assert len(v) == 1 and "resolution != 500" in v[0]
    assert validate_record(rec, require_canonical=False) == []


def test_image_roundtrip_keeps_resolution(tmp_path):
    im = FingerprintImage(np.arange(64, dtype=np.uint8).reshape(8, 8), "x", 1000)
    back = read_image(write_image(im, tmp_path / "x.png"))
    assert back.resolution == 1000 and back.same_as(im)


def test_mated_pairs_identity_join():
    recs = [
        FingerRecord("A", (Impression(gray(1, img_id="A_roll"), ROLLED), Impression(gray(2, img_id="A_lat"), LATENT))),
        FingerRecord("B", (Impression(gray(1, img_id="B_roll"), ROLLED),)),
    ]
    pairs = mated_pairs(recs)
    assert [(p.identity, p.rolled.id, p.latent.id) for p in pairs] == [("A", "A_roll", "A_lat")]


def test_domain_from_records():
    recs = [FingerRecord("A", (Impression(gray(1, img_id="A_roll"), ROLLED), Impression(gray(2, img_id="A_lat"), LATENT)))]
    d = domain_from_records(recs, LATENT)
    assert isinstance(d, DomainSet) and d.ids == ["A_lat"]


def _entries(n=3):
    return tuple(
        ManifestEntry(f"s{i}_syn-m", f"s{i}_roll", "m", i % 2, [QualityTier.GOOD, None, QualityTier.UGLY][i % 3], 10 + i,
                      {"theta_deg": 1.5, "dx": -2.0} if i == 1 else {})
        for i in range(n)
    )


def test_manifest_roundtrip(tmp_path):
    m = SynthesisManifest(_entries())
    back = read_manifest(write_manifest(m, tmp_path / "m.jsonl"))
    assert back == m


def test_manifest_key_order(tmp_path):
    path = write_manifest(SynthesisManifest(_entries(1)), tmp_path / "m.jsonl")
    obj = json.loads(path.read_text().splitlines()[0])
    assert list(obj) == ["synthetic_id", "source_rolled_id", "model_id", "cluster_index", "tier", "seed", "aug"]


def test_manifest_duplicate_refused(tmp_path):
    e = _entries(1)[0]
    with pytest.raises(ManifestError, match="duplicate"):
        write_manifest(SynthesisManifest((e, e)), tmp_path / "m.jsonl")


def test_manifest_unknown_source_refused(tmp_path):
    recs = [FingerRecord("A", (Impression(gray(1, img_id="A_roll"), ROLLED),))]
    with pytest.raises(ManifestError, match="not found"):
        write_manifest(SynthesisManifest(_entries(1)), tmp_path / "m.jsonl", recs)


def test_manifest_hand_written_fixture(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"synthetic_id": "f7_syn-style-c1", "source_rolled_id": "f7_roll2", "model_id": "style-c1", '
                 '"cluster_index": 1, "tier": "Bad", "seed": 42, "aug": {"dx": 3.0}}\n')
    m = read_manifest(p)
    assert len(m) == 1
    e = m.entries[0]
    assert (e.synthetic_id, e.source_rolled_id, e.model_id, e.cluster_index, e.tier, e.seed, e.aug) == (
        "f7_syn-style-c1", "f7_roll2", "style-c1", 1, QualityTier.BAD, 42, {"dx": 3.0})


@pytest.mark.parametrize("line, msg", [
    ("not json", "invalid JSON"),
    ('{"synthetic_id": "a"}', "bad keys"),
    ('{"synthetic_id": "a", "source_rolled_id": "b", "model_id": "m", "cluster_index": 0, "tier": "Great", "seed": 1, "aug": {}}', "tier"),
    ('{"synthetic_id": "a", "source_rolled_id": "b", "model_id": "m", "cluster_index": 0, "tier": null, "seed": "x", "aug": {}}', "seed"),
])
def test_manifest_bad_lines(tmp_path, line, msg):
    p = tmp_path / "m.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(ManifestError, match=msg):
        read_manifest(p)


def test_with_tiers():
    m = SynthesisManifest(_entries()).with_tiers({"m": QualityTier.BAD})
    assert {e.tier for e in m.entries} == {QualityTier.BAD}
