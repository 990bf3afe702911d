import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import silhouette_score

from conftest import gray, ridge_image
from skeletons import FIXTURES, cn_oracle, render
from latentsynth.evalkit import (
    BIFURCATION, ENDING, EXTERNAL_NFIQ2, INTERNAL_PROXY, REFERENCE_MEAN_COUNTS, MetricError, Minutia, MinutiaSet,
    QualityScore, ScoreMatrix, build_gallery, cmc_ranks, crossing_numbers, extract_minutiae, identify_1toN,
    mate_ranks, minutiae_tier_stats, proxy_quality, quality_histogram, raw_minutiae, roc_curve, roc_tdr_at_far,
    scatter_groups, tsne_embed, write_cmc_csv, write_roc_csv, write_scatter_json,
)
from latentsynth.fpcore import FingerprintImage, FingerRecord, Impression, ManifestEntry, QualityTier, ROLLED, SynthesisManifest


def brute_tdr(gen, imp, far):
    best = float("inf")
    for t in sorted(set(gen) | set(imp)):
        if sum(s >= t for s in imp) / len(imp) <= far:
            best = min(best, t)
    return sum(s >= best for s in gen) / len(gen)


def brute_ranks(scores, mates):
    out = []
    for i, row in enumerate(scores):
        mate = row[mates[i]]
        out.append(1 + sum(1 for j, s in enumerate(row) if j != mates[i] and s >= mate))
    return out


def _matrix(scores, mates):
    p = [f"p{i}" for i in range(scores.shape[0])]
    g = [f"g{j}" for j in range(scores.shape[1])]
    return ScoreMatrix(p, g, scores, {p[i]: g[m] for i, m in enumerate(mates)})


# -- ROC ----------------------------------------------------------------------------


def test_tdr_separable():
    assert roc_tdr_at_far([1.0] * 5, [0.0] * 50, 0.001) == 1.0


def test_tdr_hand_example():
    assert roc_tdr_at_far([0.9, 0.8, 0.3], [0.5, 0.4, 0.2, 0.1], 0.25) == pytest.approx(2 / 3, abs=1e-12)


def test_tdr_chance_case():
    rng = np.random.default_rng(0)
    s = rng.normal(size=200_000)
    tdr = roc_tdr_at_far(s[:100_000], s[100_000:], 0.01)
    assert abs(tdr - 0.01) < 0.002


@pytest.mark.parametrize("gen,imp,far", [([], [0.1], 0.1), ([0.1], [], 0.1), ([0.1], [0.2], 0.0), ([0.1], [0.2], 1.0)])
def test_tdr_errors(gen, imp, far):
    with pytest.raises(MetricError):
        roc_tdr_at_far(gen, imp, far)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=30), st.lists(st.integers(0, 20), min_size=1, max_size=30),
       st.sampled_from([0.001, 0.05, 0.1, 0.25, 0.5]))
def test_tdr_matches_bruteforce_with_ties(gen, imp, far):
    gen, imp = [g / 20 for g in gen], [i / 20 for i in imp]
    assert roc_tdr_at_far(gen, imp, far) == brute_tdr(gen, imp, far)


def test_tdr_monotone_in_far():
    rng = np.random.default_rng(1)
    g, i = rng.normal(1, 1, 300), rng.normal(0, 1, 300)
    vals = [roc_tdr_at_far(g, i, f) for f in (0.001, 0.01, 0.05, 0.1, 0.3, 0.6)]
    assert vals == sorted(vals)


def test_roc_curve_and_csv(tmp_path):
    far, tdr, thr = roc_curve([0.9, 0.8, 0.3], [0.5, 0.4, 0.2, 0.1])
    assert np.all(np.diff(thr) < 0) and np.all(np.diff(far) >= 0) and np.all(np.diff(tdr) >= 0)
    assert far[-1] == 1.0 and tdr[-1] == 1.0
    p = write_roc_csv(tmp_path / "r.csv", [0.9, 0.8, 0.3], [0.5, 0.4, 0.2, 0.1], "m")
    lines = p.read_text().splitlines()
    assert lines[0] == "label,threshold,far,tdr" and len(lines) == 1 + len(thr)


# -- CMC ----------------------------------------------------------------------------


def test_cmc_mate_on_top():
    s = np.eye(4) + 0.1
    assert cmc_ranks(_matrix(s, [0, 1, 2, 3]))[0] == 1.0


def test_cmc_hand_example():
    s = np.array([[0.9, 0.5, 0.1], [0.8, 0.7, 0.2]])
    assert cmc_ranks(_matrix(s, [0, 2])) == [0.5, 0.5, 1.0]


def test_cmc_all_tied_is_pessimistic():
    s = np.full((3, 4), 0.5)
    c = cmc_ranks(_matrix(s, [0, 1, 2]))
    assert c[0] == 0.0 and c[-1] == 1.0
    assert cmc_ranks(_matrix(np.full((1, 1), 0.5), [0]))[0] == 1.0


def test_cmc_open_set_rejected():
    with pytest.raises(MetricError):
        ScoreMatrix(["p"], ["g"], np.zeros((1, 1)), {"p": "h"})
    with pytest.raises(MetricError):
        ScoreMatrix(["p"], ["g"], np.full((1, 1), np.nan), {"p": "g"})


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12))
def test_cmc_matches_bruteforce(seed, n_p, n_g):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 5, (n_p, n_g)) / 4.0  # coarse grid forces ties
    mates = rng.integers(0, n_g, n_p).tolist()
    m = _matrix(s, mates)
    assert mate_ranks(m).tolist() == brute_ranks(s, mates)
    c = cmc_ranks(m)
    assert all(a <= b for a, b in zip(c, c[1:])) and c[-1] == 1.0


def test_cmc_csv(tmp_path):
    p = write_cmc_csv(tmp_path / "c.csv", [0.5, 0.5, 1.0], "x")
    assert p.read_text().splitlines() == ["label,rank,accuracy", "x,1,0.5", "x,2,0.5", "x,3,1.0"]


# -- identification -----------------------------------------------------------------


class _PixelMatcher:
    """Stand-in matcher handle: cosine of mean-removed pixels."""

    class config:
        input_size = 32

    name = "pix"


def _record(identity, seed):
    im = ridge_image(size=32, period=6, angle=seed * 0.4, img_id=f"{identity}_roll", noise=3, seed=seed)
    return FingerRecord(identity, (Impression(im, ROLLED),))


def test_identify_shape_and_selfmatch(monkeypatch):
    import latentsynth.evalkit.identification as ident
    from latentsynth.matcher import EmbeddingVector

    def fake_embed(_m, images):
        out = []
        for im in images:
            v = im.pixels.astype(float).ravel()
            v = v - v.mean()
            out.append(EmbeddingVector(v / np.linalg.norm(v), im.id))
        return out

    monkeypatch.setattr(ident, "embed_batch", fake_embed)
    mates = [_record("a", 1), _record("b", 2)]
    bg = [_record(f"z{i}", 10 + i) for i in range(3)]
    probes = [r.rolled[0].with_pixels(r.rolled[0].pixels, id=f"probe-{r.identity}") for r in mates]
    m = identify_1toN(probes, ["a", "b"], mates, bg, _PixelMatcher())
    assert m.scores.shape == (2, 5)
    assert np.allclose(m.scores[[0, 1], m.mate_columns()], 1.0)
    assert cmc_ranks(m)[0] == 1.0


def test_gallery_collision():
    with pytest.raises(MetricError):
        build_gallery([_record("a", 1)], [_record("a", 2)])


# -- quality ------------------------------------------------------------------------


def test_proxy_blank_is_zero():
    assert proxy_quality(gray(255, (64, 64))) == 0.0


def test_proxy_clean_beats_noisy():
    clean = proxy_quality(ridge_image(noise=0))
    noisy = proxy_quality(ridge_image(noise=60, seed=3))
    assert 0 <= noisy < clean <= 100


def test_quality_score_contract():
    with pytest.raises(ValueError):
        QualityScore(101.0, INTERNAL_PROXY, "x")
    with pytest.raises(ValueError):
        QualityScore(50.0, "made-up", "x")


def test_histogram_proxy(tmp_path, monkeypatch):
    monkeypatch.delenv("NFIQ2_BIN", raising=False)
    ims = [ridge_image(noise=n, img_id=f"i{n}", seed=n) for n in (0, 20, 40, 80)]
    rep = quality_histogram(ims)
    assert rep.source == INTERNAL_PROXY and len(rep.scores) == 4
    assert len(rep.counts) == 20 and rep.counts.sum() == 4 and rep.edges[0] == 0 and rep.edges[-1] == 100
    assert all(s.source == INTERNAL_PROXY for s in rep.scores)
    assert len(rep.write_csv(tmp_path / "q.csv").read_text().splitlines()) == 21


def test_histogram_external_tool(tmp_path):
    tool = tmp_path / "nfiq2"
    tool.write_text("#!/bin/sh\ncase \"$1\" in *bad*) echo boom >&2; exit 3;; esac\necho 42\n")
    tool.chmod(0o755)
    ims = [ridge_image(img_id="good1"), ridge_image(img_id="bad1"), ridge_image(img_id="good2")]
    rep = quality_histogram(ims, {"nfiq2_path": str(tool)})
    assert rep.source == EXTERNAL_NFIQ2
    assert [s.value for s in rep.scores] == [42.0, 42.0]
    assert list(rep.failures) == ["bad1"]


# -- t-SNE --------------------------------------------------------------------------


def _blobs(n=20, dim=192, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1, (n, dim))
    b = rng.normal(0, 1, (n, dim)) + 20.0
    return np.concatenate([a, b]), ["a"] * n + ["b"] * n


def test_tsne_shape_determinism_separation():
    x, labels = _blobs()
    p1 = tsne_embed(x, seed=3)
    p2 = tsne_embed(x, seed=3)
    assert p1.shape == (40, 2) and np.array_equal(p1, p2)
    assert silhouette_score(p1, labels) > 0.5


def test_tsne_too_few():
    with pytest.raises(ValueError):
        tsne_embed(np.zeros((4, 3)))


def test_scatter_json(tmp_path):
    pts = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    g = scatter_groups(pts, ["b", "a", "b"], ["x", "y", "z"])
    assert list(g) == ["a", "b"] and g["b"][1] == {"x": 4.0, "y": 5.0, "id": "z"}
    p = write_scatter_json(tmp_path / "t.json", pts, ["b", "a", "b"])
    assert set(json.loads(p.read_text())) == {"a", "b"}


# -- minutiae -----------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_crossing_number_fixture(name):
    skel, endings, bifs = FIXTURES[name]
    assert cn_oracle(skel) == (endings, bifs)
    pts = raw_minutiae(skel)
    assert (sum(k == ENDING for *_, k in pts), sum(k == BIFURCATION for *_, k in pts)) == (endings, bifs)


@pytest.mark.parametrize("name", sorted(set(FIXTURES) - {"dot"}))  # pre-blur widens a lone pixel into a blob
def test_extractor_on_rendered_fixture(name):
    skel, endings, bifs = FIXTURES[name]
    m = extract_minutiae(FingerprintImage(render(skel), name), use_mask=False, filter_spurious=False, min_coherence=0)
    assert (m.count(ENDING), m.count(BIFURCATION)) == (endings, bifs)
    assert all(0 <= p.angle < 2 * math.pi for p in m.points)


def test_crossing_numbers_map():
    skel = FIXTURES["y_shape"][0]
    cn = crossing_numbers(skel)
    assert cn[7, 7] == 3 and cn[12, 7] == 1 and cn[~skel].max() == 0


def test_blank_has_no_minutiae():
    assert len(extract_minutiae(gray(255, (96, 96)))) == 0
    assert len(extract_minutiae(gray(0, (96, 96)))) == 0


def test_merge_and_border_filters():
    img = FingerprintImage(render(FIXTURES["h_shape"][0]), "h")
    raw = extract_minutiae(img, use_mask=False, filter_spurious=False, min_coherence=0)
    filt = extract_minutiae(img, use_mask=False, filter_spurious=True, min_coherence=0)
    # everything on a 15 px image lies within 10 px of the edge
    assert len(raw) == 6 and len(filt) == 0


def test_minutia_set_bounds():
    with pytest.raises(ValueError):
        MinutiaSet((Minutia(20, 1, 0.0, ENDING),), "x", (10, 10))
    with pytest.raises(ValueError):
        MinutiaSet((Minutia(1, 1, 7.0, ENDING),), "x", (10, 10))


def test_coherence_filter_drops_noise_minutiae():
    noisy = ridge_image(size=128, period=8, noise=70, seed=5)
    kept = extract_minutiae(noisy)
    unfiltered = extract_minutiae(noisy, min_coherence=0)
    assert len(kept) < len(unfiltered)
    assert {(p.x, p.y) for p in kept.points} <= {(p.x, p.y) for p in unfiltered.points}


def _manifest(tiers):
    entries = [ManifestEntry(f"s{i}", f"r{i}", m, 0, t, 0) for i, (m, t) in enumerate(tiers)]
    return SynthesisManifest(entries)


def test_tier_stats_stub_counts():
    G, B, U = QualityTier.GOOD, QualityTier.BAD, QualityTier.UGLY
    man = _manifest([("g", G), ("g", G), ("b", B), ("b", B), ("u", U), ("u", U)])
    counts = {"s0": 10, "s1": 10, "s2": 6, "s3": 6, "s4": 4, "s5": 4}
    st_ = minutiae_tier_stats(man, counts=counts)
    assert st_.mean == {"Good": 10.0, "Bad": 6.0, "Ugly": 4.0} and st_.monotone
    assert st_.std["Good"] == 0.0 and st_.n["Bad"] == 2
    assert "Good>=Bad>=Ugly: True" in st_.report()
    counts["s0"] = counts["s1"] = 1
    assert not minutiae_tier_stats(man, counts=counts).monotone


def test_tier_stats_unassigned():
    with pytest.raises(ValueError):
        minutiae_tier_stats(_manifest([("g", None)]), counts={"s0": 1})


def test_reference_counts_recorded():
    assert REFERENCE_MEAN_COUNTS["sd27"] == {"Good": 68, "Bad": 45, "Ugly": 35}
    assert REFERENCE_MEAN_COUNTS["synthetic"] == {"Good": 55, "Bad": 39, "Ugly": 35}
