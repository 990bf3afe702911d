import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from latentsynth import config as config_mod
from latentsynth.cli import HELP, READS, build_parser, dispatch
from latentsynth.evalkit import roc_tdr_at_far
from latentsynth.fpcore import read_manifest
from latentsynth.matcher import SimilarityScore, write_scores

TINY = [
    "data.n_rolled=8", "data.n_latent=9", "data.image_size=32", "img.train_size=32", "gan.ngf=4", "gan.ndf=4",
    "gan.residual_blocks=1", "gan.batch_size=2", "gan.max_epochs=1", "gan.finetune_max_epochs=1", "aug.enabled=false",
    "synthesis.n_identities=6", "matcher.input_size=32", "matcher.epochs=1", "matcher.embed_dim=16",
]


def _sets():
    return [a for kv in TINY for a in ("--set", kv)]


# -- config -------------------------------------------------------------------------


def test_defaults_are_reference_scale():
    cfg = config_mod.load_config()
    assert cfg["cluster"]["k"] == 3 and cfg["gan"]["patience"] == 50 and cfg["tiering"]["far"] == 0.001
    assert cfg["gan"]["cycle_weight"] == 10.0


def test_override_types_and_unknown_key(tmp_path):
    cfg = config_mod.load_config(None, ["gan.max_epochs=7", "fusion.scope=per-probe", "aug.enabled=false",
                                        "data.latent_styles=['bad']"])
    assert cfg["gan"]["max_epochs"] == 7 and cfg["fusion"]["scope"] == "per-probe"
    assert cfg["aug"]["enabled"] is False and cfg["data"]["latent_styles"] == ["bad"]
    with pytest.raises(config_mod.ConfigError):
        config_mod.load_config(None, ["gan.nope=1"])
    with pytest.raises(config_mod.ConfigError):
        config_mod.load_config(None, ["gan=1"])
    with pytest.raises(config_mod.ConfigError):
        config_mod.load_config(None, ["novalue"])
    p = tmp_path / "c.toml"
    p.write_text("[cluster]\nk = 2\n")
    assert config_mod.load_config(p)["cluster"]["k"] == 2
    p.write_text("[cluster\n")
    with pytest.raises(config_mod.ConfigError):
        config_mod.load_config(p)


def test_shipped_configs_load():
    for name in ("smoke", "reference"):
        cfg = config_mod.load_config(f"configs/{name}.toml")
        assert cfg["cluster"]["k"] == 3
        config_mod.train_config(cfg)
        config_mod.matcher_config(cfg)


def test_every_key_documented():
    def leaves(d, prefix=""):
        for k, v in d.items():
            if isinstance(v, dict) and k != "clahe":
                yield from leaves(v, f"{prefix}{k}.")
            elif isinstance(v, dict):
                yield from (f"{prefix}{k}.{kk}" for kk in v)
            else:
                yield f"{prefix}{k}"
    missing = [k for k in leaves(config_mod.DEFAULTS) if k not in config_mod.KEY_DOCS]
    assert missing == []


# -- CLI ----------------------------------------------------------------------------


def test_unknown_subcommand_exit_2(capsys):
    assert dispatch(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err
    assert dispatch(["evaluate", "--bogus"]) == 2


@pytest.mark.parametrize("name", sorted(HELP))
def test_help_lists_config_keys(name):
    text = build_parser()._subparsers._group_actions[0].choices[name].format_help()
    for key in config_mod.KEY_DOCS:
        if any(key == p or key.startswith(p + ".") for p in READS[name]):
            assert key in text, key
    for flag in ("--config", "--seed", "--out", "--set"):
        assert flag in text


def test_domain_error_exit_1(tmp_path, capsys):
    assert dispatch(["synthesize", "--out", str(tmp_path)]) == 1
    assert dispatch(["cluster", "--out", str(tmp_path), "--set", "gan.bogus=1"]) == 1
    assert "error" in capsys.readouterr().err
    events = [json.loads(l) for l in (tmp_path / "logs" / "events.jsonl").read_text().splitlines()]
    assert events[-1]["event"] == "error"


def test_evaluate_matches_metric(tmp_path, capsys):
    rng = np.random.default_rng(0)
    scores = [SimilarityScore(float(v), f"p{i}", "g", "genuine") for i, v in enumerate(rng.normal(1, 1, 200))]
    scores += [SimilarityScore(float(v), f"q{i}", "g", "impostor") for i, v in enumerate(rng.normal(0, 1, 3000))]
    path = write_scores(tmp_path / "scores.csv", scores, "m1")
    assert dispatch(["evaluate", "--scores", str(path), "--far", "0.001", "--out", str(tmp_path)]) == 0
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    gen = [float(r["raw_score"]) for r in rows if r["label"] == "genuine"]
    imp = [float(r["raw_score"]) for r in rows if r["label"] == "impostor"]
    expect = roc_tdr_at_far(gen, imp, 0.001)
    assert f"TDR {100 * expect:.2f}%" in capsys.readouterr().out
    assert (tmp_path / "metrics" / "roc_m1.csv").exists()


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    base = ["--out", str(out), "--seed", "7", *_sets()]
    codes = {}
    for cmd in (["train-coarse"], ["cluster"], ["finetune-styles"], ["synthesize"], ["assign-tiers"],
                ["finetune-matcher"], ["report"]):
        codes[cmd[0]] = dispatch(cmd + base)
    m = out / "matchers"
    codes["identify"] = dispatch(["identify", "--matcher", str(m / "DeepPrint"), "--matcher", str(m / "DeepPrint2"), *base])
    codes["evaluate"] = dispatch(["evaluate", "--scores", str(out / "scores" / "fused.csv"), *base])
    return out, codes


def test_cli_flow_exit_codes(flow):
    _, codes = flow
    assert codes == {k: 0 for k in codes} and len(codes) == 9


def test_cli_flow_artifacts(flow):
    out, _ = flow
    man = read_manifest(out / "manifest.jsonl")
    assert len(man) == 6 and all(e.tier is not None for e in man.entries)
    assert json.loads((out / "logs" / "events.jsonl").read_text().splitlines()[0])["seed"] == 7
    for rel in ("clusters.csv", "models/coarse/weights.pt", "metrics/tiers.csv", "matchers/DeepPrint2/weights.pt",
                "scores/fused.csv", "metrics/cmc_fused.csv", "metrics/roc_fused.csv", "metrics/tsne.json",
                "metrics/tsne.png", "metrics/quality_synthetic.csv", "metrics/minutiae_tiers.json"):
        assert (out / rel).exists(), rel
    assert len(list((out / "models").glob("style-c*"))) == 3
    assert len(list((out / "synth").glob("*.png"))) == 6


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "latentsynth.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in HELP:
        assert name in proc.stdout
