import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from loopsr.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_OK, main
from loopsr.experiment import SUMMARY_COLUMNS, TABLE_ROWS, VARIANTS, RunConfig, config_from_dict, load_config

TINY = {
    "seed": 0,
    "ppo": {"envs": 4, "steps": 8, "minibatches": 2, "epochs": 1, "iterations": 4, "n_start": 0, "hidden": [8],
            "snapshots": 2, "rollouts_per_snapshot": 1},
    "encoder": {"d_model": 16, "heads": 2, "layers": 1, "epochs": 1, "batch": 8},
    "loop": {"loops": 2, "iterations_per_episode": 1, "episodes_per_redeploy": 1, "eval_episodes": 2,
             "neighbors": 4},
    "eval": {"episodes": 2},
    "theory": {"pairs": 5, "max_states": 4, "max_actions": 3},
    "ablate": {"envs_per_terrain": 1, "identification_steps": 1, "held_out_rounds": 1},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("run")
    assert main(["pretrain", "--config", str(tiny_config), "--out", str(out)]) == EXIT_OK
    return out


def test_pretrain_writes_all_artifacts(pretrained):
    for rel in ("config.json", "dataset.lsrt", "checkpoints/policy.lsrw", "checkpoints/codec.lsrw",
                "store/reference.lsrs", "metrics/pretrain.jsonl", "metrics/codec.jsonl"):
        assert (pretrained / rel).is_file(), rel
    lines = (pretrained / "metrics" / "pretrain.jsonl").read_text().splitlines()
    assert len(lines) == 4 and all(json.loads(x) for x in lines)


def test_adapt_then_eval(pretrained):
    assert main(["adapt", "--out", str(pretrained), "--loops", "3"]) == EXIT_OK
    recs = [json.loads(x) for x in (pretrained / "metrics" / "adapt.jsonl").read_text().splitlines()]
    assert [r["loop"] for r in recs] == [0, 1, 2]
    with open(pretrained / "metrics" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == SUMMARY_COLUMNS and len(rows) == 1
    assert rows[0]["terrain"] == "stairs" and float(rows[0]["expert_reward"]) > 0
    assert main(["eval", "--out", str(pretrained)]) == EXIT_OK
    doc = json.loads((pretrained / "metrics" / "eval.json").read_text())
    assert set(doc["results"]) == {"policy", "adapted", "origin", "expert"}


def test_adapt_metrics_are_reproducible(pretrained, tmp_path):
    outs = []
    for k in range(2):
        assert main(["adapt", "--out", str(pretrained), "--loops", "2", "--test-terrain", "slope_up"]) == EXIT_OK
        outs.append((pretrained / "metrics" / "adapt.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_ablate_table(pretrained):
    assert main(["ablate", "--out", str(pretrained)]) == EXIT_OK
    with open(pretrained / "metrics" / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["domain", *VARIANTS]
    assert [r[0] for r in rows[1:]] == list(TABLE_ROWS)
    for slug in ("wo-con", "wo-AE"):
        assert (pretrained / "metrics" / f"codec_{slug}.jsonl").is_file()


def test_theory_sweep_and_failure(tmp_path, tiny_config):
    assert main(["theory", "--config", str(tiny_config), "--out", str(tmp_path / "ok")]) == EXIT_OK
    summary = json.loads((tmp_path / "ok" / "theory_summary.json").read_text())
    assert summary["pairs"] == 5 and summary["identity_failures"] == 0
    bad = json.loads(tiny_config.read_text())
    bad["theory"]["corrupt_pair"] = 2
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(bad))
    assert main(["theory", "--config", str(cfg), "--out", str(tmp_path / "bad")]) == EXIT_NUMERIC
    dump = tmp_path / "bad" / "failed_pair_2.json"
    assert dump.is_file()
    assert main(["theory", "--pair", str(dump), "--out", str(tmp_path / "replay")]) == EXIT_NUMERIC


def test_exit_codes(tmp_path, tiny_config):
    assert main(["pretrain", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    doc = json.loads(tiny_config.read_text())
    doc["loop"]["taus"] = 0.5
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert main(["adapt", "--out", str(tmp_path / "empty")]) == EXIT_MISSING
    assert main(["theory", "--pair", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_MISSING
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main(["adapt", "--out", str(tmp_path), "--test-terrain", "lava"]) == EXIT_CONFIG


def test_unknown_key_message():
    with pytest.raises(Exception, match="unknown key 'loop.taus'"):
        config_from_dict({"loop": {"taus": 0.5}})
    with pytest.raises(Exception, match="expected a number"):
        config_from_dict({"loop": {"tau": "high"}})


def test_seed_propagates():
    cfg = config_from_dict({"seed": 7})
    assert cfg.ppo.seed == cfg.encoder.seed == cfg.loop.seed == cfg.theory.seed == 7
    assert RunConfig().to_dict()["schema_version"] == 1


def test_bad_thread_setting(tmp_path, monkeypatch):
    monkeypatch.setenv("LSR_THREADS", "many")
    assert main(["theory", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "loopsr.cli", "theory", "--out", str(tmp_path / "t")],
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == EXIT_OK, proc.stderr
    assert "identity holds" in proc.stdout


@pytest.mark.parametrize("name", ["desk.json", "smoke.json"])
def test_shipped_configs_validate(name):
    cfg = load_config(Path(__file__).parent.parent / "configs" / name)
    assert cfg.loop.tau == 0.7 and cfg.loop.alpha == 0.8
