import json

import numpy as np
import pytest

from hmdn.cli import main
from hmdn.config import RunConfig, load_config
from hmdn.exceptions import ConfigError
from hmdn.experiments import relative_improvement

SMALL_SYNTH = {"n_examples": 900, "test_size": 300, "nondist_cardinalities": [10, 10], "embedding_dim": 4}


def _config(tmp_path, **sections):
    cfg = {
        "quantizer": {"depth": 3, "codebook_size": 8},
        "backbone": {"hidden_units": [8, 6, 4]},
        "training": {"epochs": 1, "batch_size": 128},
        "data": {"synthetic": SMALL_SYNTH},
    }
    for k, v in sections.items():
        cfg[k] = {**cfg.get(k, {}), **v}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def _tsv(text):
    blocks = [b for b in text.strip().split("\n\n")]
    out = []
    for b in blocks:
        lines = b.strip().splitlines()
        header = lines[0].split("\t")
        out.append([dict(zip(header, ln.split("\t"))) for ln in lines[1:]])
    return out


def test_gen_data_default_partitions(tmp_path, capsys):
    cfg = _config(tmp_path, data={"synthetic": {**SMALL_SYNTH, "n_examples": 3000}})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    out = capsys.readouterr().out
    assert "# partitions=12" in out
    rows = [ln for ln in out.splitlines() if ln and not ln.startswith("#")][1:]
    assert len(rows) == 12
    assert sum(int(r.split("\t")[-1]) for r in rows) == 2700
    assert (tmp_path / "d" / "schema.json").exists()


def test_gen_data_single_example(tmp_path, capsys):
    out_dir = tmp_path / "one"
    assert main(["gen-data", "--config", _config(tmp_path), "--out", str(out_dir), "--n-examples", "1"]) == 0
    assert len((out_dir / "train.csv").read_text().splitlines()) == 2
    assert "# partitions=1 " in capsys.readouterr().out


def test_gen_data_is_byte_identical(tmp_path):
    cfg = _config(tmp_path)
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "b")])
    for name in ("train.csv", "test.csv", "schema.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_eval_inspect_from_csv(tmp_path, capsys):
    cfg = _config(tmp_path)
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")])
    csv_cfg = tmp_path / "csv.json"
    csv_cfg.write_text(json.dumps({
        "quantizer": {"depth": 3, "codebook_size": 8},
        "backbone": {"kind": "moe", "gate_input": "hierarchical_sD", "hidden_units": [8, 6, 4]},
        "training": {"epochs": 1, "batch_size": 128},
        "data": {"train": str(tmp_path / "d" / "train.csv"), "test": str(tmp_path / "d" / "test.csv"),
                 "schema": str(tmp_path / "d" / "schema.json")},
    }))
    ckpt = tmp_path / "m.ckpt"
    metrics = tmp_path / "metrics.jsonl"
    capsys.readouterr()
    assert main(["train", "--config", str(csv_cfg), "--checkpoint", str(ckpt), "--metrics-file", str(metrics)]) == 0
    records = [json.loads(ln) for ln in capsys.readouterr().out.splitlines()]
    assert {r["split"] for r in records} == {"train", "eval"}
    assert metrics.read_text().count("\n") == len(records)
    train_auc = [r["value"] for r in records if r["split"] == "eval" and r["metric"] == "auc"][-1]

    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "d" / "test.csv")]) == 0
    evals = {r["metric"]: r["value"] for r in map(json.loads, capsys.readouterr().out.splitlines())}
    assert evals["auc"] == train_auc
    assert "usage_entropy.3" in evals

    assert main(["inspect-codebooks", "--checkpoint", str(ckpt),
                 "--data", str(tmp_path / "d" / "test.csv"), "--histograms"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("level\tentropy")
    assert sum(json.loads(ln)["histogram"] != [] for ln in out[4:]) == 3


def test_train_alpha_zero_reports_l_rq(tmp_path, capsys):
    assert main(["train", "--config", _config(tmp_path), "--alpha", "0", "--backbone", "moe",
                 "--gate-input", "hierarchical_sD"]) == 0
    recs = [json.loads(ln) for ln in capsys.readouterr().out.splitlines()]
    assert any(r["metric"] == "l_rq" and r["value"] > 0 for r in recs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exits_2(tmp_path, capsys):
    assert main(["train", "--config", _config(tmp_path), "--lr", "1e300"]) == 2
    assert "numerical" in capsys.readouterr().err


def test_invalid_config_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"quantizer": {"depht": 3}}))
    assert main(["train", "--config", str(bad)]) == 1
    assert "depht" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["no-such-command"]) == 1


def test_gradcheck_default_passes(tmp_path, capsys):
    assert main(["gradcheck", "--config", _config(tmp_path)]) == 0
    assert "result=PASS" in capsys.readouterr().out


def test_gradcheck_dnn_tight(tmp_path, capsys):
    code = main(["gradcheck", "--config", _config(tmp_path), "--backbone", "dnn", "--no-quantizer",
                 "--tolerance", "1e-6", "--max-coords", "200"])
    out = capsys.readouterr().out
    assert code == 0, out


def test_gradcheck_unfrozen_codes(tmp_path, capsys):
    assert main(["gradcheck", "--config", _config(tmp_path), "--freeze-codes", "off"]) == 0
    assert "excluded=" in capsys.readouterr().out


def test_sweep_depth_single_and_duplicates(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["sweep-depth", "--config", cfg, "--depths", "1", "--seeds", "1"]) == 0
    (rows,) = _tsv(capsys.readouterr().out)
    assert len(rows) == 1 and rows[0]["depth"] == "1"
    assert main(["sweep-depth", "--config", cfg, "--depths", "2,2"]) == 1
    assert main(["sweep-depth", "--config", cfg, "--depths", "2", "--no-quantizer"]) == 1


def test_sweep_depth_runtime_grows(tmp_path, capsys):
    cfg = _config(tmp_path, data={"synthetic": {**SMALL_SYNTH, "n_examples": 3000}})
    assert main(["sweep-depth", "--config", cfg, "--depths", "1,12", "--seeds", "1"]) == 0
    (rows,) = _tsv(capsys.readouterr().out)
    assert float(rows[1]["seconds"]) > float(rows[0]["seconds"])


def test_ablation_table(tmp_path, capsys):
    assert main(["ablation", "--config", _config(tmp_path)]) == 0
    runs, table = _tsv(capsys.readouterr().out)
    assert len(runs) == 18
    assert [r["model"] for r in table] == ["dnn", "vanilla-moe", "hmdn-moe-implicit", "hmdn-moe-explicit",
                                          "vanilla-dw", "hmdn-dw"]
    by_model = {}
    for r in runs:
        by_model.setdefault(r["model"], []).append(float(r["auc"]))
    assert all(len(v) == 3 for v in by_model.values())
    dnn = np.mean(by_model["dnn"])
    assert float(table[0]["rela_impr"]) == 0.0
    for row in table:
        hand = (np.mean(by_model[row["model"]]) - dnn) / dnn * 100
        # printed AUCs carry 6 decimals
        assert abs(float(row["rela_impr"]) - hand) < 5e-4


def test_ablation_restricted(tmp_path, capsys):
    assert main(["ablation", "--config", _config(tmp_path), "--models", "dnn", "--seeds", "2"]) == 0
    runs, table = _tsv(capsys.readouterr().out)
    assert len(table) == 1 and len(runs) == 2
    assert main(["ablation", "--config", _config(tmp_path), "--models", "gbdt"]) == 1


def test_relative_improvement():
    assert relative_improvement(0.8, 0.8) == 0.0
    assert relative_improvement(0.81, 0.8) == pytest.approx(1.25)


def test_config_round_trip_and_env(tmp_path, monkeypatch):
    path = _config(tmp_path)
    cfg = load_config(path)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    monkeypatch.setenv("HMDN_CONFIG", path)
    assert load_config() == cfg
    monkeypatch.delenv("HMDN_CONFIG")
    assert load_config().synthetic is not None


@pytest.mark.parametrize("bad", [
    {"colour": {}},
    {"backbone": {"kind": "moe", "depth": 3}},
    {"training": {"epochs": -1}},
    {"data": {"synthetic": {"n_rows": 3}}},
    {"quantizer": {"enabled": False}, "backbone": {"gate_input": "hierarchical_sD"}},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)
