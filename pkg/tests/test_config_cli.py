"""Config document handling and the batch command-line interface."""

import json
import os

import pytest

from embst.cli import main
from embst.config import (ConfigError, config_hash, load_config, make_model_config,
                          make_synth_spec, normalize_config, save_config)
from embst.metrics import bleu


# ---------------------------------------------------------------------------
# Config document


def test_defaults_fill_every_section():
    cfg = normalize_config({})
    assert set(cfg) == {"synth", "bpe", "model", "train"}
    assert cfg["synth"]["vocab_size"] == 50
    assert cfg["bpe"]["merges"] == 200
    assert cfg["model"]["tau"] == 0.1
    assert cfg["train"]["steps"] == 20000


def test_partial_section_keeps_other_defaults():
    cfg = normalize_config({"train": {"steps": 7}})
    assert cfg["train"]["steps"] == 7
    assert cfg["train"]["batch_size"] == 16


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown config sections: optimizer"):
        normalize_config({"optimizer": {}})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown keys in 'synth': vocab"):
        normalize_config({"synth": {"vocab": 10}})


def test_sections_and_root_must_be_objects():
    with pytest.raises(ConfigError, match="root must be"):
        normalize_config([1, 2])
    with pytest.raises(ConfigError, match="'model' must be an object"):
        normalize_config({"model": 3})


def test_invalid_synth_values_become_config_errors():
    with pytest.raises(ConfigError):
        normalize_config({"synth": {"vocab_size": 5}})
    with pytest.raises(ConfigError):
        normalize_config({"synth": {"noise_std": -1.0}})


def test_hash_ignores_key_order_and_tracks_values():
    a = normalize_config({"train": {"steps": 9, "beam": 2}})
    b = normalize_config({"train": {"beam": 2, "steps": 9}})
    assert config_hash(a) == config_hash(b)
    c = normalize_config({"train": {"steps": 10, "beam": 2}})
    assert config_hash(a) != config_hash(c)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_save_load_round_trip(tmp_path):
    cfg = normalize_config({"synth": {"vocab_size": 12, "embed_dim": 8}})
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert config_hash(load_config(path)) == config_hash(cfg)


def test_make_model_config_wires_embed_dim():
    cfg = normalize_config({"synth": {"embed_dim": 24}})
    mc = make_model_config(cfg, "cs", 54, 120)
    assert mc.embed_dim == 24
    assert mc.objective == "cs"
    assert mc.src_vocab_size == 54


def test_make_model_config_validates():
    cfg = normalize_config({"model": {"tau": -0.5}})
    with pytest.raises(ConfigError):
        make_model_config(cfg, "cs", 54, 120)


def test_make_synth_spec_round_trips_fields():
    cfg = normalize_config({"synth": {"len_max": 5, "seed": 11}})
    spec = make_synth_spec(cfg)
    assert spec.len_max == 5 and spec.seed == 11


# ---------------------------------------------------------------------------
# CLI flows on a tiny workspace

TINY = {
    "synth": {"vocab_size": 12, "embed_dim": 8, "frames_min": 1, "frames_max": 2,
              "noise_std": 0.05, "len_min": 1, "len_max": 4, "n_train": 12,
              "n_dev": 4, "n_test": 8, "seed": 3},
    "bpe": {"merges": 12},
    "model": {"enc_layers": 2, "init_scale": 0.2},
    "train": {"steps": 6, "ckpt_every": 3, "batch_size": 4, "beam": 2,
              "decode_max_len": 12},
}


def _last_json_line(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth + bpe + train(me) chain shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY), encoding="utf-8")
    data = root / "data"
    bpe = root / "bpe.json"
    run = root / "run_me"
    assert main(["synth", "--config", str(cfg_path), "--out", str(data)]) == 0
    assert main(["bpe", "--data", str(data), "--merges", "12", "--out", str(bpe)]) == 0
    assert main(["train", "--config", str(cfg_path), "--data", str(data),
                 "--variant", "me", "--out", str(run)]) == 0
    with open(run / "run.json", encoding="utf-8") as f:
        run_doc = json.load(f)
    ckpt = run / f"ckpt_{run_doc['selected_step']}.params"
    return {"root": root, "cfg": cfg_path, "data": data, "bpe": bpe,
            "run": run, "run_doc": run_doc, "ckpt": ckpt}


def test_synth_writes_dataset_with_manifest(workspace, capsys):
    manifest_path = workspace["data"] / "manifest.json"
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["spec"]["vocab_size"] == 12
    assert set(manifest["checksums"]) >= {"embeddings.vec", "train/src.txt",
                                          "train/frames.bin"}
    # re-running into a fresh directory reproduces every artifact checksum
    out2 = workspace["root"] / "data2"
    assert main(["synth", "--config", str(workspace["cfg"]), "--out", str(out2)]) == 0
    emitted = _last_json_line(capsys)
    assert emitted["checksums"] == manifest["checksums"]
    assert emitted["config_hash"] == manifest["config_hash"]


def test_seed_flag_overrides_config_seeds(workspace, capsys):
    out = workspace["root"] / "data_seed9"
    assert main(["--seed", "9", "synth", "--config", str(workspace["cfg"]),
                 "--out", str(out)]) == 0
    emitted = _last_json_line(capsys)
    with open(workspace["data"] / "manifest.json", encoding="utf-8") as f:
        base = json.load(f)
    assert emitted["config_hash"] != base["config_hash"]
    assert emitted["checksums"] != base["checksums"]


def test_bpe_command_stamps_dataset_hash(workspace):
    with open(workspace["bpe"], encoding="utf-8") as f:
        doc = json.load(f)
    with open(workspace["data"] / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    assert doc["config_hash"] == manifest["config_hash"]
    assert len(doc["merges"]) <= 12


def test_train_writes_run_dir(workspace):
    doc = workspace["run_doc"]
    assert doc["steps"] == 6
    assert doc["failed"] is False
    steps = [c["step"] for c in doc["checkpoints"]]
    assert steps == [0, 3, 6]
    assert doc["selected_step"] in steps
    for c in doc["checkpoints"]:
        assert (workspace["run"] / c["file"]).exists()


def test_train_with_bpe_target_side(workspace, capsys):
    out = workspace["root"] / "run_me_bpe"
    assert main(["train", "--config", str(workspace["cfg"]), "--data", str(workspace["data"]),
                 "--variant", "me", "--out", str(out), "--bpe", str(workspace["bpe"])]) == 0
    emitted = _last_json_line(capsys)
    assert emitted["steps"] == 6 and "dev_bleu" in emitted


def test_translate_to_file(workspace, capsys):
    hyp_path = workspace["root"] / "hyps.json"
    assert main(["translate", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
                 "--split", "test", "--beam", "2", "--out", str(hyp_path)]) == 0
    capsys.readouterr()
    with open(hyp_path, encoding="utf-8") as f:
        doc = json.load(f)
    assert len(doc["hypotheses"]) == TINY["synth"]["n_test"]
    assert doc["split"] == "test" and doc["beam"] == 2
    assert len(doc["recognized"]) == len(doc["hypotheses"])  # me has a recognizer


def test_translate_to_stdout(workspace, capsys):
    assert main(["translate", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
                 "--split", "dev", "--beam", "1"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["hypotheses"]) == TINY["synth"]["n_dev"]


def test_translate_recognize_mode(workspace, capsys):
    assert main(["translate", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
                 "--split", "dev", "--recognize"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["recognize"] is True
    assert len(doc["hypotheses"]) == TINY["synth"]["n_dev"]


def test_score_hand_values(tmp_path, capsys):
    hyp = tmp_path / "hyp.txt"
    ref = tmp_path / "ref.txt"
    hyp.write_text("a b c d\na b c d e f\n", encoding="utf-8")
    ref.write_text("a b c d\na\n", encoding="utf-8")
    assert main(["score", "--hyp", str(hyp), "--refs", str(ref)]) == 0
    doc = _last_json_line(capsys)
    # line 1 is exact (0%); line 2 has 5 edits against a 1-word reference (500%)
    assert doc["wer_mean"] == pytest.approx((0.0 + 500.0) / 2)
    want = bleu([["a", "b", "c", "d"], ["a", "b", "c", "d", "e", "f"]],
                [[["a", "b", "c", "d"]], [["a"]]])
    assert doc["bleu"] == pytest.approx(want)
    assert doc["utterances"] == 2


def test_score_multi_reference_takes_best_wer(tmp_path, capsys):
    (tmp_path / "hyp.txt").write_text("a b\n", encoding="utf-8")
    (tmp_path / "r1.txt").write_text("x y\n", encoding="utf-8")
    (tmp_path / "r2.txt").write_text("a b\n", encoding="utf-8")
    assert main(["score", "--hyp", str(tmp_path / "hyp.txt"),
                 "--refs", str(tmp_path / "r1.txt"), str(tmp_path / "r2.txt")]) == 0
    doc = _last_json_line(capsys)
    assert doc["wer_mean"] == 0.0
    assert doc["bleu"] == pytest.approx(100.0)


def test_score_hash_mismatch_refused_without_force(tmp_path, capsys):
    hyp = tmp_path / "hyp.json"
    ref = tmp_path / "ref.json"
    hyp.write_text(json.dumps({"hypotheses": ["a b"], "config_hash": "aaa111"}),
                   encoding="utf-8")
    ref.write_text(json.dumps({"references": ["a b"], "config_hash": "bbb222"}),
                   encoding="utf-8")
    assert main(["score", "--hyp", str(hyp), "--refs", str(ref)]) == 2
    assert "config hash mismatch" in capsys.readouterr().err
    assert main(["score", "--hyp", str(hyp), "--refs", str(ref), "--force"]) == 0


def test_score_line_count_mismatch(tmp_path, capsys):
    (tmp_path / "hyp.txt").write_text("a\nb\n", encoding="utf-8")
    (tmp_path / "ref.txt").write_text("a\n", encoding="utf-8")
    assert main(["score", "--hyp", str(tmp_path / "hyp.txt"),
                 "--refs", str(tmp_path / "ref.txt")]) == 2
    assert "expected 2" in capsys.readouterr().err


def test_analyze_reports_on_train_split(workspace, capsys):
    assert main(["analyze", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
                 "--embeddings", str(workspace["data"] / "embeddings.vec"),
                 "--split", "train"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) == {"config_hash", "eigenvector_similarity", "hubness_skewness",
                        "p_at_1", "p_at_5", "word_count"}
    assert doc["word_count"] >= 3
    assert 0.0 <= doc["p_at_5"] <= 1.0


def test_config_error_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"synth": {"bogus": 1}}), encoding="utf-8")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_runtime_error_exits_1_with_json_stderr(tmp_path, capsys):
    rc = main(["translate", "--ckpt", str(tmp_path / "absent.params"),
               "--data", str(tmp_path / "nodata")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert "error" in err and "type" in err


def test_debug_env_reraises(tmp_path, monkeypatch):
    monkeypatch.setenv("ST_LOG", "DEBUG")
    with pytest.raises(FileNotFoundError):
        main(["translate", "--ckpt", str(tmp_path / "absent.params"),
              "--data", str(tmp_path / "nodata")])


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--variant", "zz"])
    assert e.value.code == 2


def test_thread_cap_exported(workspace):
    # every invocation pins the BLAS pools before numpy-heavy imports
    assert os.environ["OMP_NUM_THREADS"] == "1"
    assert os.environ["OPENBLAS_NUM_THREADS"] == "1"


def test_pipeline_end_to_end(tmp_path, capsys):
    cfg = dict(TINY)
    cfg["train"] = dict(TINY["train"], steps=4, ckpt_every=2)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
    out = tmp_path / "exp"
    assert main(["pipeline", "--config", str(cfg_path), "--out", str(out)]) == 0
    table = capsys.readouterr().out
    assert "variant" in table and "bleu" in table
    with open(out / "report.json", encoding="utf-8") as f:
        report = json.load(f)
    assert set(report["variants"]) == {"se", "me", "cd", "cs"}
    for name, row in report["variants"].items():
        assert 0.0 <= row["bleu"] <= 100.0
        if name == "se":
            assert row["wer"] is None and row["p_at_1"] is None
        else:
            assert row["wer"] >= 0.0
            assert (out / "runs" / name / "hyps_test.json").exists()
    assert (out / "bpe.json").exists()
    assert (out / "data" / "manifest.json").exists()
