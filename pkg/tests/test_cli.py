import csv
import json
import subprocess
import sys

import pytest

from catsg.bundle import read_bundle
from catsg.cli import main, split_overrides

TINY = ["--dataset.counts", '{"train": 24, "val": 8, "test": 8}', "--model.H", "8", "--model.K", "2",
        "--model.unet_width", "8", "--model.unet_res_blocks", "1", "--model.n_diff", "50",
        "--train.steps", "3", "--train.warmup_steps", "1", "--train.batch_size", "8", "--train.log_every", "0",
        "--sample.steps", "2", "--eval.embed_steps", "3", "--eval.d_e", "4"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--scenario", "VM", "--seed", "1", "--out", str(d / "data"), *TINY]) == 0
    assert main(["train", "--data", str(d / "data"), "--out", str(d / "model.ckpt"), "--seed", "1", *TINY]) == 0
    return d


def test_split_overrides():
    rest, ov = split_overrides(["train", "--train.k", "8", "--model.H=4", "--out", "x"])
    assert rest == ["train", "--out", "x"] and ov == [("train.k", "8"), ("model.H", "4")]


def test_gen_data_outputs(trained):
    b = read_bundle(trained / "data")
    assert len(b["train"]) == 24 and b["test"].xcf is not None
    man = json.loads((trained / "data" / "manifest.json").read_text())
    assert man["stages"]["gen-data"]["dataset_id"] == b.meta["dataset_id"]
    assert "torch" in man["versions"]
    resolved = json.loads((trained / "data" / "config.resolved.json").read_text())
    assert resolved["dataset"]["counts"]["train"] == 24


def test_sample_and_eval(trained):
    d = trained
    common = ["--ckpt", str(d / "model.ckpt"), "--data", str(d / "data"), *TINY]
    assert main(["sample", *common, "--mode", "int", "--out", str(d / "int")]) == 0
    assert main(["sample", *common, "--mode", "cf", "--out", str(d / "cf")]) == 0
    assert main(["sample", *common, "--mode", "obs", "--out", str(d / "obs")]) == 0
    assert main(["sample", *common, "--mode", "int", "--omega", "0", "--out", str(d / "int0")]) == 0
    assert (d / "obs" / "x.test.bin").read_bytes() == (d / "int0" / "x.test.bin").read_bytes()
    assert main(["eval", "--real", str(d / "data"), "--gen", str(d / "int"), "--out", str(d / "r1.json"), *TINY]) == 0
    assert main(["eval", "--real", str(d / "data"), "--gen", str(d / "int"), "--out", str(d / "r2.json"), *TINY]) == 0
    r1 = json.loads((d / "r1.json").read_text())
    assert set(r1) == {"mdd", "kl", "mmd", "jftsd"}
    assert (d / "r1.json").read_bytes() == (d / "r2.json").read_bytes()
    assert main(["eval", "--real", str(d / "data"), "--gen", str(d / "cf"), "--metrics", "mdd,kl",
                 "--out", str(d / "cf.json"), *TINY]) == 0
    assert set(json.loads((d / "cf.json").read_text())) == {"mdd", "kl"}


def test_counterfactual_action(trained):
    d = trained
    action = json.dumps([{"channel": "position", "add": 1.0}])
    rc = main(["sample", "--ckpt", str(d / "model.ckpt"), "--data", str(d / "data"), "--mode", "cf",
               "--action", action, "--limit", "4", "--out", str(d / "act"), *TINY])
    assert rc == 0
    assert len(read_bundle(d / "act")["test"]) == 4


def test_diagnose_and_export(trained):
    d = trained
    assert main(["diagnose", "--data", str(d / "data"), "--context", "velocity", "--out", str(d / "curves.csv")]) == 0
    rows = list(csv.DictReader(open(d / "curves.csv")))
    assert {r["split"] for r in rows} == {"train", "val", "test"}
    assert (d / "curves.bins.csv").exists()
    assert main(["embed-export", "--ckpt", str(d / "model.ckpt"), "--data", str(d / "data"),
                 "--out", str(d / "post.csv")]) == 0
    header = next(csv.reader(open(d / "post.csv")))
    assert header[:2] == ["sample_id", "split"] and "w_1" in header
    assert main(["embed-export", "--real", str(d / "data"), "--out", str(d / "emb.csv"), *TINY]) == 0


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "m.ckpt")]) == 3
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--model.bogus", "1"]) == 2
    assert "valid keys" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--train.steps", "abc"]) == 2
    assert main(["embed-export", "--out", str(tmp_path / "e.csv")]) == 2


def test_run_pipeline_resumes_and_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--seed", "2", "--sample.steps", "2", *TINY, "--eval.metrics", "mdd,kl,mmd"]
    assert main(["run", "--out", str(a), *args]) == 0
    assert main(["run", "--out", str(b), *args]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    man = json.loads((a / "manifest.json").read_text())
    assert all(man["stages"][s]["status"] == "ok" for s in ("gen-data", "train", "sample", "eval", "diagnose"))
    stamp = (a / "model.ckpt").stat().st_mtime_ns
    assert main(["run", "--out", str(a), *args]) == 0
    assert (a / "model.ckpt").stat().st_mtime_ns == stamp


def test_step_sweep(trained):
    d = trained
    assert main(["sweep", "--kind", "steps", "--data", str(d / "data"), "--ckpt", str(d / "model.ckpt"),
                 "--values", "1,2", "--out", str(d / "sweep"), *TINY, "--eval.metrics", "mdd"]) == 0
    for n in (1, 2):
        assert "mdd" in json.loads((d / "sweep" / f"steps_{n}" / "report.json").read_text())
    assert set(json.loads((d / "sweep" / "sweep_steps.json").read_text())) == {"1", "2"}


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "catsg.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout
