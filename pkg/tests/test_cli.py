import json
import subprocess
import sys

import numpy as np
import pytest

from calderonet.cli import ConfigError, config_hash, main, resolve_config
from calderonet.fem import DtNMatrix


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def test_dtn_command_disk_spectrum_and_determinism(tmp_path):
    cfg = {"mesh": {"h": 0.05}, "truncation": {"K": 3}, "output_dir": str(tmp_path / "run")}
    c = write(tmp_path / "c.json", cfg)
    assert main(["--config", c, "dtn"]) == 0
    text = (tmp_path / "run" / "dtn.csv").read_text()
    D = DtNMatrix.from_csv(text)
    exact = np.pi * np.array([0, 1, 1, 2, 2, 3, 3])
    assert np.all(np.abs(np.diag(D.entries)[1:] - exact[1:]) <= 0.01 * exact[1:])
    inv = json.loads((tmp_path / "run" / "invariants.json").read_text())
    assert inv["spectrum_ok"] and inv["symmetry_error"] <= 1e-8
    assert set(json.loads((tmp_path / "run" / "mesh.json").read_text())) >= {"vertices", "triangles", "boundary"}
    assert main(["--config", c, "dtn"]) == 0
    assert (tmp_path / "run" / "dtn.csv").read_text() == text
    art = json.loads((tmp_path / "run" / "artifacts.json").read_text())
    assert art["config_hash"] == config_hash(resolve_config(cfg)) and "dtn.csv" in art["files"]


def test_config_errors(tmp_path, capsys):
    assert main(["--config", write(tmp_path / "a.json", {"mesh": {"h": 0.05}}), "dtn"]) == 2
    assert "output_dir" in capsys.readouterr().err
    bad = {"mesh": {"hh": 1}, "colour": 1, "output_dir": "x", "arch": {"d_lat": 99}}
    assert main(["--config", write(tmp_path / "b.json", bad), "train"]) == 2
    err = capsys.readouterr().err
    assert "mesh.hh: unknown key" in err and "colour: unknown key" in err
    with pytest.raises(ConfigError) as exc:
        resolve_config({"output_dir": "x", "arch": {"d_lat": 99}, "truncation": {"K": 2}})
    assert any("arch.d_lat" in e for e in exc.value.errors)
    with pytest.raises(ConfigError):
        resolve_config({"output_dir": "x", "truncation": {"K": 40}, "mesh": {"h": 0.1}})
    with pytest.raises(ConfigError):
        resolve_config({"output_dir": "x", "pipeline": "calderon_inverse", "dataset": {"family": "lognormal"}})
    assert main(["--config", str(tmp_path / "missing.json"), "dtn"]) == 2


def test_dry_run_computes_nothing(tmp_path, capsys):
    out = tmp_path / "never"
    c = write(tmp_path / "c.json", {"output_dir": str(out)})
    assert main(["--config", c, "--dry-run", "--seed", "9", "train"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["config"]["seeds"]["data"] == 9 and shown["config"]["pipeline"] == "dtn_fixed"
    assert not out.exists()


def test_decompose_rows_and_plot(tmp_path):
    cfg = {"truncation": {"K": 16}, "conductivity": {"kind": "lognormal", "seed": 3},
           "decomposition": {"d_values": [4, 8, 16], "n_samples": 2000}, "output_dir": str(tmp_path / "dec")}
    assert main(["--config", write(tmp_path / "c.json", cfg), "decompose"]) == 0
    rows = (tmp_path / "dec" / "decomposition.csv").read_text().splitlines()
    assert rows[0] == "d,i1,i2,i3,tail,total" and [r.split(",")[0] for r in rows[1:]] == ["4", "8", "16"]
    rep = json.loads((tmp_path / "dec" / "report.json").read_text())
    assert set(rep) >= {"config", "dataset_checksums", "losses", "decomposition", "coverage"}
    assert all(set(d) >= {"d", "i1", "i2", "i3", "tail"} for d in rep["decomposition"])
    svg = (tmp_path / "dec" / "decomposition.svg").read_text()
    assert svg.startswith("<svg") and "config_hash" in svg


def train_cfg(tmp_path, name, **extra):
    cfg = {"pipeline": "dtn_fixed", "truncation": {"K": 3}, "mesh": {"h": 0.1},
           "dataset": {"n_train": 300, "n_test": 50}, "hyper": {"epochs": 5},
           "output_dir": str(tmp_path / name)}
    cfg.update(extra)
    return write(tmp_path / f"{name}.json", cfg)


def test_train_outputs_and_report(tmp_path):
    c = train_cfg(tmp_path, "r1")
    assert main(["--config", c, "train"]) == 0
    run = tmp_path / "r1"
    for name in ("checkpoint.json", "loss_trace.csv", "report.json", "loss.svg", "dataset_manifest.json"):
        assert (run / name).exists()
    c2 = train_cfg(tmp_path, "r2")
    assert main(["--config", c2, "--seed", "4", "train"]) == 0
    ck = json.loads((run / "checkpoint.json").read_text())
    assert set(ck) >= {"d", "m", "activation", "layers", "in_basis", "out_basis"}
    trace = (run / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,loss,best_loss" and len(trace) == 7
    out = tmp_path / "summary"
    assert main(["report", str(run), "--out", str(out)]) == 0
    assert len((out / "summary.csv").read_text().splitlines()) == 2
    assert main(["report", str(run), str(tmp_path / "r2"), "--out", str(out)]) == 0
    lines = (out / "summary.csv").read_text().splitlines()[1:]
    hashes = {l.split(",")[1] for l in lines}
    assert len(lines) == 2 and len(hashes) == 1
    assert "| run |" in (out / "summary.md").read_text()


def test_report_integrity_errors(tmp_path, capsys):
    c = train_cfg(tmp_path, "r")
    assert main(["--config", c, "train"]) == 0
    with open(tmp_path / "r" / "dtn_orthonormal.csv", "a") as fh:
        fh.write("tampered\n")
    assert main(["report", str(tmp_path / "r"), "--out", str(tmp_path / "s")]) == 4
    assert "dtn_orthonormal.csv" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "nope"), "--out", str(tmp_path / "s")]) == 4


def test_train_calderon_pipelines(tmp_path):
    direct = {"pipeline": "calderon_direct", "truncation": {"K": 2}, "mesh": {"h": 0.1},
              "dataset": {"family": "constant", "n": 16, "n_test": 4, "n_mu": 64},
              "arch": {"d_lat": 1, "widths": [4]}, "hyper": {"epochs": 20, "lr": 1e-2, "batch": 4},
              "output_dir": str(tmp_path / "d")}
    assert main(["--config", write(tmp_path / "d.json", direct), "train"]) == 0
    rep = json.loads((tmp_path / "d" / "report.json").read_text())
    assert "dataset.jsonl" in rep["dataset_checksums"] and len(rep["coverage"]) == 3
    inverse = dict(direct, pipeline="calderon_inverse", output_dir=str(tmp_path / "i"),
                   arch={"n_in": 2, "widths": [4]})
    assert main(["--config", write(tmp_path / "i.json", inverse), "train"]) == 0
    rep = json.loads((tmp_path / "i" / "report.json").read_text())
    assert rep["losses"]["zero_matrix_flagged_ood"] and "constant_recovery_max_relative" in rep["losses"]
    sample = dict(direct, output_dir=str(tmp_path / "s"))
    assert main(["--config", write(tmp_path / "s.json", sample), "sample"]) == 0
    assert len((tmp_path / "s" / "mu_samples.jsonl").read_text().splitlines()) == 64


def test_divergence_exit_code(tmp_path, capsys):
    c = train_cfg(tmp_path, "div", hyper={"epochs": 3, "lr": 1e300, "optimizer": "sgd", "lr_decay": 1.0})
    with np.errstate(all="ignore"):
        assert main(["--config", c, "train"]) == 3
    assert "iteration" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    c = write(tmp_path / "c.json", {"output_dir": str(tmp_path / "x")})
    r = subprocess.run([sys.executable, "-m", "calderonet", "--config", c, "--dry-run", "dtn"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "config_hash" in r.stdout
