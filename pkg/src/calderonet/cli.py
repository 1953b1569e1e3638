"""Command-line experiment runner.

Subcommands: dtn, sample, train, decompose, report.  Configs are JSON; see
README for the schema.  Exit codes: 0 success, 2 config error, 3 numerical
failure, 4 integrity failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import fcntl
import hashlib
import io
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import calderon as cal
from .deeponet import TrainingDivergence
from .fem import AssemblyError, ConductivityField, DtNOperator, SolverError, boundary_count, generate_mesh
from .hilbert import n_modes
from .measures import (
    ConductivityMeasureSpec,
    GaussianMeasureSpec,
    sample_boundary_coeffs,
    sample_conductivity,
)
from .plots import line_plot

log = logging.getLogger("calderonet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INTEGRITY = 0, 2, 3, 4

PIPELINES = ("dtn_fixed", "calderon_direct", "calderon_inverse", "decomposition")

DEFAULTS = {
    "mesh": {"h": 0.05},
    "truncation": {"K": 6},
    "mu": {"decay_s": 2.0},
    "eta": {"M": 10.0, "kl_modes": 16, "decay": 3.0},
    "pipeline": "dtn_fixed",
    "conductivity": {"kind": "constant", "value": 1.0, "inner": 4.0, "radius": 0.5, "seed": 0},
    "dataset": {"family": "lognormal", "n": 200, "n_test": 40, "low": 0.5, "high": 2.0,
                "n_train": 2000, "n_mu": 256},
    "arch": {"d_lat": None, "m": None, "widths": [64], "activation": "relu",
             "n_out": None, "n_in": 3, "out_basis": "empirical"},
    "hyper": {"lr": 1e-3, "batch": 64, "epochs": 100, "optimizer": "adam", "lr_decay": 1.0},
    "seeds": {"data": 0, "init": 0, "train": 0},
    "decomposition": {"d_values": [4, 8, 16, 32], "n_samples": 20000},
    "output_dir": None,
}

FAMILIES = {"calderon_direct": ("lognormal", "constant"), "calderon_inverse": ("constant", "radial")}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class IntegrityError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------

def resolve_config(raw: dict, seed=None) -> dict:
    """Merge ``raw`` over the defaults, rejecting unknown keys, then validate."""
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    errors = []
    cfg = copy.deepcopy(DEFAULTS)
    for key, val in raw.items():
        if key not in DEFAULTS:
            errors.append(f"{key}: unknown key")
        elif isinstance(DEFAULTS[key], dict):
            if not isinstance(val, dict):
                errors.append(f"{key}: expected an object")
                continue
            for sub, v in val.items():
                if sub not in DEFAULTS[key]:
                    errors.append(f"{key}.{sub}: unknown key")
                else:
                    cfg[key][sub] = v
        else:
            cfg[key] = val
    if seed is not None:
        cfg["seeds"]["data"] = int(seed)
    if errors:
        raise ConfigError(errors)
    validate(cfg)
    return cfg


def _num(errors, path, v, lo=None, hi=None, integer=False):
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)
    if ok and integer:
        ok = float(v).is_integer()
    if ok and lo is not None:
        ok = v > lo
    if ok and hi is not None:
        ok = v <= hi
    if not ok:
        rng = f" in ({lo}, {hi}]" if lo is not None or hi is not None else ""
        errors.append(f"{path}: expected {'an integer' if integer else 'a number'}{rng}, got {v!r}")
    return ok


def validate(cfg: dict) -> None:
    errors = []
    if not cfg["output_dir"] or not isinstance(cfg["output_dir"], str):
        errors.append("output_dir: required")
    h_ok = _num(errors, "mesh.h", cfg["mesh"]["h"], 0.005, 1.0)
    K_ok = _num(errors, "truncation.K", cfg["truncation"]["K"], 0, integer=True)
    if h_ok and K_ok:
        kmax = boundary_count(cfg["mesh"]["h"]) // 4
        if cfg["truncation"]["K"] > kmax:
            errors.append(f"truncation.K: {cfg['truncation']['K']} exceeds {kmax} resolvable at h={cfg['mesh']['h']}")
    _num(errors, "mu.decay_s", cfg["mu"]["decay_s"], 0.5)
    _num(errors, "eta.M", cfg["eta"]["M"], 1.0)
    _num(errors, "eta.kl_modes", cfg["eta"]["kl_modes"], 0, integer=True)
    _num(errors, "eta.decay", cfg["eta"]["decay"], 0.0)
    if cfg["pipeline"] not in PIPELINES:
        errors.append(f"pipeline: expected one of {PIPELINES}, got {cfg['pipeline']!r}")
    c = cfg["conductivity"]
    if c["kind"] not in ("constant", "radial", "lognormal"):
        errors.append(f"conductivity.kind: expected constant|radial|lognormal, got {c['kind']!r}")
    _num(errors, "conductivity.value", c["value"], 0.0)
    _num(errors, "conductivity.inner", c["inner"], 0.0)
    _num(errors, "conductivity.radius", c["radius"], 0.0, 0.95)
    ds = cfg["dataset"]
    for k in ("n", "n_test", "n_train", "n_mu"):
        _num(errors, f"dataset.{k}", ds[k], 1, integer=True)
    if _num(errors, "dataset.low", ds["low"], 0.0) and _num(errors, "dataset.high", ds["high"], 0.0):
        if ds["high"] < ds["low"]:
            errors.append("dataset.high: must be >= dataset.low")
    if isinstance(ds["n"], int) and isinstance(ds["n_test"], int) and ds["n_test"] >= ds["n"]:
        errors.append("dataset.n_test: must be smaller than dataset.n")
    fams = FAMILIES.get(cfg["pipeline"])
    if fams and ds["family"] not in fams:
        errors.append(f"dataset.family: {cfg['pipeline']} supports {fams}, got {ds['family']!r}")
    a = cfg["arch"]
    if a["activation"] not in ("relu", "tanh"):
        errors.append(f"arch.activation: expected relu|tanh, got {a['activation']!r}")
    if not isinstance(a["widths"], list) or not all(isinstance(w, int) and w > 0 for w in a["widths"]):
        errors.append("arch.widths: expected a list of positive integers")
    if a["out_basis"] not in ("empirical", "polynomial"):
        errors.append("arch.out_basis: expected empirical|polynomial")
    hp = cfg["hyper"]
    _num(errors, "hyper.lr", hp["lr"], 0.0)
    _num(errors, "hyper.batch", hp["batch"], 0, integer=True)
    _num(errors, "hyper.epochs", hp["epochs"], -1, integer=True)
    _num(errors, "hyper.lr_decay", hp["lr_decay"], 0.0, 1.0)
    if hp["optimizer"] not in ("adam", "sgd"):
        errors.append(f"hyper.optimizer: expected adam|sgd, got {hp['optimizer']!r}")
    for k in ("data", "init", "train"):
        _num(errors, f"seeds.{k}", cfg["seeds"][k], -1, integer=True)
    dec = cfg["decomposition"]
    _num(errors, "decomposition.n_samples", dec["n_samples"], 1, integer=True)
    if not K_ok:
        raise ConfigError(errors)
    n = n_modes(cfg["truncation"]["K"])
    if not isinstance(dec["d_values"], list) or not dec["d_values"]:
        errors.append("decomposition.d_values: expected a non-empty list")
    elif cfg["pipeline"] == "decomposition":
        for d in dec["d_values"]:
            if not isinstance(d, int) or not 1 <= d <= n:
                errors.append(f"decomposition.d_values: {d!r} outside 1..{n} (2K+1)")
    pipe = cfg["pipeline"]
    for key, limit in (("d_lat", n), ("m", n), ("n_out", n), ("n_in", n)):
        v = a[key]
        if v is None:
            continue
        if not isinstance(v, int) or v < 1:
            errors.append(f"arch.{key}: expected a positive integer")
        elif pipe in ("dtn_fixed", "decomposition") and key in ("d_lat", "m") and v > limit:
            errors.append(f"arch.{key}: {v} exceeds 2K+1 = {limit}")
        elif key in ("n_out", "n_in") and v > limit:
            errors.append(f"arch.{key}: {v} exceeds 2K+1 = {limit}")
    if pipe == "calderon_direct" and a["d_lat"] is not None and isinstance(a["d_lat"], int) and a["d_lat"] > 200:
        errors.append("arch.d_lat: at most 200 domain modes")
    if errors:
        raise ConfigError(errors)


def config_hash(cfg: dict) -> str:
    """Hash of the resolved config with seeds and output location removed."""
    core = {k: v for k, v in cfg.items() if k not in ("seeds", "output_dir")}
    text = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# Output handling
# --------------------------------------------------------------------------

@contextmanager
def locked_dir(path: Path):
    path.mkdir(parents=True, exist_ok=True)
    fh = open(path / ".lock", "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            raise ConfigError([f"output_dir: {path} is locked by another run"])
        yield path
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


class Run:
    """Writes artifacts into the output directory and records their checksums."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.dir = Path(cfg["output_dir"])
        self.hash = config_hash(cfg)
        self.files: dict = {}

    def write(self, name: str, text: str) -> str:
        p = self.dir / name
        p.write_text(text)
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()
        return self.files[name]

    def write_json(self, name: str, obj) -> str:
        if isinstance(obj, dict):
            obj = {"config_hash": self.hash, **obj}
        return self.write(name, json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")

    def write_svg(self, name: str, svg: str) -> str:
        return self.write(name, svg.replace("</svg>", f"<!-- config_hash {self.hash} --></svg>"))

    def finish(self):
        self.write_json("config.json", {"config": self.cfg})
        listing = {k: v for k, v in sorted(self.files.items()) if k != "artifacts.json"}
        self.write_json("artifacts.json", {"files": listing})


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------

def _measures(cfg):
    K = cfg["truncation"]["K"]
    mu = GaussianMeasureSpec.boundary(K, float(cfg["mu"]["decay_s"]))
    e = cfg["eta"]
    eta = ConductivityMeasureSpec(M=float(e["M"]), kl_modes=int(e["kl_modes"]), decay=float(e["decay"]))
    return mu, eta


def _conductivity(cfg, mesh, eta):
    c = cfg["conductivity"]
    if c["kind"] == "constant":
        return ConductivityField.constant(mesh, float(c["value"]))
    if c["kind"] == "radial":
        return cal.radial_family(mesh, [float(c["inner"])], radius=float(c["radius"]))[0]
    return sample_conductivity(eta, mesh, int(c["seed"]))


def _hyper(cfg):
    hp = dict(cfg["hyper"])
    hp["init_seed"] = cfg["seeds"]["init"]
    hp["train_seed"] = cfg["seeds"]["train"]
    return hp


def _arch(cfg, **fill):
    arch = {k: v for k, v in cfg["arch"].items() if v is not None}
    for k, v in fill.items():
        arch.setdefault(k, v)
    return arch


def _family_dataset(cfg, mesh, eta, threads):
    ds, seed, K = cfg["dataset"], cfg["seeds"]["data"], cfg["truncation"]["K"]
    fam = ds["family"]
    prov = {"family": fam, "seed": seed, "n": ds["n"]}
    if fam == "lognormal":
        fields = cal.lognormal_family(mesh, eta, ds["n"], seed)
        params = [None] * ds["n"]
        prov.update(M=eta.M, kl_modes=eta.kl_modes, decay=eta.decay)
    else:
        vals = np.random.default_rng(seed).uniform(ds["low"], ds["high"], ds["n"])
        params = [float(v) for v in vals]
        prov.update(low=ds["low"], high=ds["high"])
        if fam == "constant":
            fields = cal.constant_family(mesh, vals)
        else:
            fields = cal.radial_family(mesh, vals, radius=cfg["conductivity"]["radius"])
    return cal.build_dataset(mesh, fields, K, params, prov, threads=threads)


def _write_dataset(run: Run, data: cal.CalderonDataset):
    path = run.dir / "dataset.jsonl"
    digest = data.write_jsonl(path)
    run.files["dataset.jsonl"] = digest
    manifest = {"mesh_h": run.cfg["mesh"]["h"], "K": run.cfg["truncation"]["K"],
                "seeds": run.cfg["seeds"], "provenance": data.provenance,
                "files": {"dataset.jsonl": digest}}
    run.write_json("dataset_manifest.json", manifest)
    return {"dataset.jsonl": digest}


def _coverage(errors):
    return [c.to_json() for c in cal.coverage_sweep(errors)]


def _loss_svg(run: Run, res, title):
    tr = res.trace
    run.write_svg("loss.svg", line_plot({"loss": (tr[:, 0], tr[:, 1]), "best": (tr[:, 0], tr[:, 2])},
                                        title=title, xlabel="epoch", ylabel="training loss",
                                        logy=True, dashed=("best",)))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_dtn(cfg, threads=1) -> dict:
    run = Run(cfg)
    mesh = generate_mesh(cfg["mesh"]["h"])
    mu, eta = _measures(cfg)
    a = _conductivity(cfg, mesh, eta)
    K = cfg["truncation"]["K"]
    D = DtNOperator(mesh, a).matrix(K, "raw")
    run.write_json("mesh.json", mesh.to_json())
    run.write("dtn.csv", D.to_csv())
    sym = 0.5 * (D.entries + D.entries.T)
    inv = {"symmetry_error": D.symmetry_error(),
           "min_quadratic_eigenvalue": float(np.linalg.eigvalsh(sym).min()),
           "constant_mode_annihilation": float(np.abs(D.entries[:, 0]).max()),
           "conductivity": cfg["conductivity"]["kind"]}
    if cfg["conductivity"]["kind"] == "constant":
        from .hilbert import frequencies

        exact = np.pi * frequencies(K) * float(cfg["conductivity"]["value"])
        diag = np.diag(D.entries)
        rel = np.abs(diag[1:] - exact[1:]) / exact[1:]
        inv["spectrum_max_relative_error"] = float(rel.max()) if rel.size else 0.0
        inv["spectrum_ok"] = bool(rel.size == 0 or rel.max() <= 0.01)
    run.write_json("invariants.json", inv)
    run.finish()
    return inv


def cmd_sample(cfg, threads=1) -> dict:
    run = Run(cfg)
    mu, eta = _measures(cfg)
    seed = cfg["seeds"]["data"]
    F = sample_boundary_coeffs(mu, cfg["dataset"]["n_mu"], seed)
    run.write("mu_samples.jsonl", "".join(json.dumps([float(v) for v in r]) + "\n" for r in F))
    files = {"mu_samples.jsonl": run.files["mu_samples.jsonl"]}
    if cfg["pipeline"] in FAMILIES:
        mesh = generate_mesh(cfg["mesh"]["h"])
        data = _family_dataset(cfg, mesh, eta, threads)
        files.update(_write_dataset(run, data))
    run.write_json("sample_manifest.json", {"seeds": cfg["seeds"], "files": files})
    run.finish()
    return files


def cmd_train(cfg, threads=1) -> dict:
    pipe = cfg["pipeline"]
    if pipe == "decomposition":
        return cmd_decompose(cfg, threads)
    run = Run(cfg)
    mesh = generate_mesh(cfg["mesh"]["h"])
    mu, eta = _measures(cfg)
    K = cfg["truncation"]["K"]
    n = n_modes(K)
    seed = cfg["seeds"]["data"]
    hyper = _hyper(cfg)
    ds = cfg["dataset"]
    if pipe == "dtn_fixed":
        a = _conductivity(cfg, mesh, eta)
        G = DtNOperator(mesh, a).matrix(K, "orthonormal")
        run.write("dtn_orthonormal.csv", G.to_csv())
        checksums = {"dtn_orthonormal.csv": run.files["dtn_orthonormal.csv"]}
        run.write_json("dataset_manifest.json", {"mesh_h": cfg["mesh"]["h"], "K": K, "seeds": cfg["seeds"],
                                                  "files": checksums})
        params, rep, res = cal.train_dtn_from_matrix(G.entries, mu, _arch(cfg, d_lat=n, m=n), hyper,
                                                     ds["n_train"], ds["n_test"], seed)
        errors = rep.per_sample_errors
        losses = rep.to_json()
    elif pipe == "calderon_direct":
        data = _family_dataset(cfg, mesh, eta, threads)
        checksums = _write_dataset(run, data)
        d_default = 1 if ds["family"] == "constant" else 4
        params, rep, res = cal.train_calderon_direct(mesh, data, mu, _arch(cfg, d_lat=d_default, n_out=n),
                                                     hyper, ds["n_test"], ds["n_mu"], seed)
        errors = rep.per_sample_errors
        losses = rep.to_json()
    else:
        data = _family_dataset(cfg, mesh, eta, threads)
        checksums = _write_dataset(run, data)
        m_default = 1 if ds["family"] == "constant" else 2
        model, rep, res, te = cal.train_inverse(mesh, data, mu, eta.M, _arch(cfg, m=m_default), hyper,
                                                ds["n_test"], seed)
        params = model.params
        errors = rep.per_sample_errors
        losses = rep.to_json()
        if ds["family"] == "constant":
            recon = [cal.mean_value(mesh, model.predict(data.matrices[i])[0]) for i in te]
            truth = [data.params[i] for i in te]
            losses["constant_recovery_max_relative"] = float(np.max(np.abs(np.subtract(recon, truth)) / truth))
        losses["zero_matrix_flagged_ood"] = bool(model.predict(np.zeros((n, n)))[1])
    losses.update(initial_loss=res.initial_loss, best_loss=res.best_loss, epochs=int(res.trace[-1, 0]))
    run.write_json("checkpoint.json", params.to_json())
    run.write("loss_trace.csv", res.trace_csv())
    _loss_svg(run, res, f"{pipe} training loss")
    report = {"config": cfg, "dataset_checksums": checksums, "losses": losses,
              "decomposition": None, "coverage": _coverage(errors)}
    run.write_json("report.json", report)
    run.finish()
    return report


def cmd_decompose(cfg, threads=1) -> dict:
    run = Run(cfg)
    mesh = generate_mesh(cfg["mesh"]["h"])
    mu, eta = _measures(cfg)
    K = cfg["truncation"]["K"]
    a = _conductivity(cfg, mesh, eta)
    op = DtNOperator(mesh, a)
    G = op.matrix(K, "orthonormal")
    run.write("dtn_orthonormal.csv", G.to_csv())
    checksums = {"dtn_orthonormal.csv": run.files["dtn_orthonormal.csv"]}
    seed = cfg["seeds"]["data"]
    from .measures import sample_boundary

    C = cal.boundedness_constant([(op, sample_boundary(mu, seed + 7919 + s)) for s in range(200)])
    rows, decs = [], []
    for d in cfg["decomposition"]["d_values"]:
        e = cal.error_decomposition(G.entries, G.entries[:d, :d], mu, d,
                                    cfg["decomposition"]["n_samples"], seed)
        dec = e.to_json()
        dec["i2_bound"] = C * a.a_hi * e.tail
        dec["sound"] = e.sound
        decs.append(dec)
        rows.append((d, e.i1.mean, e.i2.mean, e.i3.mean, e.tail, e.total_mse.mean))
    run.write("decomposition.csv", _csv(["d", "i1", "i2", "i3", "tail", "total"], rows))
    ds = np.array([r[0] for r in rows], float)
    run.write_svg("decomposition.svg", line_plot(
        {"I1": (ds, [r[1] for r in rows]), "I2": (ds, [r[2] for r in rows]),
         "I3": (ds, [r[3] for r in rows]), "tail": (ds, [r[4] for r in rows])},
        title="error terms vs d_lat", xlabel="d_lat", ylabel="mean squared error",
        logy=True, logx=True, dashed=("tail",)))
    run.write_json("dataset_manifest.json", {"mesh_h": cfg["mesh"]["h"], "K": K, "seeds": cfg["seeds"],
                                              "files": checksums})
    report = {"config": cfg, "dataset_checksums": checksums,
              "losses": {"boundedness_constant": C, "a_hi": a.a_hi},
              "decomposition": decs, "coverage": []}
    run.write_json("report.json", report)
    run.finish()
    return report


def cmd_report(run_dirs, out_dir) -> dict:
    """Merge run reports into summary.csv and summary.md, verifying dataset checksums."""
    problems, rows = [], []
    for rd in map(Path, run_dirs):
        try:
            rep = json.loads((rd / "report.json").read_text())
            manifest = json.loads((rd / "dataset_manifest.json").read_text())
        except (OSError, ValueError) as exc:
            problems.append(f"{rd}: missing or corrupt run ({exc.__class__.__name__}: {exc})")
            continue
        for name, digest in rep.get("dataset_checksums", {}).items():
            path = rd / name
            if not path.exists():
                problems.append(f"{path}: dataset file missing")
                continue
            actual = cal.file_sha256(path)
            if actual != digest or manifest.get("files", {}).get(name) != digest:
                problems.append(f"{path}: checksum mismatch")
        losses = rep.get("losses") or {}
        metric = next((losses[k] for k in ("heldout_relative", "boundedness_constant") if k in losses), "")
        cov = rep.get("coverage") or []
        cov_ok = all(c["fraction"] <= c["bound"] + 3 * c.get("se", 0.0) + 1e-12 for c in cov)
        cfg = rep.get("config", {})
        rows.append([str(rd), rep.get("config_hash", ""), cfg.get("pipeline", ""),
                     json.dumps(cfg.get("seeds", {}), sort_keys=True), metric, cov_ok])
    if problems:
        raise IntegrityError("; ".join(problems))
    header = ["run", "config_hash", "pipeline", "seeds", "heldout_metric", "coverage_ok"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(_csv(header, rows))
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(f"{v:.4g}" if isinstance(v, float) else str(v) for v in r) + " |" for r in rows]
    (out / "summary.md").write_text("\n".join(md) + "\n")
    return {"rows": rows}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calderonet", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override seeds.data")
    p.add_argument("--threads", type=int, default=1, help="BLAS / worker threads")
    p.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("dtn", "sample", "train", "decompose"):
        sub.add_parser(name)
    r = sub.add_parser("report")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", default=".", help="directory for summary.csv / summary.md")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.run_dirs, args.out)
            print(Path(args.out) / "summary.md")
            return EXIT_OK
        if not args.config:
            raise ConfigError(["--config: required for this command"])
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError([f"--config: cannot read {args.config}: {exc}"])
        if args.command == "decompose" and isinstance(raw, dict):
            raw["pipeline"] = "decomposition"
        cfg = resolve_config(raw, args.seed)
        if args.dry_run:
            print(json.dumps({"config_hash": config_hash(cfg), "config": cfg}, indent=2, sort_keys=True))
            return EXIT_OK
        fn = {"dtn": cmd_dtn, "sample": cmd_sample, "train": cmd_train, "decompose": cmd_decompose}[args.command]
        with threadpool_limits(limits=max(1, args.threads)), locked_dir(Path(cfg["output_dir"])):
            fn(cfg, threads=max(1, args.threads))
        print(cfg["output_dir"])
        return EXIT_OK
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except TrainingDivergence as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SolverError, AssemblyError, np.linalg.LinAlgError, FloatingPointError, MemoryError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
