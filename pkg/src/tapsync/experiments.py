"""Experiment harness: seeded replicates, aggregation, CSV and manifest output.

Every replicate gets its own 64-bit seed derived from ``master_seed`` and the
replicate's group key, so any CSV row can be regenerated in isolation.
Replicates are independent tasks and may run in a process pool; results are
reduced in a fixed order so output files do not depend on scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import jacobian_spectrum
from .energy import f_tap
from .errors import ConfigError, TapSyncError
from .landscape import landscape_grid
from .model import NoiseEnsemble, derive_seed, sample_instance
from .scalar import scalar_constants
from .solvers import Method, SolverConfig, Status, align_sign, find_m_star, run_solver, spectral_init

log = logging.getLogger(__name__)

EXPERIMENTS = ("convergence", "success_heatmap", "universality", "tap_vs_vb", "jacobian_scatter", "landscape")

_DEFAULT_LAMBDAS = {
    "convergence": [1.5],
    "success_heatmap": [round(x, 4) for x in np.linspace(1.05, 2.0, 20)],
    "universality": [round(x, 4) for x in np.linspace(1.05, 2.0, 20)],
    "tap_vs_vb": [round(x, 4) for x in np.linspace(1.1, 2.0, 10)],
    "jacobian_scatter": [1.5],
    "landscape": [1.1, 1.2, 1.5],
}
_DEFAULT_ETAS = {
    "convergence": [0.1, 0.5],
    "success_heatmap": [round(x, 4) for x in np.linspace(0.05, 1.0, 20)],
    "universality": [0.1],
    "tap_vs_vb": [0.1],
}
_DEFAULT_ENSEMBLES = {
    "universality": ["GOE", "Rademacher", "Laplace", "StudentT(4)"],
    "tap_vs_vb": ["GOE", "RotInvUniform"],
}


@dataclass
class ExperimentConfig:
    experiment: str
    n: int = 500
    lambdas: list = None
    etas: list = None
    replicates: int = 10
    master_seed: int = 0
    ensembles: list = None
    output_dir: str = "results"
    workers: int = 1
    amp_iters: int = 2000
    ngd_iters: int = 12000
    vb_iters: int = 8000
    residual_tol: float = 1e-4
    curve_floor: float = 1e-12
    grad_tol: float = 1e-10
    universality_lambda: float = 1.5
    spectral_memory: str = "literal"
    nq: int = 101
    nphi: int = 101

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.lambdas is None:
            self.lambdas = list(_DEFAULT_LAMBDAS[self.experiment])
        if self.etas is None:
            self.etas = list(_DEFAULT_ETAS.get(self.experiment, [0.1]))
        if self.ensembles is None:
            self.ensembles = list(_DEFAULT_ENSEMBLES.get(self.experiment, ["GOE"]))
        if self.spectral_memory not in ("literal", "state-evolution"):
            raise ConfigError("spectral_memory must be 'literal' or 'state-evolution'")
        if int(self.replicates) < 1:
            raise ConfigError("replicates must be >= 1")
        if int(self.n) < 2:
            raise ConfigError("n must be >= 2")
        if not self.lambdas:
            raise ConfigError("lambdas must be non-empty")
        try:
            self.ensembles = [str(NoiseEnsemble.parse(e)) for e in self.ensembles]
        except TapSyncError as exc:
            raise ConfigError(str(exc)) from exc
        self.lambdas = [float(v) for v in self.lambdas]
        self.etas = [float(v) for v in self.etas]
        if any(not 0 < e <= 1 for e in self.etas):
            raise ConfigError("etas must lie in (0, 1]")
        if self.experiment != "landscape" and any(lam <= 1 for lam in self.lambdas):
            raise ConfigError("spectral initialization needs every lambda > 1")

    @classmethod
    def from_mapping(cls, data, **overrides):
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        if "name" in data and "experiment" not in data:
            data["experiment"] = data.pop("name")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in data:
            raise ConfigError("config must name an experiment")
        return cls(**data)

    @classmethod
    def from_toml(cls, path, **overrides):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_mapping(data, **overrides)


@dataclass
class AggregateResult:
    keys: dict
    mean: float
    stderr_scaled: float
    raw: list = field(default_factory=list)
    excluded: int = 0


def aggregate(values, keys, excluded=0):
    """Mean and std/sqrt(count) over the finite raw values (sample std, ddof=1)."""
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    if v.size == 0:
        return AggregateResult(dict(keys), float("nan"), float("nan"), list(values), excluded)
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return AggregateResult(dict(keys), float(v.mean()), sd / math.sqrt(v.size), [float(x) for x in v], excluded)


def mse_to_signal(m, x):
    return align_sign(m, x)[1]


# -- replicate tasks (top level so they pickle) -------------------------------------

def _residual_curve(trace):
    return [(r.k, r.residual) for r in trace.records]


def _task_convergence(n, lam, ens, seed, etas, amp_iters, ngd_iters, floor, memory="literal"):
    t0 = time.perf_counter()
    inst = sample_instance(n, lam, ens, seed)
    ms = find_m_star(inst)
    ref = ms.state.m
    curves, statuses = {}, {}
    st, tr = run_solver(inst, SolverConfig(Method.AMP, max_iters=amp_iters, grad_tol=1e-300,
                                           residual_tol=floor, stop_on_grad=False),
                        init=spectral_init(inst, memory), ref=ref)
    curves["AMP"], statuses["AMP"] = _residual_curve(tr), tr.status.value
    for eta in etas:
        cfg = SolverConfig(Method.NGD, eta=eta, max_iters=ngd_iters, grad_tol=1e-300,
                           residual_tol=floor, stop_on_grad=False)
        _, tr = run_solver(inst, cfg, ref=ref)
        label = f"NGD(eta={eta:g})"
        curves[label], statuses[label] = _residual_curve(tr), tr.status.value
    return {"seed": seed, "curves": curves, "statuses": statuses, "mstar_method": ms.method,
            "wall": time.perf_counter() - t0}


def _task_mstar_mse(n, lam, ens, seed):
    t0 = time.perf_counter()
    inst = sample_instance(n, lam, ens, seed)
    ms = find_m_star(inst)
    return {"seed": seed, "mse": mse_to_signal(ms.state.m, inst.x), "method": ms.method,
            "f_tap": f_tap(inst, ms.state.m), "grad_sq": ms.grad_sq, "wall": time.perf_counter() - t0}


def _task_heatmap(n, lam, ens, seed, etas, ngd_iters, residual_tol):
    t0 = time.perf_counter()
    inst = sample_instance(n, lam, ens, seed)
    ref = find_m_star(inst).state.m
    init = spectral_init(inst)[0].h
    out = {}
    for eta in etas:
        cfg = SolverConfig(Method.NGD, eta=eta, max_iters=ngd_iters, grad_tol=1e-300,
                           residual_tol=residual_tol, stop_on_grad=False)
        try:
            _, tr = run_solver(inst, cfg, init=init, ref=ref)
            out[eta] = tr.status is Status.CONVERGED
        except TapSyncError:
            out[eta] = False
    return {"seed": seed, "success": out, "wall": time.perf_counter() - t0}


def _task_tap_vs_vb(n, lam, ens, seed, eta, iters, grad_tol):
    t0 = time.perf_counter()
    inst = sample_instance(n, lam, ens, seed)
    init = spectral_init(inst)[0].h
    res = {"seed": seed}
    for label, method in (("TAP", Method.NGD), ("VB", Method.NGD_VB)):
        st, tr = run_solver(inst, SolverConfig(method, eta=eta, max_iters=iters, grad_tol=grad_tol), init=init)
        res[label] = {"mse": mse_to_signal(st.m, inst.x), "status": tr.status.value,
                      "grad_sq": tr.records[-1].grad_sq}
    res["wall"] = time.perf_counter() - t0
    return res


def _run_tasks(fn, arglist, workers):
    """Run ``fn(*args)`` for each args tuple; failures become ``{"error": ...}``."""

    def guarded(args):
        try:
            return fn(*args)
        except TapSyncError as exc:
            return {"seed": args[3], "error": f"{type(exc).__name__}: {exc}"}

    if workers <= 1:
        return [guarded(a) for a in arglist]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_guarded_call, fn, a) for a in arglist]
        return [f.result() for f in futures]


def _guarded_call(fn, args):
    try:
        return fn(*args)
    except TapSyncError as exc:
        return {"seed": args[3], "error": f"{type(exc).__name__}: {exc}"}


# -- output helpers -------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _seed(cfg, *keys):
    return derive_seed(cfg.master_seed, cfg.experiment, *keys)


def _convergence_args(cfg, lam, ens, seed):
    return (cfg.n, lam, ens, seed, cfg.etas, cfg.amp_iters, cfg.ngd_iters, cfg.curve_floor,
            cfg.spectral_memory)


def _curve_rows(label_curves, keys_prefix):
    """Aggregate residual-vs-k curves over replicates that still run at k."""
    rows = []
    for label, curves in label_curves.items():
        by_k = {}
        for curve in curves:
            for k, r in curve:
                by_k.setdefault(k, []).append(r)
        for k in sorted(by_k):
            a = aggregate(by_k[k], {})
            rows.append([*keys_prefix, label, k, a.mean, a.stderr_scaled, len(a.raw)])
    return rows


# -- experiments ------------------------------------------------------------------------

def exp_convergence(cfg, out):
    lam, ens = cfg.lambdas[0], cfg.ensembles[0]
    seeds = [_seed(cfg, ens, lam, r) for r in range(cfg.replicates)]
    results = _run_tasks(_task_convergence, [_convergence_args(cfg, lam, ens, s) for s in seeds], cfg.workers)
    ok = [r for r in results if "error" not in r]
    labels = list(ok[0]["curves"]) if ok else []
    curves = {lab: [r["curves"][lab] for r in ok] for lab in labels}
    write_csv(out / "convergence.csv", ["method", "k", "mean_residual", "band", "count"],
              [row for row in _curve_rows(curves, [])])
    raw = []
    for rep, r in enumerate(results):
        if "error" in r:
            continue
        for lab in labels:
            for k, res in r["curves"][lab]:
                raw.append([rep, r["seed"], lab, k, res])
    write_csv(out / "convergence_raw.csv", ["replicate", "seed", "method", "k", "residual"], raw)
    return results, {"lambda": lam, "ensemble": ens, "excluded": len(results) - len(ok)}


def exp_success_heatmap(cfg, out):
    ens = cfg.ensembles[0]
    rows, raw, all_results = [], [], []
    for lam in cfg.lambdas:
        seeds = [_seed(cfg, ens, lam, r) for r in range(cfg.replicates)]
        results = _run_tasks(_task_heatmap, [(cfg.n, lam, ens, s, cfg.etas, cfg.ngd_iters, cfg.residual_tol)
                                             for s in seeds], cfg.workers)
        all_results.extend({"lambda": lam, **r} for r in results)
        ok = [r for r in results if "error" not in r]
        for eta in cfg.etas:
            wins = [float(r["success"][eta]) for r in ok]
            frac = float(np.mean(wins)) if wins else float("nan")
            rows.append([lam, eta, frac, len(wins), len(results) - len(ok)])
            for rep, r in enumerate(results):
                if "error" not in r:
                    raw.append([lam, eta, rep, r["seed"], int(r["success"][eta])])
    write_csv(out / "success_heatmap.csv", ["lambda", "eta", "success_fraction", "count", "excluded"], rows)
    write_csv(out / "success_heatmap_raw.csv", ["lambda", "eta", "replicate", "seed", "success"], raw)
    return all_results, {"ensemble": ens}


def exp_universality(cfg, out):
    rows, raw, all_results = [], [], []
    for ens in cfg.ensembles:
        for lam in cfg.lambdas:
            seeds = [_seed(cfg, ens, lam, r) for r in range(cfg.replicates)]
            results = _run_tasks(_task_mstar_mse, [(cfg.n, lam, ens, s) for s in seeds], cfg.workers)
            all_results.extend({"ensemble": ens, "lambda": lam, **r} for r in results)
            ok = [r for r in results if "error" not in r]
            a = aggregate([r["mse"] for r in ok], {}, excluded=len(results) - len(ok))
            rows.append([ens, lam, a.mean, a.stderr_scaled, len(a.raw), a.excluded])
            for rep, r in enumerate(results):
                if "error" not in r:
                    raw.append([ens, lam, rep, r["seed"], r["mse"], r["f_tap"], r["method"]])
    write_csv(out / "universality_mse.csv", ["ensemble", "lambda", "mean_mse", "band", "count", "excluded"], rows)
    write_csv(out / "universality_mse_raw.csv", ["ensemble", "lambda", "replicate", "seed", "mse", "f_tap", "mstar_method"], raw)

    lam = cfg.universality_lambda
    curve_rows = []
    for ens in cfg.ensembles:
        seeds = [_seed(cfg, "curve", ens, lam, r) for r in range(cfg.replicates)]
        results = _run_tasks(_task_convergence, [_convergence_args(cfg, lam, ens, s) for s in seeds],
                             cfg.workers)
        all_results.extend({"ensemble": ens, "lambda": lam, "panel": "residual",
                            **{k: v for k, v in r.items() if k != "curves"}} for r in results)
        ok = [r for r in results if "error" not in r]
        if ok:
            labels = list(ok[0]["curves"])
            curve_rows += _curve_rows({lab: [r["curves"][lab] for r in ok] for lab in labels}, [ens])
    write_csv(out / "universality_residual.csv", ["ensemble", "method", "k", "mean_residual", "band", "count"],
              curve_rows)
    return all_results, {}


def exp_tap_vs_vb(cfg, out):
    eta = cfg.etas[0]
    models = {"wellspec": cfg.ensembles[0], "misspec": cfg.ensembles[1] if len(cfg.ensembles) > 1 else "RotInvUniform"}
    rows, raw, all_results = [], [], []
    for model, ens in models.items():
        for lam in cfg.lambdas:
            seeds = [_seed(cfg, ens, lam, r) for r in range(cfg.replicates)]
            results = _run_tasks(_task_tap_vs_vb, [(cfg.n, lam, ens, s, eta, cfg.vb_iters, cfg.grad_tol)
                                                   for s in seeds], cfg.workers)
            all_results.extend({"model": model, "ensemble": ens, "lambda": lam,
                                **{k: v for k, v in r.items()}} for r in results)
            ok = [r for r in results if "error" not in r]
            for method in ("TAP", "VB"):
                not_conv = sum(r[method]["status"] != Status.CONVERGED.value for r in ok)
                if not_conv:
                    log.info("%s %s lambda=%g: %d run(s) stopped before the gradient tolerance",
                             model, method, lam, not_conv)
                a = aggregate([r[method]["mse"] for r in ok], {}, excluded=len(results) - len(ok))
                rows.append([lam, model, method, a.mean, a.stderr_scaled, len(a.raw), a.excluded, not_conv])
                for rep, r in enumerate(ok):
                    raw.append([lam, model, method, rep, r["seed"], r[method]["mse"],
                                r[method]["status"], r[method]["grad_sq"]])
    write_csv(out / "tap_vs_vb.csv",
              ["lambda", "model", "method", "mean_mse", "band", "count", "excluded", "not_converged"], rows)
    write_csv(out / "tap_vs_vb_raw.csv",
              ["lambda", "model", "method", "replicate", "seed", "mse", "status", "final_grad_sq"], raw)
    return all_results, {"models": models}


def exp_jacobian_scatter(cfg, out):
    lam, ens = cfg.lambdas[0], cfg.ensembles[0]
    seed = _seed(cfg, ens, lam, 0)
    inst = sample_instance(cfg.n, lam, ens, seed)
    ms = find_m_star(inst)
    eig, rho = jacobian_spectrum(inst, ms.state.m)
    write_csv(out / "jacobian_spectrum.csv", ["re", "im"], [[float(z.real), float(z.imag)] for z in eig])
    summary = {"lambda": lam, "n": cfg.n, "ensemble": ens, "seed": seed, "spectral_radius": rho,
               "count": int(eig.size), "inside_unit_disk": int(np.sum(np.abs(eig) < 1))}
    (out / "jacobian_summary.json").write_text(json.dumps(summary, indent=2))
    return [{"seed": seed, "mstar_method": ms.method}], summary


def exp_landscape(cfg, out):
    summary = []
    for lam in cfg.lambdas:
        grid = landscape_grid(lam, cfg.nq, cfg.nphi)
        grid.to_csv(out / f"landscape_lambda{lam:g}.csv")
        c = scalar_constants(lam) if lam > 1 else None
        summary.append({"lambda": lam, "argmin_q": grid.argmin[0], "argmin_phi": grid.argmin[1],
                        "min_value": float(np.nanmin(grid.values)),
                        "q_star": c.q_star if c else 0.0, "e_star": c.e_star if c else None,
                        "gamma_capped_cells": int(grid.capped.sum())})
    (out / "landscape_summary.json").write_text(json.dumps(summary, indent=2))
    return [], {"grids": summary}


_RUNNERS = {
    "convergence": exp_convergence,
    "success_heatmap": exp_success_heatmap,
    "universality": exp_universality,
    "tap_vs_vb": exp_tap_vs_vb,
    "jacobian_scatter": exp_jacobian_scatter,
    "landscape": exp_landscape,
}


def _replicate_entries(results):
    entries = []
    for r in results:
        e = {k: v for k, v in r.items() if k not in ("curves", "success")}
        e["status"] = "failed" if "error" in r else "ok"
        entries.append(e)
    return entries


def run_experiment(cfg):
    """Run one experiment, write CSVs and ``manifest.json``; returns the manifest."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    t0 = time.perf_counter()
    results, extra = _RUNNERS[cfg.experiment](cfg, out)
    wall = time.perf_counter() - t0
    outputs = sorted(p for p in out.iterdir() if p.suffix == ".csv" or p.name.endswith("summary.json"))
    manifest = {
        "experiment": cfg.experiment,
        "config": asdict(cfg),
        "software": {"package": "tapsync", "version": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
        "rng_algorithm": "numpy.Philox4x64-10/SeedSequence",
        "replicates": _replicate_entries(results),
        "excluded": sum(1 for r in results if "error" in r),
        "summary": extra,
        "wall_time_s": wall,
        "outputs": {p.name: sha256(p) for p in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return manifest


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def rerun_manifest(manifest_path, output_dir=None):
    """Re-run the experiment recorded in a manifest (optionally elsewhere)."""
    data = json.loads(Path(manifest_path).read_text())
    cfg_data = dict(data["config"])
    if output_dir is not None:
        cfg_data["output_dir"] = str(output_dir)
    return run_experiment(ExperimentConfig.from_mapping(cfg_data))


def verify_manifest(manifest_path):
    """Names of output files whose checksum no longer matches the manifest."""
    path = Path(manifest_path)
    data = json.loads(path.read_text())
    bad = []
    for name, digest in data["outputs"].items():
        f = path.parent / name
        if not f.exists() or sha256(f) != digest:
            bad.append(name)
    return bad


PLOT_TEMPLATE = '''\
"""Plot tap-sync experiment outputs. Usage: python plot.py RESULTS_DIR"""
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd

out = Path(sys.argv[1] if len(sys.argv) > 1 else "results")

if (out / "convergence.csv").exists():
    df = pd.read_csv(out / "convergence.csv")
    for method, g in df.groupby("method"):
        plt.errorbar(g["k"] + 1, g["mean_residual"], yerr=g["band"], label=method)
    plt.xscale("log"); plt.yscale("log"); plt.xlabel("k"); plt.ylabel("residual"); plt.legend()
    plt.savefig(out / "convergence.png"); plt.clf()

if (out / "success_heatmap.csv").exists():
    df = pd.read_csv(out / "success_heatmap.csv")
    piv = df.pivot(index="lambda", columns="eta", values="success_fraction")
    plt.imshow(piv.values, origin="lower", aspect="auto",
               extent=[piv.columns.min(), piv.columns.max(), piv.index.min(), piv.index.max()])
    plt.colorbar(); plt.xlabel("eta"); plt.ylabel("lambda")
    plt.savefig(out / "success_heatmap.png"); plt.clf()

if (out / "universality_mse.csv").exists():
    df = pd.read_csv(out / "universality_mse.csv")
    for ens, g in df.groupby("ensemble"):
        plt.errorbar(g["lambda"], g["mean_mse"], yerr=g["band"], label=ens)
    plt.xlabel("lambda"); plt.ylabel("MSE"); plt.legend()
    plt.savefig(out / "universality_mse.png"); plt.clf()

if (out / "tap_vs_vb.csv").exists():
    df = pd.read_csv(out / "tap_vs_vb.csv")
    for (model, method), g in df.groupby(["model", "method"]):
        plt.errorbar(g["lambda"], g["mean_mse"], yerr=g["band"], label=f"{method} ({model})")
    plt.xlabel("lambda"); plt.ylabel("MSE"); plt.legend()
    plt.savefig(out / "tap_vs_vb.png"); plt.clf()

if (out / "jacobian_spectrum.csv").exists():
    df = pd.read_csv(out / "jacobian_spectrum.csv")
    plt.scatter(df["re"], df["im"], s=4)
    plt.gca().add_patch(plt.Circle((0, 0), 1, fill=False, ls="--"))
    plt.gca().set_aspect("equal")
    plt.savefig(out / "jacobian_spectrum.png"); plt.clf()

for f in sorted(out.glob("landscape_lambda*.csv")):
    df = pd.read_csv(f)
    plt.tricontourf(df["q"], df["phi"], df["value"], levels=40)
    plt.plot([0, 1], [0, 1], "k--"); plt.xlabel("q"); plt.ylabel("phi"); plt.colorbar()
    plt.savefig(f.with_suffix(".png")); plt.clf()
'''
