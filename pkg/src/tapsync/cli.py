"""``tap-sync`` command line.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, ConvergenceError, DomainError, TapSyncError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("tapsync")


def _emit(obj):
    print(json.dumps(obj, indent=2, default=lambda o: o.item() if hasattr(o, "item") else str(o)))


def write_vector(path, v, name="m"):
    np.savetxt(path, np.asarray(v, dtype=float), fmt="%.17g", header=name, comments="")


def read_vector(path):
    try:
        return np.loadtxt(path, skiprows=1, ndmin=1, dtype=float)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read vector from {path}: {exc}") from exc


def _instance(args):
    from .model import load_instance, sample_instance

    if args.instance == "sampled":
        if args.n is None or args.lam is None:
            raise ConfigError("a sampled instance needs --n and --lambda")
        return sample_instance(args.n, args.lam, args.ensemble, args.seed)
    try:
        return load_instance(args.instance)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load instance {args.instance}: {exc}") from exc


def _add_instance_args(p):
    p.add_argument("--instance", default="sampled",
                   help="instance file (with .json sidecar) or 'sampled'")
    p.add_argument("--n", type=int, help="dimension of a sampled instance")
    p.add_argument("--lambda", dest="lam", type=float, help="signal strength of a sampled instance")
    p.add_argument("--ensemble", default="GOE", help="noise ensemble, e.g. GOE, Laplace, StudentT(4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-instance", help="also write the instance to this path")


def cmd_fixed_point(args):
    from .scalar import scalar_constants

    if not args.lam > 0:
        raise ConfigError("--lambda must be positive")
    _emit(scalar_constants(args.lam, k_max=args.kmax if args.lam > 1 else 0).as_dict())


def cmd_solve(args):
    from .model import save_instance
    from .solvers import SolverConfig, find_m_star, run_solver

    inst = _instance(args)
    if args.save_instance:
        save_instance(inst, args.save_instance)
    ref = find_m_star(inst).state.m if args.residual else None
    cfg = SolverConfig(args.method, eta=args.eta, max_iters=args.max_iters, grad_tol=args.grad_tol,
                       residual_tol=args.residual_tol, stop_on_residual=args.residual is not None)
    state, trace = run_solver(inst, cfg, ref=ref)
    if args.out:
        trace.to_csv(args.out)
    if args.save_m:
        write_vector(args.save_m, state.m)
    last = trace.records[-1]
    _emit({"status": trace.status.value, "iterations": trace.iterations, "f_tap": last.f_tap,
           "grad_sq": last.grad_sq, "overlap": last.overlap, "residual": last.residual})


def cmd_diagnostics(args):
    from .diagnostics import diagnose
    from .scalar import scalar_constants
    from .solvers import find_m_star

    inst = _instance(args)
    m = find_m_star(inst).state.m if args.at == "mstar" else read_vector(args.at)
    if m.shape != (inst.n,):
        raise ConfigError(f"magnetization has length {m.size}, instance has n={inst.n}")
    report = diagnose(inst, m, scalar_constants(inst.lam), delta=args.delta, eta=args.w2_eta,
                      spectrum=not args.no_spectrum)
    if args.out:
        report.to_json(args.out)
    if args.spectrum_out and report.jacobian_spectrum is not None:
        from .experiments import write_csv
        write_csv(args.spectrum_out, ["re", "im"],
                  [[float(z.real), float(z.imag)] for z in report.jacobian_spectrum])
    _emit(report.to_dict())


def cmd_landscape(args):
    from .landscape import landscape_grid

    grid = landscape_grid(args.lam, args.nq, args.nphi)
    if args.out:
        grid.to_csv(args.out)
    _emit({"lambda": args.lam, "argmin_q": grid.argmin[0], "argmin_phi": grid.argmin[1],
           "min_value": float(np.nanmin(grid.values)), "gamma_capped_cells": int(grid.capped.sum())})


def cmd_experiment(args):
    from .experiments import ExperimentConfig, rerun_manifest, run_experiment

    if args.manifest:
        manifest = rerun_manifest(args.manifest, args.out)
    else:
        overrides = {"output_dir": args.out, "workers": args.workers, "replicates": args.replicates,
                     "n": args.n, "master_seed": args.master_seed}
        if args.config:
            cfg = ExperimentConfig.from_toml(args.config, experiment=args.name, **overrides)
        else:
            if not args.name:
                raise ConfigError("experiment needs --name or --config")
            cfg = ExperimentConfig.from_mapping({"experiment": args.name}, **overrides)
        manifest = run_experiment(cfg)
    _emit({"experiment": manifest["experiment"], "outputs": manifest["outputs"],
           "excluded": manifest["excluded"], "wall_time_s": manifest["wall_time_s"]})


def cmd_plot_template(args):
    from .experiments import PLOT_TEMPLATE

    if args.out:
        Path(args.out).write_text(PLOT_TEMPLATE)
    else:
        sys.stdout.write(PLOT_TEMPLATE)


def build_parser():
    p = argparse.ArgumentParser(prog="tap-sync", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fixed-point", help="scalar constants q*, h*, e*, b* and state evolution")
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--kmax", type=int, default=0)
    s.set_defaults(func=cmd_fixed_point)

    s = sub.add_parser("solve", help="run AMP or NGD and write a trace")
    _add_instance_args(s)
    s.add_argument("--method", choices=["amp", "ngd", "ngd-vb"], default="amp")
    s.add_argument("--eta", type=float, default=0.1)
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("--grad-tol", type=float, default=1e-10)
    s.add_argument("--residual", action="store_const", const=True, default=None,
                   help="track the residual to a high-accuracy minimizer and stop when it is small")
    s.add_argument("--residual-tol", type=float, default=1e-4)
    s.add_argument("--out", help="trace CSV")
    s.add_argument("--save-m", help="write the final magnetization (one value per line)")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("diagnostics", help="stability and distributional checks at a magnetization")
    _add_instance_args(s)
    s.add_argument("--at", default="mstar", help="magnetization file, or 'mstar' to compute it")
    s.add_argument("--delta", type=float, default=0.05)
    s.add_argument("--w2-eta", type=float, default=0.3)
    s.add_argument("--no-spectrum", action="store_true")
    s.add_argument("--out", help="report JSON")
    s.add_argument("--spectrum-out", help="Jacobian spectrum CSV (re, im)")
    s.set_defaults(func=cmd_diagnostics)

    s = sub.add_parser("landscape", help="constrained free-energy landscape on a (q, phi) grid")
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--nq", type=int, default=101)
    s.add_argument("--nphi", type=int, default=101)
    s.add_argument("--out", help="grid CSV")
    s.set_defaults(func=cmd_landscape)

    s = sub.add_parser("experiment", help="run a replicated experiment")
    s.add_argument("--name", choices=["convergence", "success_heatmap", "universality", "tap_vs_vb",
                                      "jacobian_scatter", "landscape"])
    s.add_argument("--config", help="TOML config file")
    s.add_argument("--manifest", help="re-run the experiment recorded in a manifest")
    s.add_argument("--out", help="output directory")
    s.add_argument("--workers", type=int)
    s.add_argument("--replicates", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--master-seed", type=int)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("plot-template", help="print a matplotlib script for experiment outputs")
    s.add_argument("--out")
    s.set_defaults(func=cmd_plot_template)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TapSyncError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
