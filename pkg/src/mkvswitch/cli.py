"""Command line front-end.

Usage::

    mkvswitch SUBCOMMAND CONFIG.toml [--seed N] [--output-dir DIR]

Each run writes a report, CSV tables, the resolved configuration and a
``manifest.json`` into the output directory.  The exit status is 0 iff every
verdict passes, 1 on a failed verdict, and the error's ``exit_code`` on a
library error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_config, validate_config, write_config
from .ctmc import ergodic_profile
from .errors import MKVError, SchemaError, ValidationError
from .experiments import (ExperimentReport, averaging_experiment, chaos_experiment, fg14_experiment,
                          picard_experiment, simulate_experiment)
from .io import write_csv, write_json
from .model import validate_assumptions
from .noise import derive_stream

SUBCOMMANDS = ("simulate", "chaos", "average", "picard", "ergodicity", "fg14", "validate")
WORKERS_ENV = "MKVSWITCH_WORKERS"
EXIT_VERDICT = 1
EXIT_USAGE = 64


def resolve_workers(cfg: RunConfig):
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return cfg.workers, "config"
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        raise ValidationError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return value, "env"


# -- subcommand bodies: each returns (report, extra files) -------------------

def _simulate(cfg, outdir, workers):
    s = cfg.simulate
    ens, report = simulate_experiment(cfg.coefficients(), cfg.qmatrix(), s.n_particles, cfg.time.horizon,
                                      cfg.time.step, cfg.seed, initial=cfg.initial_law(),
                                      time_scale=s.time_scale, initial_state=cfg.chain.initial_state,
                                      workers=workers)
    return report, [ens.write_csv(outdir / "trajectories.csv")]


def _chaos(cfg, outdir, workers):
    c = cfg.chaos
    report = chaos_experiment(cfg.coefficients(), cfg.qmatrix(), c.n_list, cfg.time.horizon, cfg.time.step,
                              c.replicates, cfg.seed, initial=cfg.initial_law(), m_factor=c.m_factor,
                              initial_state=cfg.chain.initial_state, slope_threshold=c.slope_threshold,
                              tracked=c.tracked, proxy_check=c.proxy_check, workers=workers)
    return report, []


def _average(cfg, outdir, workers):
    a = cfg.average
    report = averaging_experiment(cfg.coefficients(), cfg.qmatrix(), a.eps_list, cfg.time.horizon,
                                  cfg.time.step, a.replicates, cfg.seed, initial=cfg.initial_law(),
                                  n_particles=a.n_particles, initial_state=cfg.chain.initial_state,
                                  fraction=a.fraction, workers=workers)
    return report, []


def _picard(cfg, outdir, workers):
    p = cfg.picard
    result, report = picard_experiment(cfg.coefficients(), cfg.qmatrix(), p.n_particles, cfg.time.horizon,
                                       cfg.time.step, cfg.seed, initial=cfg.initial_law(), tol=p.tol,
                                       max_iter=p.max_iter, time_scale=p.time_scale,
                                       initial_state=cfg.chain.initial_state, workers=workers)
    flow = result.flow
    means = flow.means()
    header = ["time"] + [f"mean_{c}" for c in range(means.shape[1])]
    path = write_csv(outdir / "picard_flow_mean.csv", header,
                     ((float(t), *means[j].tolist()) for j, t in enumerate(flow.times)))
    return report, [path]


def _ergodicity(cfg, outdir, workers):
    e = cfg.ergodicity
    grid = np.asarray(e.times, dtype=float) if e.times is not None else np.linspace(0.0, e.t_max, e.n_points)
    started = time.perf_counter()
    profile = ergodic_profile(cfg.qmatrix(), grid)
    path = write_csv(outdir / "ergodicity.csv", ["t", "state", "tv"], profile.rows())
    monotone = bool(np.all(np.diff(profile.tv, axis=1) <= 1e-12))
    table = [{"t": float(t), "tv_max": float(v)} for t, v in zip(profile.times, profile.tv.max(axis=0))]
    report = ExperimentReport("ergodicity", {"times": grid.tolist()}, table, {}, {},
                              {"tv_nonincreasing": monotone},
                              {"pi": profile.pi.tolist(), "decay_rate": profile.decay_rate,
                               "elapsed_s": time.perf_counter() - started})
    return report, [path]


def _fg14(cfg, outdir, workers):
    f = cfg.fg14
    report = fg14_experiment(f.law, f.d, f.n_list, f.replicates, cfg.seed, reference_size=f.reference_size,
                             slope_threshold=f.slope_threshold, workers=workers)
    return report, []


def _validate(cfg, outdir, workers):
    v = cfg.validate
    started = time.perf_counter()
    rep = validate_assumptions(cfg.coefficients(), v.probes, v.radius, derive_stream(cfg.seed, ("validate",)))
    print(f"K1 >= {rep.k1!r}  K2 >= {rep.k2!r}  envelope_ok={rep.envelope_ok}  "
          f"g_state_free_ok={rep.g_state_free_ok}  probes={rep.probes}")
    report = ExperimentReport("validate", {"probes": v.probes, "radius": v.radius}, [], {"assumptions": rep.to_dict()},
                              {}, {"assumptions": rep.passed}, {"elapsed_s": time.perf_counter() - started})
    return report, []


_HANDLERS = {"simulate": _simulate, "chaos": _chaos, "average": _average, "picard": _picard,
             "ergodicity": _ergodicity, "fg14": _fg14, "validate": _validate}


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(subcommand: str, cfg: RunConfig, output_dir=None) -> int:
    """Execute one subcommand and write its artefacts; returns the exit status."""
    if subcommand not in _HANDLERS:
        raise ValueError(f"unknown subcommand {subcommand!r}; expected one of {SUBCOMMANDS}")
    outdir = Path(output_dir or cfg.output_dir or Path("runs") / subcommand)
    outdir.mkdir(parents=True, exist_ok=True)
    workers, source = resolve_workers(cfg)
    if subcommand in ("simulate", "chaos", "average", "picard") and cfg.chain is None:
        raise SchemaError(f"subcommand {subcommand!r} needs a [chain] section")
    started = time.perf_counter()
    report, extra = _HANDLERS[subcommand](cfg, outdir, workers)
    elapsed = time.perf_counter() - started
    files = report.write(outdir) + list(extra) + [write_config(cfg, outdir / "config.toml")]
    manifest = {
        "subcommand": subcommand,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "version": __version__,
        "elapsed_s": elapsed,
        "workers": workers,
        "workers_source": source,
        "passed": report.passed,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "outputs": {Path(p).name: _sha256(p) for p in files},
    }
    write_json(outdir / "manifest.json", manifest)
    print(report.summary())
    return 0 if report.passed else EXIT_VERDICT


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mkvswitch", description="Regime-switching McKean-Vlasov experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the root seed")
    parser.add_argument("--output-dir", default=None, help="override the output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.output_dir is not None:
            cfg.output_dir = args.output_dir
        validate_config(cfg)
        return run(args.subcommand, cfg)
    except MKVError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
