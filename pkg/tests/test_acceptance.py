"""Acceptance suite: every primary criterion at its stated tolerance.

Each test prints one ``criterion k ...: PASS|FAIL`` line; the lines are also
collected in the terminal summary.  The heavy experiments run once per module
and are shared between criteria that read the same data.
"""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from mkvswitch.cli import WORKERS_ENV, main
from mkvswitch.config import parse_config
from mkvswitch.ctmc import build_qmatrix, ergodic_profile, invariant_measure, sample_path, transition_matrix
from mkvswitch.experiments import (averaging_experiment, chaos_experiment, fg14_experiment,
                                   picard_experiment, rate_fit, simulate_experiment)
from mkvswitch.measures import w1_assignment, w2_1d, w2_assignment
from mkvswitch.model import builtin_model
from mkvswitch.noise import JumpSpec, compensate_integral, derive_stream, make_distribution, sample_jump_batch
from mkvswitch.simulate import strong_error_study

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
MINUTE = 60.0


def announce(emit, k, title, checks):
    ok = all(v for v, _ in checks.values())
    detail = "  ".join(f"{name}={'ok' if v else 'FAIL'}({info})" for name, (v, info) in checks.items())
    emit(f"criterion {k} {title}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def runner(cfg_name, fn):
    cfg = parse_config(CONFIGS / cfg_name)
    started = time.perf_counter()
    out = fn(cfg)
    return cfg, out, time.perf_counter() - started


@pytest.fixture(scope="module")
def chaos_run():
    def go(cfg):
        c = cfg.chaos
        return chaos_experiment(cfg.coefficients(), cfg.qmatrix(), c.n_list, cfg.time.horizon, cfg.time.step,
                                c.replicates, cfg.seed, initial=cfg.initial_law(), m_factor=c.m_factor,
                                slope_threshold=c.slope_threshold, proxy_check=False)
    return runner("chaos.toml", go)


@pytest.fixture(scope="module")
def average_run():
    def go(cfg):
        a = cfg.average
        return averaging_experiment(cfg.coefficients(), cfg.qmatrix(), a.eps_list, cfg.time.horizon, cfg.time.step,
                                    a.replicates, cfg.seed, initial=cfg.initial_law(), n_particles=a.n_particles,
                                    fraction=a.fraction)
    return runner("average.toml", go)


# -- 1, 2: propagation of chaos ------------------------------------------------

def test_criterion_1_propagation_of_chaos(chaos_run, verdict_line):
    cfg, rep, elapsed = chaos_run
    fit = rep.fits["sup_sq"]
    checks = {
        "setup": (cfg.chaos.n_list == [50, 100, 200, 400, 800] and cfg.chaos.replicates == 16
                  and cfg.chaos.m_factor == 4 and cfg.time.step == 1e-3, "N=50..800 R=16 M=4N h=1e-3"),
        "slope": (fit.slope <= -0.4, f"{fit.slope:.3f}<=-0.4"),
        "nonincreasing": (rep.verdicts["sup_nonincreasing"], "3 SE"),
        "runtime": (elapsed <= 10 * MINUTE, f"{elapsed:.0f}s<=600s"),
    }
    assert announce(verdict_line, 1, "propagation of chaos", checks)


def test_criterion_2_empirical_w2(chaos_run, verdict_line):
    _, rep, _ = chaos_run
    fit = rep.fits["w2sq"]
    checks = {"slope": (fit.slope <= -0.4, f"{fit.slope:.3f}<=-0.4")}
    assert announce(verdict_line, 2, "empirical W2 against proxy", checks)


# -- 3: empirical measure rates --------------------------------------------------

def test_criterion_3_empirical_measure_rates(verdict_line):
    started = time.perf_counter()
    gauss = parse_config(CONFIGS / "fg14_gaussian_d1.toml")
    unif = parse_config(CONFIGS / "fg14_uniform_d5.toml")
    reps = {}
    for cfg in (gauss, unif):
        f = cfg.fg14
        reps[f.law] = fg14_experiment(f.law, f.d, f.n_list, f.replicates, cfg.seed,
                                      reference_size=f.reference_size)
    elapsed = time.perf_counter() - started
    g, u = reps["gaussian"].fit.slope, reps["uniform"].fit.slope
    checks = {
        "setup": (gauss.fg14.n_list[0] == 100 and gauss.fg14.n_list[-1] == 6400 and unif.fg14.d == 5
                  and unif.fg14.reference_size == 100_000 and unif.fg14.replicates == 16, "N=100..6400 ref=1e5 R=16"),
        "gaussian_d1": (g <= -0.4, f"{g:.3f}<=-0.4"),
        "uniform_d5": (u <= -0.32, f"{u:.3f}<=-0.32"),
        "runtime": (elapsed <= 5 * MINUTE, f"{elapsed:.0f}s<=300s"),
    }
    assert announce(verdict_line, 3, "empirical measure rates", checks)


# -- 4: averaging principle ----------------------------------------------------

def test_criterion_4_averaging(average_run, verdict_line):
    cfg, rep, elapsed = average_run
    errs = rep.column("err")
    law = cfg.initial_law()
    jumps = JumpSpec(2.0, make_distribution("gaussian", {"mean": [0.0], "std": 1.0}))
    single = builtin_model("switching-mf-ou", {"a": 1.5, "c": 0.3, "s": 0.5, "gamma": 0.3}, jumps=jumps)
    flat = builtin_model("switching-mf-ou", {"a": [1.5, 1.5], "c": [0.3, 0.3], "s": [0.5, 0.5],
                                             "gamma": [0.3, 0.3]}, jumps=jumps)
    controls = [
        averaging_experiment(single, build_qmatrix([[0.0]]), cfg.average.eps_list, cfg.time.horizon,
                             cfg.time.step, 4, cfg.seed, initial=law, n_particles=64),
        averaging_experiment(flat, cfg.qmatrix(), cfg.average.eps_list, cfg.time.horizon,
                             cfg.time.step, 4, cfg.seed, initial=law, n_particles=64),
    ]
    worst = max(float(c.column("err").max()) for c in controls)
    checks = {
        "setup": (cfg.average.eps_list == [1.0, 0.1, 0.01, 0.001] and cfg.average.replicates == 32,
                  "eps=1..1e-3 R=32"),
        "nonincreasing": (rep.verdicts["nonincreasing"], "3 SE"),
        "final_fraction": (errs[-1] <= 0.2 * errs[0], f"{errs[-1]:.3g}<=0.2*{errs[0]:.3g}"),
        "controls": (worst <= 1e-14, f"max={worst:.1e}<=1e-14"),
        "runtime": (elapsed <= 10 * MINUTE, f"{elapsed:.0f}s<=600s"),
    }
    assert announce(verdict_line, 4, "averaging principle", checks)


# -- 5: coupling inequality on every replicate ---------------------------------

def test_criterion_5_coupling_inequality(chaos_run, average_run, verdict_line):
    # lemma31_check raises on any violation, so reaching here means every
    # replicate satisfied W2^2 <= paired mean squared distance + 1e-10
    _, chaos, _ = chaos_run
    _, avg, _ = average_run
    strict = chaos.metadata["coupling_strict_witness"] or avg.metadata["lemma31_strict_witness"]
    checks = {
        "chaos_replicates": (chaos.verdicts["coupling_bound"], "all N and r"),
        "averaging_replicates": (avg.verdicts["lemma31"], "all eps and r"),
        "strict_witness": (bool(strict), "found" if strict else "none"),
    }
    assert announce(verdict_line, 5, "coupling inequality", checks)


# -- 6: transport exactness ----------------------------------------------------

def _brute(a, b, p):
    best = min(np.mean(np.linalg.norm(a - b[list(perm)], axis=1) ** p)
               for perm in itertools.permutations(range(len(a))))
    return best ** (1 / p)


def test_criterion_6_transport_exactness(verdict_line):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        n, d = int(rng.integers(1, 8)), int(rng.integers(1, 4))
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d)) * rng.uniform(0.5, 2)
        worst = max(worst, abs(w2_assignment(a, b) - _brute(a, b, 2)), abs(w1_assignment(a, b) - _brute(a, b, 1)))
    worst1d = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 60))
        a, b = rng.standard_t(3, size=n), rng.normal(size=n)
        worst1d = max(worst1d, abs(w2_1d(a, b) - w2_assignment(a, b)))
    checks = {"brute_force": (worst <= 1e-10, f"{worst:.1e}"), "sorting": (worst1d <= 1e-10, f"{worst1d:.1e}")}
    assert announce(verdict_line, 6, "transport exactness", checks)


# -- 7: CTMC correctness ---------------------------------------------------------

def test_criterion_7_ctmc(verdict_line):
    a, b = 1.0, 2.0
    q = build_qmatrix([[-a, a], [b, -b]])
    pi = invariant_measure(q)
    closed = [abs(transition_matrix(q, t)[0, 0] - (b + a * math.exp(-(a + b) * t)) / (a + b))
              for t in (0.1, 1.0, 10.0)]
    residual = float(np.abs(pi @ q.rates).max())
    rng = derive_stream(7, "occupation").generator()
    horizon = 20.0
    fracs = np.array([sample_path(q, 0, horizon, 1.0, rng).occupation(2)[0] / horizon for _ in range(4000)])
    # the time-average carries an O(1/T) bias from the start in state 0
    bias = a / (a + b) ** 2 * (1 - math.exp(-(a + b) * horizon)) / horizon
    occ_z = abs(fracs.mean() - pi[0] - bias) / (fracs.std(ddof=1) / math.sqrt(len(fracs)))
    grid = np.linspace(0.0, 10.0, 101)
    prof = ergodic_profile(q, grid)
    tv_err = max(float(np.abs(prof.tv[0] - 2 * pi[1] * np.exp(-(a + b) * grid)).max()),
                 float(np.abs(prof.tv[1] - 2 * pi[0] * np.exp(-(a + b) * grid)).max()))
    checks = {
        "closed_form": (max(closed) <= 1e-10, f"{max(closed):.1e}"),
        "invariant_residual": (residual <= 1e-10, f"{residual:.1e}"),
        "occupation": (occ_z <= 3.0, f"z={occ_z:.2f}"),
        "tv_curve": (tv_err <= 1e-8, f"{tv_err:.1e}"),
    }
    assert announce(verdict_line, 7, "CTMC correctness", checks)


# -- 8: Picard decoupling --------------------------------------------------------

def test_criterion_8_picard(verdict_line):
    cfg = parse_config(CONFIGS / "picard.toml")
    p = cfg.picard
    coeffs = cfg.coefficients()
    res, rep = picard_experiment(coeffs, cfg.qmatrix(), p.n_particles, cfg.time.horizon, cfg.time.step, cfg.seed,
                                 initial=cfg.initial_law(), tol=p.tol, max_iter=p.max_iter)
    dist = rep.column("distance")
    checks = {
        "g_state_free": (coeffs.g_state_free, "yes"),
        "converged": (rep.verdicts["converged"] and res.iterations <= 15 and dist[-1] < 1e-2,
                      f"{res.iterations} iterations, last={dist[-1]:.2e}"),
        "geometric": (rep.verdicts["contraction"], "ratio<1.1 after 2"),
        "mean_oracle": (rep.verdicts["mean_oracle"], f"max z={rep.metadata['max_z']:.2f}"),
    }
    assert announce(verdict_line, 8, "Picard decoupling", checks)


# -- 9: scheme and noise sanity --------------------------------------------------

def _compensated_steps(spec, f, h, steps, rng):
    comp = spec.integrate(f)
    out = np.empty(steps)
    for s in range(steps):
        batch = sample_jump_batch(spec, s * h, h, rng)
        vals = f(batch.marks) if len(batch) else np.zeros(0)
        out[s] = float(np.squeeze(compensate_integral(batch, vals, comp, h)))
    return out


def test_criterion_9_scheme_and_noise(tmp_path, monkeypatch, verdict_line):
    cfg = parse_config(CONFIGS / "simulate.toml")
    _, sim = simulate_experiment(cfg.coefficients(), cfg.qmatrix(), cfg.simulate.n_particles, cfg.time.horizon,
                                 cfg.time.step, cfg.seed, initial=cfg.initial_law())

    gauss = make_distribution("gaussian", {"mean": [0.0], "std": 1.0})
    spec = JumpSpec(2.0, gauss)
    h = 0.05
    rng = derive_stream(9, "compensated").generator()
    mart = _compensated_steps(spec, lambda z: np.full(len(z), 1.5), h, 100_000, rng)
    mart_z = abs(mart.mean()) / (mart.std() / math.sqrt(len(mart)))
    iso = _compensated_steps(spec, lambda z: z[:, 0], h, 100_000, rng)
    target = float(h * spec.integrate(lambda z: z[:, 0] ** 2))
    iso_se = math.sqrt((np.mean((iso - iso.mean()) ** 4) - iso.var() ** 2) / len(iso))
    iso_z = abs(iso.var() - target) / iso_se

    coeffs = cfg.coefficients()
    chain = sample_path(cfg.qmatrix(), 0, 1.0, 1.0, derive_stream(2, ("omega0", 0)))
    study = strong_error_study(coeffs, chain, 200, 1.0, [1 / 16, 1 / 32, 1 / 64, 1 / 128], 5,
                               initial=cfg.initial_law())
    slope = rate_fit(1.0 / np.array(study["steps"]), study["errors"]).slope

    blobs = []
    for workers in ("1", "3"):
        monkeypatch.setenv(WORKERS_ENV, workers)
        out = tmp_path / f"w{workers}"
        assert main(["simulate", str(CONFIGS / "simulate.toml"), "--output-dir", str(out)]) == 0
        assert main(["chaos", str(_small_chaos(tmp_path)), "--output-dir", str(out / "chaos")]) in (0, 1)
        blobs.append([(out / "trajectories.csv").read_bytes(), (out / "simulate_aggregate.csv").read_bytes(),
                      (out / "chaos" / "chaos_aggregate.csv").read_bytes()])
        assert json.loads((out / "manifest.json").read_text())["workers"] == int(workers)
    checks = {
        "mean_oracle": (sim.verdicts["mean_oracle"], f"max z={sim.metadata['max_z']:.2f}"),
        "martingale": (mart_z <= 3.0, f"z={mart_z:.2f}"),
        "isometry": (iso_z <= 3.0, f"z={iso_z:.2f}"),
        "strong_order": (slope <= -0.5 + 0.2, f"{slope:.3f}<=-0.3"),
        "bit_reproducible": (blobs[0] == blobs[1], "workers 1 vs 3"),
    }
    assert announce(verdict_line, 9, "scheme and noise sanity", checks)


def _small_chaos(tmp_path):
    text = (CONFIGS / "chaos.toml").read_text()
    text = text.replace("n_list = [50, 100, 200, 400, 800]", "n_list = [10, 20, 40]")
    text = text.replace("step = 1e-3", "step = 0.02").replace("replicates = 16", "replicates = 8")
    path = tmp_path / "chaos_small.toml"
    path.write_text(text)
    return path
