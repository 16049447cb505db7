"""Desk-scale experiments: chaos rates, averaging, coupling inequalities and
empirical-measure rates.

Expectations over the chain are taken by replicating chain paths (outer loop,
one derived root seed per replicate); expectations over the idiosyncratic
noise use the particle ensemble on that chain path.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ctmc import QMatrix, invariant_measure, sample_path
from .errors import GNotStateFree, InequalityViolated, InsufficientReplicates, NonPositiveData
from .io import write_csv, write_json
from .measures import coupling_upper_bound, w2, w2_1d_unequal, w2_assignment
from .model import Coefficients, average
from .noise import Distribution, derive_stream, make_distribution
from .simulate import run_auxiliary_coupled, run_averaged, run_particle_system

LEMMA_SLACK = 1e-10
SLOPE_SLACK = 0.8


@dataclass
class RateFit:
    xs: np.ndarray
    ys: np.ndarray
    ses: Optional[np.ndarray]
    slope: float
    intercept: float
    residuals: np.ndarray

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.residuals))

    def predict(self, x):
        return np.exp(self.intercept) * np.asarray(x, dtype=float) ** self.slope

    def line(self) -> str:
        return (f"slope={self.slope!r} intercept={self.intercept!r} "
                f"residual_norm={self.residual_norm!r} points={len(self.xs)}")

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "residual_norm": self.residual_norm,
                "xs": self.xs.tolist(), "ys": self.ys.tolist(),
                "ses": None if self.ses is None else self.ses.tolist()}


def rate_fit(xs, ys, ses=None) -> RateFit:
    """Ordinary least squares of log y on log x (standard errors are carried, not used)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 3:
        raise ValueError("rate fit needs at least 3 matching abscissae and ordinates")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise NonPositiveData("log-log fit needs strictly positive data")
    lx, ly = np.log(xs), np.log(ys)
    design = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    return RateFit(xs, ys, None if ses is None else np.asarray(ses, dtype=float),
                   float(slope), float(intercept), resid)


def chaos_rate(n, d: int, q: float = math.inf):
    """The rate epsilon_N of the conditional propagation-of-chaos bound."""
    n = np.asarray(n, dtype=float)
    tail = n ** (-(q - 2) / q) if math.isfinite(q) else 1.0 / n
    if d < 4:
        if q == 4:
            raise ValueError("the rate table excludes q = 4 for d < 4")
        return n ** -0.5 + tail
    if d == 4:
        if q == 4:
            raise ValueError("the rate table excludes q = 4 for d = 4")
        return n ** -0.5 * np.log1p(n) + tail
    if math.isfinite(q) and q == d / (d - 2):
        raise ValueError("the rate table excludes q = d/(d-2) for d > 4")
    return n ** (-2.0 / d) + tail


def guaranteed_exponent(d: int) -> float:
    """Exponent of the leading N-term of the rate (log factor ignored at d = 4)."""
    return -0.5 if d <= 4 else -2.0 / d


@dataclass
class ExperimentReport:
    name: str
    config: dict
    table: list
    raw: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    @property
    def fit(self) -> Optional[RateFit]:
        return next(iter(self.fits.values()), None)

    def column(self, key) -> np.ndarray:
        return np.array([row[key] for row in self.table])

    def to_dict(self):
        return {"name": self.name, "config": self.config, "table": self.table, "raw": self.raw,
                "fits": {k: (None if v is None else v.to_dict()) for k, v in self.fits.items()},
                "verdicts": self.verdicts, "passed": self.passed, "metadata": self.metadata}

    def summary(self) -> str:
        lines = [f"[{self.name}] {'PASS' if self.passed else 'FAIL'}"]
        for key, fit in self.fits.items():
            if fit is not None:
                lines.append(f"  fit {key}: {fit.line()}")
        for key, ok in self.verdicts.items():
            lines.append(f"  {'pass' if ok else 'FAIL'}  {key}")
        return "\n".join(lines)

    def write(self, outdir, stem: Optional[str] = None) -> list:
        outdir = Path(outdir)
        stem = stem or self.name
        paths = [write_json(outdir / f"{stem}_report.json", self.to_dict())]
        if self.table:
            header = list(self.table[0])
            paths.append(write_csv(outdir / f"{stem}_aggregate.csv", header,
                                   ([row[h] for h in header] for row in self.table)))
        lines = [f"{key} {fit.line()}" for key, fit in self.fits.items() if fit is not None]
        path = outdir / f"{stem}_ratefit.txt"
        path.write_text("".join(line + "\n" for line in lines))
        paths.append(path)
        return paths


def replicate_seed(root: int, r: int) -> int:
    return derive_stream(root, ("replicate", r)).seed64()


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def _nonincreasing(means, ses, k=3.0) -> bool:
    return all(means[j + 1] <= means[j] + k * math.hypot(ses[j], ses[j + 1])
               for j in range(len(means) - 1))


def _safe_fit(xs, ys, ses):
    ys = np.asarray(ys, dtype=float)
    if np.all(ys <= 1e-28):
        return None
    return rate_fit(xs, ys, ses)


# ---------------------------------------------------------------------------
# inequality checks
# ---------------------------------------------------------------------------

def lemma31_check(pairs, labels=None, name: str = "lemma31") -> ExperimentReport:
    """W_2^2 between coupled clouds never exceeds their index-wise mean squared distance.

    ``pairs`` is a sequence of ``(cloud_a, cloud_b)`` with rows coupled by
    index.  Raises :class:`InequalityViolated` on the first violation, which
    can only come from a faulty transport solver.
    """
    rows = []
    for r, (a, b) in enumerate(pairs):
        lhs = w2(a, b) ** 2
        rhs = coupling_upper_bound(a, b)
        label = r if labels is None else labels[r]
        if lhs > rhs + LEMMA_SLACK:
            raise InequalityViolated(f"W2^2 = {lhs!r} exceeds the coupling bound {rhs!r} (replicate {label})",
                                     witness={"replicate": label, "w2sq": lhs, "coupling": rhs})
        rows.append({"replicate": label, "w2sq": lhs, "coupling": rhs,
                     "ratio": lhs / rhs if rhs > 0 else 1.0})
    lhs = np.array([r["w2sq"] for r in rows])
    rhs = np.array([r["coupling"] for r in rows])
    strict = bool(np.any(lhs < rhs - LEMMA_SLACK))
    return ExperimentReport(
        name, {"pairs": len(rows)}, rows,
        verdicts={"inequality_holds": True},
        metadata={"mean_w2sq": float(lhs.mean()) if len(lhs) else 0.0,
                  "mean_coupling": float(rhs.mean()) if len(rhs) else 0.0,
                  "strict_witness": strict})


# ---------------------------------------------------------------------------
# propagation of chaos
# ---------------------------------------------------------------------------

def chaos_experiment(coeffs: Coefficients, q: QMatrix, n_list, horizon: float, step: float,
                     replicates: int, root_seed: int, *, initial: Distribution, m_factor: int = 4,
                     initial_state: int = 0, slope_threshold: float = -0.4, tracked: Optional[int] = None,
                     moment_q: float = math.inf, proxy_check: bool = True, workers: int = 1) -> ExperimentReport:
    """Propagation-of-chaos rates with synchronous coupling.

    Per replicate (one chain path) and per N, records
    ``sup_t |X^k - Xhat^k|^2`` averaged over the first ``tracked`` particles,
    and ``W_2^2(mu_T^N, proxy)`` where the proxy is an N-point block of the
    auxiliary cloud that is independent of the system given the chain.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 3 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("N list must be increasing with at least 3 values")
    if replicates < 8:
        raise InsufficientReplicates(f"chaos experiment needs >= 8 replicates, got {replicates}")
    if m_factor < 1:
        raise ValueError("auxiliary factor must be >= 1")
    tracked = n_list[0] if tracked is None else min(int(tracked), n_list[0])
    started = time.perf_counter()

    def one(r):
        root = replicate_seed(root_seed, r)
        out = []
        for n in n_list:
            m = m_factor * n
            system, aux = run_auxiliary_coupled(coeffs, q, n, horizon, step, root, n_aux=m,
                                                initial=initial, initial_state=initial_state)
            gap = np.max(np.sum((system.paths[:tracked] - aux.paths[:tracked]) ** 2, axis=2), axis=1)
            if m >= 2 * n:
                proxy = aux.cloud()[n:2 * n]
            else:
                pick = derive_stream(root, ("subsample", n)).generator().choice(m, n, replace=False)
                proxy = aux.cloud()[np.sort(pick)]
            sys_cloud = system.cloud()
            out.append({
                "sup_sq": float(gap.mean()), "sup_sq_k0": float(gap[0]), "sup_sq_k1": float(gap[1 % tracked]),
                "w2sq": w2(sys_cloud, proxy) ** 2,
                "pair": (sys_cloud, aux.cloud()[:n]),
                "jumps": len(system.chain),
            })
        return out

    per_rep = _map(one, range(replicates), workers)
    table, raw = [], {"sup_sq": [], "w2sq": [], "sup_sq_k0": [], "sup_sq_k1": []}
    pairs, labels = [], []
    for j, n in enumerate(n_list):
        stats = [rep[j] for rep in per_rep]
        for key in raw:
            raw[key].append([s[key] for s in stats])
        sup_m, sup_se = _mean_se([s["sup_sq"] for s in stats])
        w_m, w_se = _mean_se([s["w2sq"] for s in stats])
        table.append({"N": n, "sup_sq": sup_m, "sup_sq_se": sup_se, "w2sq": w_m, "w2sq_se": w_se,
                      "eps_N": float(chaos_rate(n, coeffs.dim, moment_q))})
        for r, s in enumerate(stats):
            pairs.append(s["pair"])
            labels.append(f"N={n},r={r}")
    lemma = lemma31_check(pairs, labels, name="coupling_bound")

    xs = np.array(n_list, dtype=float)
    sup = np.array([row["sup_sq"] for row in table])
    sup_se = np.array([row["sup_sq_se"] for row in table])
    w2m = np.array([row["w2sq"] for row in table])
    w2se = np.array([row["w2sq_se"] for row in table])
    fits = {"sup_sq": _safe_fit(xs, sup, sup_se), "w2sq": _safe_fit(xs, w2m, w2se)}
    eps = chaos_rate(xs, coeffs.dim, moment_q)
    c_tilde = sup[0] / eps[0]
    k0 = np.array(raw["sup_sq_k0"])
    k1 = np.array(raw["sup_sq_k1"])
    exch = all(abs(a.mean() - b.mean()) <= 3 * math.hypot(a.std(ddof=1), b.std(ddof=1)) / math.sqrt(len(a))
               for a, b in zip(k0, k1))
    verdicts = {
        "sup_slope": fits["sup_sq"] is None or fits["sup_sq"].slope <= slope_threshold,
        "w2_slope": fits["w2sq"] is None or fits["w2sq"].slope <= slope_threshold,
        "sup_nonincreasing": _nonincreasing(sup, sup_se),
        "bound_c_tilde": bool(np.all(sup <= c_tilde * eps + 3 * sup_se)),
        "coupling_bound": lemma.passed,
        "exchangeable": exch,
    }
    metadata = {"c_tilde": float(c_tilde), "tracked": tracked, "coupling_strict_witness": lemma.metadata["strict_witness"],
                "coupling_mean_w2sq": lemma.metadata["mean_w2sq"], "coupling_mean_bound": lemma.metadata["mean_coupling"],
                "mean_chain_jumps": float(np.mean([rep[0]["jumps"] for rep in per_rep]))}
    if proxy_check:
        n = n_list[-1]
        root = replicate_seed(root_seed, 0)
        base = per_rep[0][-1]["sup_sq"]
        system, aux = run_auxiliary_coupled(coeffs, q, n, horizon, step, root, n_aux=2 * m_factor * n,
                                            initial=initial, initial_state=initial_state)
        gap = np.max(np.sum((system.paths[:tracked] - aux.paths[:tracked]) ** 2, axis=2), axis=1)
        metadata["proxy_check"] = {"N": n, "M": m_factor * n, "sup_sq_M": base, "sup_sq_2M": float(gap.mean()),
                                   "abs_diff": abs(base - float(gap.mean()))}
    metadata["elapsed_s"] = time.perf_counter() - started
    config = {"n_list": n_list, "horizon": horizon, "step": step, "replicates": replicates, "m_factor": m_factor,
              "root_seed": root_seed, "slope_threshold": slope_threshold, "model": coeffs.name,
              "params": coeffs.params}
    return ExperimentReport("chaos", config, table, raw, fits, verdicts, metadata)


# ---------------------------------------------------------------------------
# averaging principle
# ---------------------------------------------------------------------------

def averaging_experiment(coeffs: Coefficients, q: QMatrix, eps_list, horizon: float, step: float,
                         replicates: int, root_seed: int, *, initial: Distribution, n_particles: int = 256,
                         initial_state: int = 0, fraction: float = 0.2, workers: int = 1) -> ExperimentReport:
    """Mean squared gap at the horizon between the fast-switching system and the
    averaged system, synchronously coupled, for a decreasing list of time scales."""
    if coeffs.has_jumps and not coeffs.g_state_free:
        raise GNotStateFree("averaging needs a jump coefficient free of (x, mu)")
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("time-scale list must be decreasing")
    pi = invariant_measure(q)
    averaged = average(coeffs, pi)
    started = time.perf_counter()

    def one(r):
        root = replicate_seed(root_seed, r)
        out = []
        for eps in eps_list:
            chain = sample_path(q, initial_state, horizon, eps, derive_stream(root, ("omega0", 0)))
            fast = run_particle_system(coeffs, q, n_particles, horizon, step, root, eps,
                                       initial=initial, initial_state=initial_state, chain=chain)
            slow = run_averaged(averaged, horizon, step, root, n_particles, initial=initial,
                                split_times=chain.jump_times)
            a, b = fast.cloud(), slow.cloud()
            out.append({"err": float(np.mean(np.sum((a - b) ** 2, axis=1))), "pair": (a, b), "jumps": len(chain)})
        return out

    per_rep = _map(one, range(replicates), workers)
    table, raw, pairs, labels = [], {"err": []}, [], []
    for j, eps in enumerate(eps_list):
        errs = [rep[j]["err"] for rep in per_rep]
        raw["err"].append(errs)
        m, se = _mean_se(errs)
        table.append({"eps": eps, "err": m, "err_se": se,
                      "mean_jumps": float(np.mean([rep[j]["jumps"] for rep in per_rep]))})
        for r, rep in enumerate(per_rep):
            pairs.append(rep[j]["pair"])
            labels.append(f"eps={eps},r={r}")
    lemma = lemma31_check(pairs, labels)
    errs = np.array([row["err"] for row in table])
    ses = np.array([row["err_se"] for row in table])
    verdicts = {
        "nonincreasing": _nonincreasing(errs, ses),
        "final_fraction": bool(errs[-1] <= fraction * errs[0]),
        "lemma31": lemma.passed,
    }
    metadata = {"pi": pi.tolist(), "lemma31_strict_witness": lemma.metadata["strict_witness"],
                "lemma31_mean_w2sq": lemma.metadata["mean_w2sq"],
                "lemma31_mean_bound": lemma.metadata["mean_coupling"],
                "elapsed_s": time.perf_counter() - started}
    config = {"eps_list": eps_list, "horizon": horizon, "step": step, "replicates": replicates,
              "n_particles": n_particles, "root_seed": root_seed, "fraction": fraction,
              "model": coeffs.name, "params": coeffs.params}
    return ExperimentReport("average", config, table, raw, {}, verdicts, metadata)


# ---------------------------------------------------------------------------
# empirical measure rates
# ---------------------------------------------------------------------------

FG14_LAWS = ("gaussian", "uniform", "point")


def fg14_law(name: str, d: int) -> Distribution:
    if name == "gaussian":
        return make_distribution("gaussian", {"mean": [0.0] * d, "std": 1.0})
    if name == "uniform":
        return make_distribution("uniform", {"low": [0.0] * d, "high": [1.0] * d})
    if name == "point":
        return make_distribution("point", {"loc": [0.0] * d})
    raise ValueError(f"unknown law {name!r}; expected one of {FG14_LAWS}")


def fg14_experiment(law: str, d: int, n_list, replicates: int, root_seed: int, *,
                    reference_size: int = 100_000, slope_threshold: Optional[float] = None,
                    workers: int = 1) -> ExperimentReport:
    """E[W_2^2(empirical_N, reference)] against N with a log-log fit.

    In one dimension the distance to the full reference cloud is exact via
    quantile functions.  In higher dimensions the reference is subsampled to N
    points and the exact assignment distance is used.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 3:
        raise ValueError("need at least 3 sample sizes")
    dist = fg14_law(law, d)
    if slope_threshold is None:
        slope_threshold = SLOPE_SLACK * guaranteed_exponent(d)
    started = time.perf_counter()
    reference = dist.sample(derive_stream(root_seed, ("fg14-reference",)).generator(), reference_size)

    def one(r):
        out = []
        for n in n_list:
            rng = derive_stream(root_seed, ("fg14", r, n)).generator()
            sample = dist.sample(rng, n)
            if d == 1:
                out.append(w2_1d_unequal(sample, reference) ** 2)
            else:
                ref = reference[np.sort(rng.choice(reference_size, n, replace=False))]
                out.append(w2_assignment(sample, ref, max_size=max(n_list)) ** 2)
        return out

    per_rep = np.array(_map(one, range(replicates), workers))
    table = []
    for j, n in enumerate(n_list):
        m, se = _mean_se(per_rep[:, j])
        table.append({"N": n, "w2sq": m, "w2sq_se": se})
    ys = per_rep.mean(axis=0)
    ses = np.array([row["w2sq_se"] for row in table])
    fit = _safe_fit(np.array(n_list, dtype=float), ys, ses)
    verdicts = {"slope": fit is None or fit.slope <= slope_threshold}
    metadata = {"method": "quantile" if d == 1 else "subsampled-assignment",
                "reference_bias_estimate": 0.0 if fit is None else float(fit.predict(reference_size)),
                "elapsed_s": time.perf_counter() - started}
    config = {"law": law, "d": d, "n_list": n_list, "replicates": replicates, "root_seed": root_seed,
              "reference_size": reference_size, "slope_threshold": slope_threshold}
    return ExperimentReport("fg14", config, table, {"w2sq": per_rep.T.tolist()}, {"w2sq": fit},
                            verdicts, metadata)


# ---------------------------------------------------------------------------
# mean oracle, plain simulation and the decoupling solver
# ---------------------------------------------------------------------------

def mean_check(means, coeffs: Coefficients, chain, initial: Distribution, times, n_particles: int,
               k: float = 3.0) -> dict:
    """Compare an ensemble-mean path with the chain-path ODE oracle.

    Returns the largest standardised deviation over ``times`` (after t = 0,
    where the oracle variance of a point-mass start vanishes) and whether it
    stays within ``k`` standard errors.
    """
    from .model import conditional_mean_oracle, conditional_mean_variance

    m0 = initial.mean
    var0 = initial.second_moment / coeffs.dim - float(np.mean(m0 ** 2))
    oracle = conditional_mean_oracle(coeffs, chain, m0, times)
    var = conditional_mean_variance(coeffs, chain, var0, times, n_particles)
    dev = np.abs(np.asarray(means) - oracle)
    se = np.sqrt(var)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, dev / se, np.where(dev > 1e-12, np.inf, 0.0))
    return {"max_z": float(z.max()), "within": bool(z.max() <= k), "max_abs_dev": float(dev.max())}


def simulate_experiment(coeffs: Coefficients, q: QMatrix, n_particles: int, horizon: float, step: float,
                        root_seed: int, *, initial: Distribution, time_scale: float = 1.0,
                        initial_state: int = 0, workers: int = 1):
    """One particle-system run; returns the ensemble and a report on its mean path."""
    started = time.perf_counter()
    ens = run_particle_system(coeffs, q, n_particles, horizon, step, root_seed, time_scale,
                              initial=initial, initial_state=initial_state, workers=workers)
    means = ens.mean_path()
    table = [{"time": float(t), **{f"mean_{c}": float(means[j, c]) for c in range(ens.dim)}}
             for j, t in enumerate(ens.times)]
    verdicts = {"finite": bool(np.isfinite(ens.paths).all())}
    metadata = {"chain_jumps": len(ens.chain), "elapsed_s": time.perf_counter() - started}
    if coeffs.name == "switching-mf-ou":
        check = mean_check(means, coeffs, ens.chain, initial, ens.times, n_particles)
        verdicts["mean_oracle"] = check["within"]
        metadata.update(check)
    config = {"n_particles": n_particles, "horizon": horizon, "step": step, "root_seed": root_seed,
              "time_scale": time_scale, "model": coeffs.name, "params": coeffs.params}
    return ens, ExperimentReport("simulate", config, table, {}, {}, verdicts, metadata)


def picard_experiment(coeffs: Coefficients, q: QMatrix, n_particles: int, horizon: float, step: float,
                      root_seed: int, *, initial: Distribution, tol: float = 1e-2, max_iter: int = 15,
                      time_scale: float = 1.0, initial_state: int = 0, ratio_allowance: float = 0.1,
                      workers: int = 1):
    """Run the decoupling iteration on one sampled chain path and grade it.

    Verdicts: convergence below ``tol`` within ``max_iter`` iterations,
    successive distance ratios below ``1 + ratio_allowance`` from the third
    distance on, and (for the switching OU model) the fixed-point mean within
    3 SE of the chain-path oracle.
    """
    from .simulate import picard_solve

    started = time.perf_counter()
    chain = sample_path(q, initial_state, horizon, time_scale, derive_stream(root_seed, ("omega0", 0)))
    result = picard_solve(coeffs, chain, n_particles, horizon, step, root_seed, tol, max_iter,
                          initial=initial, workers=workers)
    ratios = result.ratios()
    tail = ratios[2:] if len(ratios) > 2 else np.array([])
    table = [{"iteration": n, "distance": float(d)} for n, d in enumerate(result.distances)]
    verdicts = {"converged": result.iterations <= max_iter,
                "contraction": bool(np.all(tail < 1.0 + ratio_allowance))}
    metadata = {"iterations": result.iterations, "ratios": ratios.tolist(), "chain_jumps": len(chain),
                "elapsed_s": time.perf_counter() - started}
    if coeffs.name == "switching-mf-ou":
        check = mean_check(result.flow.means(), coeffs, chain, initial, result.flow.times, n_particles)
        verdicts["mean_oracle"] = check["within"]
        metadata.update(check)
    config = {"n_particles": n_particles, "horizon": horizon, "step": step, "root_seed": root_seed,
              "tol": tol, "max_iter": max_iter, "time_scale": time_scale,
              "model": coeffs.name, "params": coeffs.params}
    return result, ExperimentReport("picard", config, table, {}, {}, verdicts, metadata)
