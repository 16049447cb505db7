"""Euler scheme for mean-field jump diffusions with regime switching.

The time grid is the base grid ``k*h`` refined at every switching time of the
chain, so no Euler substep straddles a switch and coefficients are always
frozen at the left endpoint of a substep (the ``t-`` convention for jumps).

Noise is drawn per particle from labelled streams (see :mod:`noise`), once per
run, and shared between coupled runs:

* base-grid Brownian increments from ``("omega1", k)``,
* Brownian-bridge normals from ``("omega1-bridge", k)`` that split a base
  increment at switching times (the base increments are left unchanged, so
  runs on differently refined grids still see the same Brownian path on the
  base grid),
* a compound Poisson path on the whole horizon from ``("omega1-jump", k)``,
* the initial point from ``("omega1-init", k)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ctmc import ChainPath, QMatrix, sample_path
from .errors import GNotStateFree, GridMismatch, NoConvergence, NonFiniteState
from .io import write_csv
from .measures import MAX_ASSIGNMENT_SIZE, EmpiricalMeasure, w2
from .model import AveragedCoefficients, Coefficients, MeasureView
from .noise import Distribution, ParticleNoise, derive_stream, draw_particle_noise

DEFAULT_AUX_FACTOR = 4


@dataclass
class TimeGrid:
    horizon: float
    step: float
    base: np.ndarray        # base grid points, length n+1
    times: np.ndarray       # substep boundaries, length S+1
    state: np.ndarray       # regime on each substep
    base_step: np.ndarray   # base step containing each substep
    n_splits: int

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def base_steps(self) -> np.ndarray:
        return np.diff(self.base)

    @property
    def record_at(self) -> np.ndarray:
        """Substep boundary index of each base grid point."""
        return np.searchsorted(self.times, self.base)


def base_grid(horizon: float, step: float) -> np.ndarray:
    if not horizon > 0 or not step > 0:
        raise ValueError("horizon and step must be positive")
    n = max(1, int(math.ceil(horizon / step - 1e-9)))
    pts = np.arange(n + 1) * step
    pts[-1] = horizon
    return pts


def build_time_grid(horizon: float, step: float, chain: Optional[ChainPath] = None,
                    split_times=None) -> TimeGrid:
    """Merge the base grid with chain switching times (and optional extra splits)."""
    base = base_grid(horizon, step)
    extra = [] if chain is None else [chain.jump_times]
    if split_times is not None:
        extra.append(np.asarray(split_times, dtype=float))
    cuts = np.concatenate(extra) if extra else np.zeros(0)
    cuts = cuts[(cuts > 0) & (cuts < horizon)]
    cuts = np.setdiff1d(cuts, base)
    times = np.union1d(base, cuts)
    left = times[:-1]
    state = np.zeros(len(left), dtype=int) if chain is None else np.asarray(chain.state_at(left), dtype=int)
    base_step = np.searchsorted(base, left, side="right") - 1
    return TimeGrid(float(horizon), float(step), base, times, state, base_step, len(cuts))


# ---------------------------------------------------------------------------
# noise assembly
# ---------------------------------------------------------------------------

def _merge_noise(parts) -> ParticleNoise:
    offsets = np.cumsum([0] + [len(p.x0) for p in parts[:-1]])
    return ParticleNoise(
        np.concatenate([p.x0 for p in parts]),
        np.concatenate([p.dW for p in parts]),
        np.concatenate([p.bridge for p in parts]),
        np.concatenate([p.jump_particle + o for p, o in zip(parts, offsets)]),
        np.concatenate([p.jump_times for p in parts]),
        np.concatenate([p.jump_marks for p in parts]),
        np.concatenate([p.indices for p in parts]),
    )


def draw_noise(root: int, n_particles: int, grid: TimeGrid, coeffs: Coefficients,
               initial: Distribution, workers: int = 1) -> ParticleNoise:
    """Noise for particles ``0 .. n_particles-1``; identical for any ``workers``."""
    jumps = coeffs.jumps if coeffs.has_jumps else None
    args = (grid.base_steps, coeffs.dim, initial, jumps, grid.horizon, grid.n_splits)
    if workers <= 1 or n_particles < 2 * workers:
        return draw_particle_noise(root, range(n_particles), *args)
    chunks = np.array_split(np.arange(n_particles), workers)
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(lambda idx: draw_particle_noise(root, idx, *args), chunks))
    return _merge_noise(parts)


@dataclass
class _SubstepNoise:
    dW: np.ndarray           # (S, P, d)
    jump_offsets: np.ndarray  # (S+1,)
    jump_particle: np.ndarray
    jump_marks: np.ndarray


def _refine(noise: ParticleNoise, grid: TimeGrid) -> _SubstepNoise:
    """Split base increments over substeps by sequential Brownian bridges."""
    P, _, d = noise.dW.shape
    S = len(grid.times) - 1
    dW = np.empty((S, P, d))
    counts = np.bincount(grid.base_step, minlength=len(grid.base) - 1)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    single = counts == 1
    dW[first[single]] = np.transpose(noise.dW[:, single, :], (1, 0, 2))
    dt = grid.dt
    used = 0
    for j in np.flatnonzero(~single):
        rest = noise.dW[:, j, :].copy()
        tau = float(grid.base[j + 1] - grid.base[j])
        for s in range(first[j], first[j] + counts[j] - 1):
            delta = float(dt[s])
            xi = noise.bridge[:, used, :]
            used += 1
            inc = (delta / tau) * rest + math.sqrt(max(delta * (tau - delta) / tau, 0.0)) * xi
            dW[s] = inc
            rest = rest - inc
            tau -= delta
        dW[first[j] + counts[j] - 1] = rest
    return _with_jumps(dW, noise, grid)


def _with_jumps(dW, noise: ParticleNoise, grid: TimeGrid) -> _SubstepNoise:
    """Bucket the jumps of ``noise`` into the substeps of ``grid``."""
    S = len(grid.times) - 1
    sub = np.searchsorted(grid.times, noise.jump_times, side="right") - 1
    sub = np.clip(sub, 0, S - 1)
    order = np.lexsort((noise.jump_times, noise.jump_particle, sub))
    sub = sub[order]
    offsets = np.searchsorted(sub, np.arange(S + 1), side="left")
    return _SubstepNoise(dW, offsets, noise.jump_particle[order], noise.jump_marks[order])


# ---------------------------------------------------------------------------
# the scheme
# ---------------------------------------------------------------------------

def _apply_step(coeffs: Coefficients, x, mu, state, dt, dw, jump_rows=None, jump_marks=None):
    drift = coeffs.drift(x, mu, state)
    sig = coeffs.diffusion(x, mu, state)
    out = x + drift * dt + np.einsum("pij,pj->pi", sig, dw)
    if coeffs.has_jumps:
        out = out - dt * coeffs.jump_compensator(x, mu, state)
        if jump_rows is not None and len(jump_rows):
            g = coeffs.jump(x[jump_rows], mu, state, jump_marks)
            np.add.at(out, jump_rows, g)
    return out


def euler_step(x, mu, state: int, coeffs: Coefficients, dw, dt: float, marks=None):
    """One explicit Euler step for a single particle (or rows of particles).

    ``marks`` are the jump marks that fall in the step for a single particle.
    The compensator is applied whether or not any jump fires.
    """
    if not dt > 0:
        raise ValueError("substep must be positive")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    dws = np.atleast_2d(np.asarray(dw, dtype=float))
    if not isinstance(mu, MeasureView):
        mu = MeasureView(mu.points if isinstance(mu, EmpiricalMeasure) else np.atleast_2d(mu))
    rows = marks_arr = None
    if marks is not None and len(marks):
        if not single:
            raise ValueError("jump marks are only accepted for a single particle")
        marks_arr = np.atleast_2d(np.asarray(marks, dtype=float))
        rows = np.zeros(len(marks_arr), dtype=int)
    out = _apply_step(coeffs, xs, mu, state, dt, dws, rows, marks_arr)
    if not np.isfinite(out).all():
        raise NonFiniteState("Euler step produced a non-finite state")
    return out[0] if single else out


def _integrate(coeffs: Coefficients, x0, grid: TimeGrid, noise: _SubstepNoise,
               measure_at: Callable, record_all: bool = False):
    x = np.array(x0, dtype=float)
    P, d = x.shape
    record_at = grid.record_at
    paths = np.empty((P, len(grid.base), d))
    paths[:, 0] = x
    every = np.empty((len(grid.times), P, d)) if record_all else None
    if record_all:
        every[0] = x
    dt = grid.dt
    slot = 1
    for s in range(len(dt)):
        mu = measure_at(s, x)
        lo, hi = noise.jump_offsets[s], noise.jump_offsets[s + 1]
        rows = noise.jump_particle[lo:hi] if hi > lo else None
        x = _apply_step(coeffs, x, mu, int(grid.state[s]), dt[s], noise.dW[s],
                        rows, noise.jump_marks[lo:hi] if hi > lo else None)
        if not np.isfinite(x).all():
            bad = np.argwhere(~np.isfinite(x))[0]
            raise NonFiniteState(
                f"particle {bad[0]} became non-finite at t={grid.times[s + 1]:.6g}",
                particle=int(bad[0]), time=float(grid.times[s + 1]), index=int(bad[1]))
        if record_all:
            every[s + 1] = x
        if slot < len(record_at) and record_at[slot] == s + 1:
            paths[:, slot] = x
            slot += 1
    return paths, every


def _own_measure(s, x):
    return MeasureView(x)


@dataclass
class ParticleEnsemble:
    times: np.ndarray
    paths: np.ndarray                 # (N, len(times), d)
    chain: Optional[ChainPath]
    labels: np.ndarray
    root: int
    grid: TimeGrid = field(repr=False)

    @property
    def size(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    def cloud(self, j: int = -1) -> np.ndarray:
        return self.paths[:, j, :]

    def empirical(self, j: int = -1) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.cloud(j))

    def mean_path(self) -> np.ndarray:
        return self.paths.mean(axis=0)

    def states(self) -> np.ndarray:
        if self.chain is None:
            return np.zeros(len(self.times), dtype=int)
        return np.asarray(self.chain.state_at(self.times), dtype=int)

    def csv_rows(self):
        states = self.states()
        for j, t in enumerate(self.times):
            for k in range(self.size):
                yield (float(t), int(self.labels[k]), *self.paths[k, j].tolist(), int(states[j]))

    def write_csv(self, path):
        header = ["time", "particle"] + [f"coord_{c}" for c in range(self.dim)] + ["state"]
        return write_csv(path, header, self.csv_rows())


def _chain_for(q: QMatrix, initial_state: int, horizon: float, time_scale: float, root: int,
               chain: Optional[ChainPath]) -> ChainPath:
    if chain is not None:
        return chain
    return sample_path(q, initial_state, horizon, time_scale, derive_stream(root, ("omega0", 0)))


def run_particle_system(coeffs: Coefficients, q: QMatrix, n_particles: int, horizon: float, step: float,
                        root_seed: int, time_scale: float = 1.0, *, initial: Distribution,
                        initial_state: int = 0, chain: Optional[ChainPath] = None,
                        workers: int = 1) -> ParticleEnsemble:
    """Simulate the N-particle system where each particle sees the ensemble's own
    empirical measure and all particles share one chain path."""
    if n_particles < 1:
        raise ValueError("need at least one particle")
    chain = _chain_for(q, initial_state, horizon, time_scale, root_seed, chain)
    grid = build_time_grid(horizon, step, chain)
    noise = draw_noise(root_seed, n_particles, grid, coeffs, initial, workers)
    paths, _ = _integrate(coeffs, noise.x0, grid, _refine(noise, grid), _own_measure)
    return ParticleEnsemble(grid.base, paths, chain, np.arange(n_particles), root_seed, grid)


def run_auxiliary_coupled(coeffs: Coefficients, q: QMatrix, n_particles: int, horizon: float, step: float,
                          root_seed: int, time_scale: float = 1.0, *, n_aux: Optional[int] = None,
                          initial: Distribution, initial_state: int = 0,
                          chain: Optional[ChainPath] = None, workers: int = 1):
    """System of ``n_particles`` and synchronously coupled auxiliary ensemble.

    Auxiliary particle k < N reuses exactly the noise and initial value of
    system particle k; particles N..M-1 use fresh streams.  The auxiliary
    particles see the size-M auxiliary empirical measure as their proxy for
    the conditional law given the chain.
    """
    n_aux = DEFAULT_AUX_FACTOR * n_particles if n_aux is None else n_aux
    if n_aux < n_particles:
        raise ValueError("auxiliary ensemble must be at least as large as the system")
    chain = _chain_for(q, initial_state, horizon, time_scale, root_seed, chain)
    grid = build_time_grid(horizon, step, chain)
    noise = draw_noise(root_seed, n_aux, grid, coeffs, initial, workers)
    sys_noise = noise.take(n_particles)
    sys_paths, _ = _integrate(coeffs, sys_noise.x0, grid, _refine(sys_noise, grid), _own_measure)
    aux_paths, _ = _integrate(coeffs, noise.x0, grid, _refine(noise, grid), _own_measure)
    system = ParticleEnsemble(grid.base, sys_paths, chain, np.arange(n_particles), root_seed, grid)
    auxiliary = ParticleEnsemble(grid.base, aux_paths, chain, np.arange(n_aux), root_seed, grid)
    return system, auxiliary


def check_same_chain(a: ParticleEnsemble, b: ParticleEnsemble):
    if a.chain != b.chain or not np.array_equal(a.times, b.times):
        raise GridMismatch("ensembles were simulated on different chain paths or grids")


def run_averaged(averaged, horizon: float, step: float, root_seed: int, n_particles: int, *,
                 initial: Distribution, split_times=None, workers: int = 1) -> ParticleEnsemble:
    """Simulate the averaged McKean-Vlasov system (no regime switching).

    Streams are labelled exactly as in :func:`run_particle_system`, so the
    result is synchronously coupled with a switching run under the same root.
    Passing that run's switching times as ``split_times`` puts both on the
    same refined grid.
    """
    if isinstance(averaged, AveragedCoefficients):
        coeffs = averaged.as_coefficients()
    else:
        coeffs = averaged
        if coeffs.has_jumps and not coeffs.g_state_free:
            raise GNotStateFree("averaged system needs g independent of (x, mu)")
    grid = build_time_grid(horizon, step, None, split_times)
    noise = draw_noise(root_seed, n_particles, grid, coeffs, initial, workers)
    paths, _ = _integrate(coeffs, noise.x0, grid, _refine(noise, grid), _own_measure)
    return ParticleEnsemble(grid.base, paths, None, np.arange(n_particles), root_seed, grid)


# ---------------------------------------------------------------------------
# decoupling (Picard) iteration
# ---------------------------------------------------------------------------

@dataclass
class MeasureFlow:
    times: np.ndarray
    clouds: np.ndarray   # (len(times), M, d)

    @property
    def size(self) -> int:
        return self.clouds.shape[1]

    def at(self, j: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.clouds[j])

    def means(self) -> np.ndarray:
        return self.clouds.mean(axis=1)

    def csv_rows(self):
        for j, t in enumerate(self.times):
            for k in range(self.size):
                yield (float(t), k, *self.clouds[j, k].tolist())


def flow_distance(a: MeasureFlow, b: MeasureFlow, max_size: int = MAX_ASSIGNMENT_SIZE) -> float:
    """sup over stored times of W_2 between the two flows."""
    if a.clouds.shape != b.clouds.shape:
        raise GridMismatch("flows have different shapes")
    return max(w2(x, y, max_size=max_size) for x, y in zip(a.clouds, b.clouds))


@dataclass
class PicardResult:
    flow: MeasureFlow
    distances: list
    iterations: int
    grid: TimeGrid = field(repr=False)
    chain: ChainPath = field(repr=False)

    def ratios(self) -> np.ndarray:
        d = np.asarray(self.distances)
        with np.errstate(divide="ignore", invalid="ignore"):
            return d[1:] / d[:-1]


def picard_solve(coeffs: Coefficients, chain: ChainPath, n_particles: int, horizon: float, step: float,
                 root_seed: int, tol: float, max_iter: int, *, initial: Distribution,
                 initial_flow: Optional[MeasureFlow] = None, workers: int = 1) -> PicardResult:
    """Fixed point of the decoupling map on one chain path.

    Given a flow, the particles solve the SDE with that flow frozen in the
    coefficients; the new flow is their empirical flow.  Every iteration reuses
    the same per-particle noise, so successive iterates are pathwise
    comparable.  ``distances[n]`` is the sup-in-time W_2 distance between
    iterates n and n+1; iterate n is accepted once it is below ``tol`` and
    ``iterations`` is that n.  The initial guess (iterate 0) is the constant
    flow at the initial cloud.
    """
    if coeffs.has_jumps and not coeffs.g_state_free:
        raise GNotStateFree("the decoupling solver covers jump coefficients free of (x, mu)")
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    if coeffs.dim > 1 and n_particles > MAX_ASSIGNMENT_SIZE:
        raise ValueError(f"exact transport in d > 1 caps the ensemble at {MAX_ASSIGNMENT_SIZE}")
    grid = build_time_grid(horizon, step, chain)
    noise = draw_noise(root_seed, n_particles, grid, coeffs, initial, workers)
    sub = _refine(noise, grid)
    if initial_flow is None:
        clouds = np.broadcast_to(noise.x0, (len(grid.times),) + noise.x0.shape).copy()
        flow = MeasureFlow(grid.times, clouds)
    else:
        flow = initial_flow
    distances = []
    for n in range(max_iter + 1):
        frozen = flow.clouds
        _, every = _integrate(coeffs, noise.x0, grid, sub,
                              lambda s, x: MeasureView(frozen[s]), record_all=True)
        new = MeasureFlow(grid.times, every)
        distances.append(flow_distance(flow, new))
        flow = new
        if distances[-1] < tol:
            return PicardResult(flow, distances, n, grid, chain)
    raise NoConvergence(f"no convergence below {tol} in {max_iter} iterations", distances)


# ---------------------------------------------------------------------------
# strong convergence in the step size
# ---------------------------------------------------------------------------

def strong_error_study(coeffs: Coefficients, chain: ChainPath, n_particles: int, horizon: float, steps,
                       root_seed: int, *, initial: Distribution, ref_factor: int = 16) -> dict:
    """Strong error of the scheme against a fine reference on one Brownian path.

    The reference uses step ``min(steps) / ref_factor``.  Coarse increments are
    sums of the reference substep increments, so every run sees the same
    Brownian and Poisson paths.  Returns, per step, the root mean square over
    particles of the largest gap on the coarse base grid.
    """
    steps = sorted(float(h) for h in steps)
    h_ref = steps[0] / ref_factor
    fine = build_time_grid(horizon, h_ref, chain)
    n_fine = len(fine.base) - 1
    noise = draw_noise(root_seed, n_particles, fine, coeffs, initial)
    sub = _refine(noise, fine)
    ref, _ = _integrate(coeffs, noise.x0, fine, sub, _own_measure)
    errors = []
    for h in steps:
        factor = int(round(h / h_ref))
        if abs(factor * h_ref - h) > 1e-12 * h or n_fine % factor:
            raise ValueError(f"step {h} is not a multiple of the reference step dividing the horizon")
        grid = build_time_grid(horizon, h, chain)
        starts = np.searchsorted(fine.times, grid.times[:-1])
        coarse_dw = np.add.reduceat(sub.dW, starts, axis=0)
        paths, _ = _integrate(coeffs, noise.x0, grid, _with_jumps(coarse_dw, noise, grid), _own_measure)
        gap = paths - ref[:, ::factor]
        sup = np.max(np.einsum("ntd,ntd->nt", gap, gap), axis=1)
        errors.append(float(np.sqrt(sup.mean())))
    return {"steps": steps, "errors": errors, "reference_step": h_ref}
