"""Finite-state continuous-time Markov chains driving the regime switching.

States are indexed ``0 .. m-1``.  The chain with time scale ``eps`` has
generator ``Q / eps``; it is sampled exactly by Gillespie's algorithm and its
semigroup is evaluated by uniformization.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import poisson

from .errors import LengthMismatch, NegativeRate, NonConservative, Reducible, SolveFailed
from .noise import RandomSource, as_generator

UNIFORMIZATION_TAIL = 1e-14


@dataclass(frozen=True, eq=False)
class QMatrix:
    rates: np.ndarray

    @property
    def size(self) -> int:
        return self.rates.shape[0]

    @property
    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.rates)

    def scaled(self, eps: float) -> "QMatrix":
        return QMatrix(self.rates / eps)

    def __eq__(self, other):
        return isinstance(other, QMatrix) and np.array_equal(self.rates, other.rates)

    def tolist(self):
        return self.rates.tolist()


def _reachable(adj: np.ndarray, start: int = 0) -> np.ndarray:
    seen = np.zeros(len(adj), dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i] & ~seen):
            seen[j] = True
            queue.append(j)
    return seen


def is_irreducible(rates) -> bool:
    """Strong connectivity of the positive-rate digraph (forward and reverse BFS)."""
    rates = np.asarray(rates, dtype=float)
    adj = rates > 0
    np.fill_diagonal(adj, False)
    return bool(_reachable(adj).all() and _reachable(adj.T).all())


def build_qmatrix(rates, *, offdiagonal: bool = False, atol: float = 1e-9) -> QMatrix:
    """Validate a transition rate matrix.

    With ``offdiagonal=True`` (or a diagonal of NaNs) the diagonal is ignored
    and recomputed as minus the off-diagonal row sums.  A 1x1 matrix is accepted
    as the trivial single-regime chain.
    """
    q = np.array(rates, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValueError(f"rate matrix must be square, got shape {q.shape}")
    m = q.shape[0]
    diag = np.diag(q).copy()
    if np.isnan(diag).all():
        offdiagonal = True
    off = q.copy()
    np.fill_diagonal(off, 0.0)
    if not np.isfinite(off).all():
        raise ValueError("rate matrix has non-finite off-diagonal entries")
    if (off < 0).any():
        i, j = np.argwhere(off < 0)[0]
        raise NegativeRate(f"negative rate q[{i},{j}] = {off[i, j]}")
    exit_rates = off.sum(axis=1)
    if not offdiagonal:
        bad = np.abs(diag + exit_rates) > atol
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NonConservative(f"row {i} sums to {diag[i] + exit_rates[i]:.3g}, not 0")
    np.fill_diagonal(off, -exit_rates)
    if m > 1 and not is_irreducible(off):
        raise Reducible("positive-rate graph is not strongly connected")
    off.setflags(write=False)
    return QMatrix(off)


def invariant_measure(q: QMatrix) -> np.ndarray:
    """Solve pi Q = 0, sum(pi) = 1 as an overdetermined dense system."""
    m = q.size
    a = np.vstack([q.rates.T, np.ones((1, m))])
    rhs = np.zeros(m + 1)
    rhs[-1] = 1.0
    pi, _, rank, _ = np.linalg.lstsq(a, rhs, rcond=None)
    if rank < m:
        raise SolveFailed(f"invariant measure system has rank {rank} < {m}")
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    if np.abs(pi @ q.rates).max() > 1e-10 * max(1.0, np.abs(q.rates).max()):
        raise SolveFailed("invariant measure residual too large")
    return pi


def transition_matrix(q: QMatrix, t: float) -> np.ndarray:
    """P_t = exp(tQ) by uniformization.

    Sums Poisson(lam*t) weighted powers of the jump matrix I + Q/lam, stopping
    once the remaining Poisson tail mass is below ``UNIFORMIZATION_TAIL``.
    """
    if t < 0:
        raise ValueError(f"time must be >= 0, got {t}")
    m = q.size
    lam = float(q.exit_rates.max())
    if t == 0 or lam == 0:
        return np.eye(m)
    mu = lam * t
    jump = np.eye(m) + q.rates / lam
    kmax = int(poisson.isf(UNIFORMIZATION_TAIL, mu)) + 1
    ks = np.arange(kmax + 1)
    log_w = -mu + ks * math.log(mu) - gammaln(ks + 1)
    weights = np.exp(log_w)
    out = np.zeros((m, m))
    power = np.eye(m)
    for k in range(kmax + 1):
        if weights[k] > 0:
            out += weights[k] * power
        power = power @ jump
    return out


def tv_distance(p, q) -> float:
    """Total variation with the factor-2 convention: sum_i |p_i - q_i|."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise LengthMismatch(f"probability vectors of lengths {p.shape} and {q.shape}")
    return float(np.abs(p - q).sum())


@dataclass
class ErgodicProfile:
    times: np.ndarray
    tv: np.ndarray  # (states, times)
    decay_rate: float
    pi: np.ndarray

    def rows(self):
        for j, t in enumerate(self.times):
            for i in range(self.tv.shape[0]):
                yield float(t), i, float(self.tv[i, j])


def ergodic_profile(q: QMatrix, grid) -> ErgodicProfile:
    """Tabulate ||P_t(i, .) - pi||_var and fit an exponential decay rate."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 3 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be an increasing list of at least 3 times")
    pi = invariant_measure(q)
    tv = np.empty((q.size, len(grid)))
    for j, t in enumerate(grid):
        p = transition_matrix(q, t)
        tv[:, j] = np.abs(p - pi).sum(axis=1)
    worst = tv.max(axis=0)
    use = worst > 1e-12
    if use.sum() >= 2:
        slope = np.polyfit(grid[use], np.log(worst[use]), 1)[0]
        rate = -float(slope)
    else:
        rate = math.inf
    return ErgodicProfile(grid, tv, rate, pi)


@dataclass(frozen=True, eq=False)
class ChainPath:
    """Right-continuous piecewise constant path on [0, horizon]."""

    initial: int
    jump_times: np.ndarray
    states: np.ndarray
    horizon: float
    time_scale: float = 1.0

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        st = np.asarray(self.states, dtype=int)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "states", st)
        if jt.shape != st.shape:
            raise LengthMismatch("jump times and post-jump states differ in length")
        if len(jt) and (np.any(np.diff(jt) <= 0) or jt[0] <= 0 or jt[-1] > self.horizon):
            raise ValueError("jump times must be strictly increasing inside (0, horizon]")
        prev = np.concatenate([[self.initial], st[:-1]])
        if np.any(prev == st):
            raise ValueError("consecutive states of a chain path must differ")

    @classmethod
    def constant(cls, state: int, horizon: float) -> "ChainPath":
        return cls(int(state), np.zeros(0), np.zeros(0, dtype=int), float(horizon))

    def __len__(self):
        return len(self.jump_times)

    def __eq__(self, other):
        return (isinstance(other, ChainPath) and self.initial == other.initial
                and self.horizon == other.horizon
                and np.array_equal(self.jump_times, other.jump_times)
                and np.array_equal(self.states, other.states))

    def state_at(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right")
        seq = np.concatenate([[self.initial], self.states])
        out = seq[idx]
        return int(out) if out.ndim == 0 else out

    def occupation(self, n_states: int, upto: float | None = None) -> np.ndarray:
        """Time spent in each state on [0, upto]."""
        upto = self.horizon if upto is None else upto
        edges = np.concatenate([[0.0], self.jump_times[self.jump_times < upto], [upto]])
        seq = np.concatenate([[self.initial], self.states])[: len(edges) - 1]
        return np.bincount(seq, weights=np.diff(edges), minlength=n_states)


def sample_path(q: QMatrix, initial: int, horizon: float, eps: float, source: RandomSource) -> ChainPath:
    """Gillespie simulation of the chain with generator Q/eps up to ``horizon``.

    Each holding time is drawn as a unit exponential scaled by eps/|q_ii| and
    each destination by one uniform, so paths drawn from the same stream for
    different eps are exact time-rescalings of each other.
    """
    if not horizon > 0 or not eps > 0:
        raise ValueError("horizon and time scale must be positive")
    rng = as_generator(source)
    rates = q.rates
    exit_rates = q.exit_rates
    cum = []
    for i in range(q.size):
        row = rates[i].copy()
        row[i] = 0.0
        cum.append(np.cumsum(row) / exit_rates[i] if exit_rates[i] > 0 else None)
    times, states = [], []
    t, state = 0.0, int(initial)
    while True:
        if exit_rates[state] == 0:
            break
        t += rng.standard_exponential() * eps / exit_rates[state]
        if t >= horizon:
            break
        u = rng.random()
        nxt = int(np.searchsorted(cum[state], u, side="right"))
        if nxt >= q.size:
            # u rounded past the last cumulative weight
            nxt = int(np.flatnonzero(np.diff(np.concatenate([[0.0], cum[state]])) > 0)[-1])
        times.append(t)
        states.append(nxt)
        state = nxt
    return ChainPath(int(initial), np.array(times), np.array(states, dtype=int), float(horizon), float(eps))
