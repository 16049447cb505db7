"""Coefficient triples (b, sigma, g) with measure dependence through functionals.

Coefficients are vectorised over particles: ``drift(x, mu, i)`` takes an
``(n, d)`` array of positions, a :class:`MeasureView` and a regime index and
returns ``(n, d)``; ``diffusion`` returns ``(n, d, d)``; ``jump(x, mu, i, z)``
takes positions and marks row by row.  ``compensator(x, mu, i)`` is the
integral of the jump coefficient against the intensity measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ctmc import ChainPath
from .errors import EnvelopeViolated, GNotStateFree, SchemaError, StateMismatch, UnknownModel
from .measures import w2_assignment
from .noise import Envelope, JumpSpec, RandomSource, as_generator


class MeasureView:
    """Read-only functionals of an empirical measure."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        self._mean = None
        self._m2 = None

    @property
    def size(self):
        return self.points.shape[0]

    def mean(self) -> np.ndarray:
        if self._mean is None:
            self._mean = self.points.mean(axis=0)
        return self._mean

    def second_moment(self) -> float:
        if self._m2 is None:
            self._m2 = float(np.einsum("ij,ij->", self.points, self.points) / self.size)
        return self._m2

    def kernel_mean(self, phi, x) -> np.ndarray:
        """E_mu[phi(y, x)] for each query row of ``x``; ``phi`` maps (n,d),(n,d) -> (n,...)."""
        x = np.atleast_2d(x)
        return np.stack([np.mean(phi(self.points, np.broadcast_to(q, self.points.shape)), axis=0)
                         for q in x])


@dataclass
class Coefficients:
    dim: int
    n_states: int
    drift: Callable
    diffusion: Callable
    jump: Optional[Callable] = None
    compensator: Optional[Callable] = None
    jumps: Optional[JumpSpec] = None
    g_state_free: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def envelope(self) -> Optional[Envelope]:
        return None if self.jumps is None else self.jumps.envelope

    @property
    def has_jumps(self) -> bool:
        return self.jumps is not None and self.jump is not None

    def jump_compensator(self, x, mu, i) -> np.ndarray:
        """Integral of g(x, mu, i, .) against lambda, closed form when declared."""
        if not self.has_jumps:
            return np.zeros_like(x)
        if self.compensator is not None:
            return self.compensator(x, mu, i)
        nodes, weights = self.jumps.marks.quadrature()
        out = np.zeros_like(x)
        for z, w in zip(nodes, weights):
            out += w * self.jump(x, mu, i, np.broadcast_to(z, x.shape))
        return self.jumps.rate * out

    def jump_l2(self, x, mu, i, y=None, nu=None) -> np.ndarray:
        """Integral of |g(x,mu,i,z) - g(y,nu,i,z)|^2 (or |g(x,mu,i,z)|^2) against lambda."""
        if not self.has_jumps:
            return np.zeros(len(x))
        nodes, weights = self.jumps.marks.quadrature()
        out = np.zeros(len(x))
        for z, w in zip(nodes, weights):
            zz = np.broadcast_to(z, x.shape)
            g = self.jump(x, mu, i, zz)
            if y is not None:
                g = g - self.jump(y, nu, i, zz)
            out += w * np.einsum("ij,ij->i", g, g)
        return self.jumps.rate * out


class AveragedCoefficients:
    """pi-weighted sums of state-indexed coefficients (finite sums, exact)."""

    def __init__(self, coeffs: Coefficients, pi):
        pi = np.asarray(pi, dtype=float)
        if pi.shape != (coeffs.n_states,):
            raise StateMismatch(f"pi has length {pi.size}, model has {coeffs.n_states} states")
        self.base = coeffs
        self.pi = pi
        self.dim = coeffs.dim

    def _states(self):
        return [(i, w) for i, w in enumerate(self.pi)]

    def drift(self, x, mu):
        return sum(self.base.drift(x, mu, i) * w for i, w in self._states())

    def diffusion(self, x, mu):
        return sum(self.base.diffusion(x, mu, i) * w for i, w in self._states())

    def jump(self, z, x=None, mu=None):
        if not self.base.g_state_free:
            raise GNotStateFree("averaged jump coefficient needs g independent of (x, mu)")
        z = np.atleast_2d(z)
        x = np.zeros_like(z) if x is None else x
        return sum(self.base.jump(x, mu, i, z) * w for i, w in self._states())

    def compensator(self, x, mu):
        return sum(self.base.jump_compensator(x, mu, i) * w for i, w in self._states())

    def as_coefficients(self) -> Coefficients:
        """Single-regime :class:`Coefficients` usable by the simulator."""
        base = self.base
        jump = None
        if base.has_jumps:
            if not base.g_state_free:
                raise GNotStateFree("averaged system needs g independent of (x, mu)")
            jump = lambda x, mu, i, z: self.jump(z, x, mu)  # noqa: E731
        return Coefficients(
            dim=self.dim, n_states=1,
            drift=lambda x, mu, i: self.drift(x, mu),
            diffusion=lambda x, mu, i: self.diffusion(x, mu),
            jump=jump,
            compensator=(lambda x, mu, i: self.compensator(x, mu)) if jump is not None else None,
            jumps=base.jumps if jump is not None else None,
            g_state_free=base.g_state_free,
            name=f"averaged({base.name})",
            params={"pi": self.pi.tolist(), **base.params},
        )


def average(coeffs: Coefficients, pi) -> AveragedCoefficients:
    return AveragedCoefficients(coeffs, pi)


# ---------------------------------------------------------------------------
# assumption probing
# ---------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    k1: float
    k2: float
    envelope_ok: Optional[bool]
    g_state_free_ok: Optional[bool]
    probes: int
    k1_witness: dict = field(default_factory=dict)
    k2_witness: dict = field(default_factory=dict)
    k1_trace: np.ndarray = field(default=None, repr=False)
    k2_trace: np.ndarray = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return self.envelope_ok is not False and self.g_state_free_ok is not False

    def to_dict(self):
        return {
            "K1": self.k1, "K2": self.k2, "envelope_ok": self.envelope_ok,
            "g_state_free_ok": self.g_state_free_ok, "probes": self.probes,
            "K1_witness": _jsonable(self.k1_witness), "K2_witness": _jsonable(self.k2_witness),
        }


def _jsonable(d):
    return {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def _ball(rng, radius, d):
    v = rng.standard_normal(d)
    v /= max(np.linalg.norm(v), 1e-300)
    return radius * rng.random() ** (1.0 / d) * v


def validate_assumptions(coeffs: Coefficients, probes: int, radius: float, source: RandomSource,
                         cloud_size: int = 8) -> AssumptionReport:
    """Monte Carlo lower estimates of the Lipschitz and growth constants.

    Every probe draws a regime, two points in the ball of ``radius`` and two
    random clouds of ``cloud_size`` points, always consuming the same number of
    variates, so running more probes on the same stream only extends the list.
    """
    if probes < 100:
        raise ValueError("at least 100 probes are required")
    if cloud_size > 16:
        raise ValueError("probe clouds are limited to 16 points")
    rng = as_generator(source)
    d = coeffs.dim
    k1_trace = np.empty(probes)
    k2_trace = np.empty(probes)
    k1 = k2 = 0.0
    w1 = w2 = {}
    state_free_ok = True if coeffs.g_state_free and coeffs.has_jumps else None
    for n in range(probes):
        i = int(rng.integers(coeffs.n_states))
        x = _ball(rng, radius, d)[None, :]
        y = _ball(rng, radius, d)[None, :]
        mu_pts = rng.normal(0.0, radius / 2, size=(cloud_size, d)) + _ball(rng, radius / 2, d)
        nu_pts = rng.normal(0.0, radius / 2, size=(cloud_size, d)) + _ball(rng, radius / 2, d)
        mu, nu = MeasureView(mu_pts), MeasureView(nu_pts)

        db = coeffs.drift(x, mu, i) - coeffs.drift(y, nu, i)
        ds = coeffs.diffusion(x, mu, i) - coeffs.diffusion(y, nu, i)
        lhs = float(np.sum(db * db) + np.sum(ds * ds) + coeffs.jump_l2(x, mu, i, y, nu)[0])
        rhs = float(np.sum((x - y) ** 2) + w2_assignment(mu_pts, nu_pts) ** 2)
        r1 = lhs / rhs if rhs > 0 else 0.0
        if r1 > k1:
            k1, w1 = r1, {"state": i, "x": x[0], "y": y[0], "ratio": r1}

        b = coeffs.drift(x, mu, i)
        s = coeffs.diffusion(x, mu, i)
        growth = float(np.sum(b * b) + np.sum(s * s) + coeffs.jump_l2(x, mu, i)[0])
        r2 = growth / (1.0 + float(np.sum(x * x)) + mu.second_moment())
        if r2 > k2:
            k2, w2 = r2, {"state": i, "x": x[0], "ratio": r2}
        k1_trace[n], k2_trace[n] = k1, k2

        if state_free_ok:
            z = coeffs.jumps.marks.sample(rng, 1)
            if not np.allclose(coeffs.jump(x, mu, i, z), coeffs.jump(y, nu, i, z), rtol=1e-12, atol=1e-12):
                state_free_ok = False

    envelope_ok = None
    if coeffs.envelope is not None and coeffs.has_jumps:
        envelope_ok = True
        h = coeffs.envelope
        zs = coeffs.jumps.marks.sample(rng, probes)
        zs = np.vstack([zs, 3.0 * zs, coeffs.jumps.marks.quadrature()[0]])
        x0 = np.zeros_like(zs)
        probe_mu = MeasureView(np.zeros((1, d)))
        for i in range(coeffs.n_states):
            g = np.linalg.norm(coeffs.jump(x0, probe_mu, i, zs), axis=1)
            bad = g > h(zs) * (1 + 1e-12) + 1e-12
            if bad.any():
                j = int(np.flatnonzero(bad)[0])
                raise EnvelopeViolated(
                    f"|g({i}, z)| = {g[j]:.6g} exceeds h(z) = {h(zs[j:j + 1])[0]:.6g}",
                    witness={"state": i, "z": zs[j].tolist()})
    if state_free_ok is False:
        raise GNotStateFree("model is flagged g_state_free but g depends on (x, mu)")
    return AssumptionReport(k1, k2, envelope_ok, state_free_ok, probes, w1, w2, k1_trace, k2_trace)


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------

def _per_state(params, key, n_states=None, default=None):
    if key not in params:
        if default is None:
            raise SchemaError(f"missing model parameter {key!r}")
        value = default
    else:
        value = params[key]
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if n_states is not None:
        if arr.size == 1:
            arr = np.full(n_states, arr[0])
        elif arr.size != n_states:
            raise SchemaError(f"parameter {key!r} has {arr.size} entries for {n_states} states")
    return arr


def _check_keys(name, params, allowed):
    unknown = set(params) - set(allowed)
    if unknown:
        raise SchemaError(f"unknown parameter(s) for model {name!r}: {sorted(unknown)}")


def _identity_diffusion(s, d):
    eye = np.eye(d)

    def diffusion(x, mu, i):
        return np.broadcast_to(s[i] * eye, (len(x), d, d))
    return diffusion


def _switching_mf_ou(params, jumps, dim, with_kappa):
    allowed = {"a", "c", "s", "gamma"} | ({"kappa"} if with_kappa else set())
    name = "switching-mf-ou-gxmu" if with_kappa else "switching-mf-ou"
    _check_keys(name, params, allowed)
    a = _per_state(params, "a")
    m = a.size
    c = _per_state(params, "c", m)
    s = _per_state(params, "s", m, default=0.0)
    gamma = _per_state(params, "gamma", m, default=0.0)
    kappa = float(params.get("kappa", 0.0))

    def drift(x, mu, i):
        return a[i] * (mu.mean() - x) + c[i]

    if jumps is not None and jumps.dim != dim:
        raise SchemaError(f"jump marks live in R^{jumps.dim}, model in R^{dim}")
    if jumps is not None and jumps.envelope is None and not with_kappa:
        jumps = JumpSpec(jumps.rate, jumps.marks, Envelope("linear", float(np.abs(gamma).max())))

    if with_kappa:
        def jump(x, mu, i, z):
            return gamma[i] * z + kappa * (mu.mean() - x) * np.linalg.norm(z, axis=1, keepdims=True)

        def compensator(x, mu, i):
            return jumps.rate * (gamma[i] * jumps.marks.mean + kappa * (mu.mean() - x) * jumps.marks.abs_moment)
    else:
        def jump(x, mu, i, z):
            return gamma[i] * z

        def compensator(x, mu, i):
            return np.broadcast_to(jumps.rate * gamma[i] * jumps.marks.mean, x.shape)

    out_params = {"a": a.tolist(), "c": c.tolist(), "s": s.tolist(), "gamma": gamma.tolist()}
    if with_kappa:
        out_params["kappa"] = kappa
    return Coefficients(
        dim=dim, n_states=m, drift=drift, diffusion=_identity_diffusion(s, dim),
        jump=jump if jumps is not None else None,
        compensator=compensator if jumps is not None else None,
        jumps=jumps, g_state_free=not with_kappa, name=name, params=out_params)


def _constant(params, jumps, dim):
    _check_keys("constant", params, {"b", "s", "gamma"})
    b = np.asarray(params.get("b", 0.0), dtype=float)
    if b.ndim == 0:
        b = b.reshape(1, 1)
    elif b.ndim == 1:
        b = b[:, None]
    if b.ndim != 2 or b.shape[1] not in (1, dim):
        raise SchemaError(f"constant drift must be per-state scalars or vectors in R^{dim}")
    sizes = [b.shape[0]] + [np.atleast_1d(params.get(k, 0.0)).size for k in ("s", "gamma")]
    m = max(sizes)
    if b.shape[0] == 1:
        b = np.repeat(b, m, axis=0)
    if b.shape[0] != m:
        raise SchemaError("constant model parameters disagree on the number of states")
    b = np.repeat(b, dim, axis=1) if b.shape[1] == 1 else b
    s = _per_state(params, "s", m, default=0.0)
    gamma = _per_state(params, "gamma", m, default=0.0)

    def drift(x, mu, i):
        return np.broadcast_to(b[i], x.shape)

    def jump(x, mu, i, z):
        return np.full(z.shape, gamma[i])

    def compensator(x, mu, i):
        return np.full(x.shape, jumps.rate * gamma[i])

    if jumps is not None and jumps.envelope is None:
        jumps = JumpSpec(jumps.rate, jumps.marks, Envelope("constant", float(np.abs(gamma).max() * np.sqrt(dim))))
    return Coefficients(
        dim=dim, n_states=m, drift=drift, diffusion=_identity_diffusion(s, dim),
        jump=jump if jumps is not None else None,
        compensator=compensator if jumps is not None else None,
        jumps=jumps, g_state_free=True, name="constant",
        params={"b": b.tolist(), "s": s.tolist(), "gamma": gamma.tolist()})


MODELS = ("switching-mf-ou", "switching-mf-ou-gxmu", "constant")


def builtin_model(name: str, params: dict | None = None, *, jumps: JumpSpec | None = None,
                  dim: int = 1) -> Coefficients:
    """Instantiate one of the gallery models.

    ``switching-mf-ou``
        b = a_i (mean(mu) - x) + c_i, sigma = s_i I, g = gamma_i z.
    ``switching-mf-ou-gxmu``
        as above plus kappa (mean(mu) - x) |z| in g.
    ``constant``
        b = b_i, sigma = s_i I, g = gamma_i (every coordinate).
    """
    params = dict(params or {})
    if name == "switching-mf-ou":
        return _switching_mf_ou(params, jumps, dim, with_kappa=False)
    if name == "switching-mf-ou-gxmu":
        return _switching_mf_ou(params, jumps, dim, with_kappa=True)
    if name == "constant":
        return _constant(params, jumps, dim)
    raise UnknownModel(f"unknown model {name!r}; expected one of {list(MODELS)}")


# ---------------------------------------------------------------------------
# oracles for the switching mean-field OU family
# ---------------------------------------------------------------------------

def conditional_mean_oracle(coeffs: Coefficients, chain: ChainPath, m0, times) -> np.ndarray:
    """m(t) = m0 + integral of c along the chain path.

    For the switching mean-field OU models the mean-reversion term averages to
    zero over the ensemble and compensated jumps have mean zero, so the
    conditional mean given the chain path solves dm/dt = c_{Lambda_t}.
    """
    if not coeffs.name.startswith("switching-mf-ou"):
        raise ValueError("the mean oracle is only valid for the switching-mf-ou family")
    c = np.asarray(coeffs.params["c"], dtype=float)
    times = np.asarray(times, dtype=float)
    edges = np.concatenate([[0.0], chain.jump_times, [np.inf]])
    seq = np.concatenate([[chain.initial], chain.states])
    out = np.empty(len(times))
    for j, t in enumerate(times):
        upper = np.minimum(edges[1:], t)
        lengths = np.clip(upper - edges[:-1], 0.0, None)
        out[j] = lengths @ c[seq]
    return np.asarray(m0, dtype=float)[None, :] + out[:, None]


def averaged_mean_oracle(coeffs: Coefficients, pi, m0, times) -> np.ndarray:
    """m(t) = m0 + t * sum_i c_i pi_i for the averaged switching OU model."""
    c = np.asarray(coeffs.params["c"], dtype=float)
    cbar = float(c @ np.asarray(pi, dtype=float))
    return np.asarray(m0, dtype=float)[None, :] + cbar * np.asarray(times, dtype=float)[:, None]


def conditional_mean_variance(coeffs: Coefficients, chain: ChainPath, var0: float, times,
                              n_particles: int) -> np.ndarray:
    """Variance of the ensemble mean around :func:`conditional_mean_oracle`.

    Per coordinate it is (Var X_0 + int s^2 + rate E|z|^2 int gamma^2) / N
    along the chain path; exact for the Euler scheme since the
    mean-reversion term cancels in the ensemble average.
    """
    if coeffs.name != "switching-mf-ou":
        raise ValueError("the variance oracle covers the switching-mf-ou model")
    s2 = np.asarray(coeffs.params["s"], dtype=float) ** 2
    jump_var = np.zeros_like(s2)
    if coeffs.jumps is not None:
        marks = coeffs.jumps.marks
        centred = marks.second_moment / coeffs.dim - float(np.mean(marks.mean ** 2))
        jump_var = coeffs.jumps.rate * centred * np.asarray(coeffs.params["gamma"], dtype=float) ** 2
    per_state = s2 + jump_var
    times = np.asarray(times, dtype=float)
    edges = np.concatenate([[0.0], chain.jump_times, [np.inf]])
    seq = np.concatenate([[chain.initial], chain.states])
    out = np.empty(len(times))
    for j, t in enumerate(times):
        lengths = np.clip(np.minimum(edges[1:], t) - edges[:-1], 0.0, None)
        out[j] = lengths @ per_state[seq]
    return (var0 + out) / n_particles
