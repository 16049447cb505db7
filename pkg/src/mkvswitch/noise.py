"""Randomness for the product space (chain noise) x (idiosyncratic noise).

Streams are addressed by ``(root seed, label)`` where the label is a short
path such as ``("omega0", 0)`` or ``("omega1", k)``.  A stream is a value: asking
it for a generator twice gives two generators producing the same sequence.

Jumps are finite-activity compound Poisson.  Marks come from a closed set of
named distributions whose moments are known, so compensators can be computed
without sampling.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence, Union

import numpy as np
from scipy.special import erf

from .errors import LengthMismatch, SchemaError

_MASK64 = (1 << 64) - 1
_QUAD_BUDGET = 4096


def _label_words(label) -> tuple:
    words = []
    for part in label:
        if isinstance(part, (bool, np.bool_)):
            raise TypeError(f"bad stream label component {part!r}")
        if isinstance(part, (int, np.integer)):
            if part < 0:
                raise ValueError(f"stream label index must be >= 0, got {part}")
            words += [0, int(part)]
        elif isinstance(part, str):
            digest = hashlib.blake2b(part.encode("utf8"), digest_size=16).digest()
            words += [1, int.from_bytes(digest, "little")]
        else:
            raise TypeError(f"bad stream label component {part!r}")
    return tuple(words)


@dataclass(frozen=True)
class RngStream:
    root: int
    label: tuple

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.root, spawn_key=_label_words(self.label))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))

    def child(self, *parts) -> "RngStream":
        return RngStream(self.root, self.label + tuple(parts))

    def seed64(self) -> int:
        """A 64-bit integer drawn from the stream, usable as a derived root seed."""
        return int(self.seed_sequence().generate_state(2, np.uint32).view(np.uint64)[0])


def derive_stream(root: int, label) -> RngStream:
    """Return the stream for ``label`` under ``root``.

    Labels are hashed into the 128-bit pool of a ``SeedSequence`` so distinct
    labels give statistically independent, reproducible streams.
    """
    root = int(root)
    if root < 0 or root > _MASK64:
        raise ValueError(f"root seed must fit in 64 bits, got {root}")
    if isinstance(label, (str, int)):
        label = (label,)
    label = tuple(label)
    _label_words(label)
    return RngStream(root, label)


RandomSource = Union[RngStream, np.random.Generator]


def as_generator(source: RandomSource) -> np.random.Generator:
    if isinstance(source, RngStream):
        return source.generator()
    return source


# ---------------------------------------------------------------------------
# named distributions (jump marks and initial laws)
# ---------------------------------------------------------------------------

def _vec(params, key, dim=None):
    try:
        value = np.atleast_1d(np.asarray(params[key], dtype=float))
    except KeyError:
        raise SchemaError(f"missing distribution parameter {key!r}") from None
    if value.ndim != 1 or (dim is not None and value.size != dim):
        raise SchemaError(f"distribution parameter {key!r} has the wrong shape")
    return value


def _tensor_rule(nodes_1d, weights_1d, shift, scale, dim):
    grid = np.array(list(product(range(len(nodes_1d)), repeat=dim)))
    nodes = shift + scale * nodes_1d[grid]
    weights = np.prod(weights_1d[grid], axis=1)
    return nodes, weights


def _rule_size(dim):
    return max(2, int(_QUAD_BUDGET ** (1.0 / dim))) if dim > 1 else 64


class Distribution:
    """Base class for the named distributions on R^d."""

    name = ""
    _keys: tuple = ()

    def __init__(self, params):
        params = dict(params)
        unknown = set(params) - set(self._keys)
        if unknown:
            raise SchemaError(f"unknown parameter(s) for {self.name!r}: {sorted(unknown)}")
        self.params = params

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    @property
    def mean(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def second_moment(self) -> float:
        raise NotImplementedError

    @property
    def abs_moment(self) -> float:
        nodes, weights = self.quadrature()
        return float(weights @ np.linalg.norm(nodes, axis=1))

    def quadrature(self):
        raise NotImplementedError

    def expect(self, f) -> np.ndarray:
        """Integrate ``f`` (vectorised over an ``(n, d)`` array) by the rule."""
        nodes, weights = self.quadrature()
        return np.tensordot(weights, np.asarray(f(nodes), dtype=float), axes=(0, 0))

    def to_dict(self):
        out = {"name": self.name}
        for key, value in self.params.items():
            out[key] = np.asarray(value).tolist() if np.ndim(value) else float(value)
        return out

    def __eq__(self, other):
        return isinstance(other, Distribution) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"{type(self).__name__}({self.params})"


class PointMass(Distribution):
    name = "point"
    _keys = ("loc",)

    def __init__(self, params):
        super().__init__(params)
        self.loc = _vec(self.params, "loc")
        self.dim = self.loc.size

    def sample(self, rng, n):
        return np.broadcast_to(self.loc, (n, self.dim)).copy()

    @property
    def mean(self):
        return self.loc.copy()

    @property
    def second_moment(self):
        return float(self.loc @ self.loc)

    @property
    def abs_moment(self):
        return float(np.linalg.norm(self.loc))

    def quadrature(self):
        return self.loc[None, :].copy(), np.ones(1)


class UniformBox(Distribution):
    name = "uniform"
    _keys = ("low", "high")

    def __init__(self, params):
        super().__init__(params)
        self.low = _vec(self.params, "low")
        self.high = _vec(self.params, "high", self.low.size)
        if np.any(self.high <= self.low):
            raise SchemaError("uniform box needs high > low in every coordinate")
        self.dim = self.low.size

    def sample(self, rng, n):
        return self.low + (self.high - self.low) * rng.random((n, self.dim))

    @property
    def mean(self):
        return 0.5 * (self.low + self.high)

    @property
    def second_moment(self):
        lo, hi = self.low, self.high
        return float(np.sum((lo * lo + lo * hi + hi * hi) / 3.0))

    @property
    def abs_moment(self):
        if self.dim == 1:
            lo, hi = float(self.low[0]), float(self.high[0])
            if lo < 0.0 < hi:
                return (lo * lo + hi * hi) / (2.0 * (hi - lo))
            return abs(lo + hi) / 2.0
        return super().abs_moment

    def quadrature(self):
        n = _rule_size(self.dim)
        x, w = np.polynomial.legendre.leggauss(n)
        x, w = 0.5 * (x + 1.0), 0.5 * w
        if self.dim == 1:
            return (self.low + (self.high - self.low) * x[:, None]), w
        return _tensor_rule(x, w, self.low, self.high - self.low, self.dim)


class IsotropicGaussian(Distribution):
    name = "gaussian"
    _keys = ("mean", "std")

    def __init__(self, params):
        super().__init__(params)
        self.loc = _vec(self.params, "mean")
        self.std = float(self.params.get("std", 1.0))
        if self.std < 0:
            raise SchemaError("gaussian std must be >= 0")
        self.dim = self.loc.size

    def sample(self, rng, n):
        return self.loc + self.std * rng.standard_normal((n, self.dim))

    @property
    def mean(self):
        return self.loc.copy()

    @property
    def second_moment(self):
        return float(self.loc @ self.loc + self.dim * self.std**2)

    @property
    def abs_moment(self):
        if self.dim == 1:
            m, s = float(self.loc[0]), self.std
            if s == 0.0:
                return abs(m)
            # folded normal
            return s * math.sqrt(2 / math.pi) * math.exp(-m * m / (2 * s * s)) + m * float(erf(m / (s * math.sqrt(2))))
        return super().abs_moment

    def quadrature(self):
        n = _rule_size(self.dim)
        x, w = np.polynomial.hermite_e.hermegauss(n)
        w = w / w.sum()
        if self.dim == 1:
            return self.loc + self.std * x[:, None], w
        return _tensor_rule(x, w, self.loc, self.std, self.dim)


class TwoPoint(Distribution):
    name = "two-point"
    _keys = ("a", "b", "p")

    def __init__(self, params):
        super().__init__(params)
        self.a = _vec(self.params, "a")
        self.b = _vec(self.params, "b", self.a.size)
        self.p = float(self.params.get("p", 0.5))
        if not 0.0 <= self.p <= 1.0:
            raise SchemaError("two-point weight p must lie in [0, 1]")
        self.dim = self.a.size

    def sample(self, rng, n):
        pick = rng.random(n) < self.p
        return np.where(pick[:, None], self.a, self.b)

    @property
    def mean(self):
        return self.p * self.a + (1 - self.p) * self.b

    @property
    def second_moment(self):
        return float(self.p * self.a @ self.a + (1 - self.p) * self.b @ self.b)

    @property
    def abs_moment(self):
        return float(self.p * np.linalg.norm(self.a) + (1 - self.p) * np.linalg.norm(self.b))

    def quadrature(self):
        return np.vstack([self.a, self.b]), np.array([self.p, 1 - self.p])


DISTRIBUTIONS = {cls.name: cls for cls in (PointMass, UniformBox, IsotropicGaussian, TwoPoint)}


def make_distribution(name: str, params=None) -> Distribution:
    try:
        cls = DISTRIBUTIONS[name]
    except KeyError:
        raise SchemaError(f"unknown distribution {name!r}; expected one of {sorted(DISTRIBUTIONS)}") from None
    return cls(params or {})


# ---------------------------------------------------------------------------
# jumps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    """Scalar bound h(z) on the jump coefficient.

    ``linear``: scale*|z|; ``affine``: scale*(1+|z|); ``constant``: scale.
    """

    kind: str = "linear"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "affine", "constant"):
            raise SchemaError(f"unknown envelope kind {self.kind!r}")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        r = np.linalg.norm(z, axis=1)
        if self.kind == "linear":
            return self.scale * r
        if self.kind == "affine":
            return self.scale * (1.0 + r)
        return np.full(len(z), float(self.scale))


@dataclass(frozen=True)
class JumpSpec:
    rate: float
    marks: Distribution
    envelope: Envelope | None = None

    def __post_init__(self):
        if not self.rate > 0 or not math.isfinite(self.rate):
            raise SchemaError(f"jump rate must be positive and finite, got {self.rate}")

    @property
    def dim(self) -> int:
        return self.marks.dim

    @property
    def mark_second_moment(self) -> float:
        return self.marks.second_moment

    def integrate(self, f) -> np.ndarray:
        """Return the integral of ``f`` against the intensity measure."""
        return self.rate * self.marks.expect(f)

    def to_dict(self):
        out = {"rate": float(self.rate), "marks": self.marks.to_dict()}
        if self.envelope is not None:
            out["envelope"] = {"kind": self.envelope.kind, "scale": float(self.envelope.scale)}
        return out


@dataclass
class JumpBatch:
    times: np.ndarray
    marks: np.ndarray
    t0: float = 0.0
    h: float = 0.0

    def __len__(self):
        return len(self.times)


def brownian_increments(source: RandomSource, h: float, d: int, count: int) -> np.ndarray:
    """``count`` i.i.d. N(0, h I_d) increments as a ``(count, d)`` array."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    rng = as_generator(source)
    return math.sqrt(h) * rng.standard_normal((count, d))


def sample_jump_batch(spec: JumpSpec, t0: float, h: float, source: RandomSource) -> JumpBatch:
    """Exact compound Poisson jumps of ``spec`` on ``[t0, t0 + h)``."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    rng = as_generator(source)
    k = int(rng.poisson(spec.rate * h))
    times = t0 + h * np.sort(rng.random(k))
    marks = spec.marks.sample(rng, k)
    return JumpBatch(times, marks, t0, h)


def compensate_integral(batch: JumpBatch, values, compensator_mean, h: float):
    """Sum of ``values`` over the batch minus ``h`` times the compensator."""
    values = np.asarray(values, dtype=float)
    if len(values) != len(batch):
        raise LengthMismatch(f"{len(values)} integrand values for {len(batch)} jumps")
    return values.sum(axis=0) - h * np.asarray(compensator_mean, dtype=float)


@dataclass
class ParticleNoise:
    """Pre-drawn noise for a block of particles on one base grid.

    ``dW`` has shape ``(P, n_steps, d)``.  ``jumps`` holds, per particle, the
    jump times and marks over the whole horizon.  ``bridge`` holds standard
    normals used to split base increments at chain switching times.
    """

    x0: np.ndarray
    dW: np.ndarray
    bridge: np.ndarray
    jump_particle: np.ndarray
    jump_times: np.ndarray
    jump_marks: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def take(self, count: int) -> "ParticleNoise":
        keep = self.jump_particle < count
        return ParticleNoise(self.x0[:count], self.dW[:count], self.bridge[:count],
                             self.jump_particle[keep], self.jump_times[keep], self.jump_marks[keep],
                             self.indices[:count])


def draw_particle_noise(root: int, indices: Sequence[int], steps: np.ndarray, d: int,
                        initial: Distribution, jumps: JumpSpec | None, horizon: float,
                        n_bridge: int = 0) -> ParticleNoise:
    """Draw the idiosyncratic noise of particles ``indices`` under ``root``.

    Particle ``k`` only ever reads streams labelled with ``k``, so the noise of a
    particle does not depend on how many other particles are simulated.
    """
    indices = np.asarray(indices, dtype=int)
    P = len(indices)
    steps = np.asarray(steps, dtype=float)
    sq = np.sqrt(steps)[:, None]
    x0 = np.empty((P, d))
    dW = np.empty((P, len(steps), d))
    bridge = np.empty((P, n_bridge, d))
    jp, jt, jm = [], [], []
    for row, k in enumerate(indices):
        x0[row] = initial.sample(derive_stream(root, ("omega1-init", int(k))).generator(), 1)[0]
        dW[row] = sq * derive_stream(root, ("omega1", int(k))).generator().standard_normal((len(steps), d))
        if n_bridge:
            bridge[row] = derive_stream(root, ("omega1-bridge", int(k))).generator().standard_normal((n_bridge, d))
        if jumps is not None:
            batch = sample_jump_batch(jumps, 0.0, horizon, derive_stream(root, ("omega1-jump", int(k))))
            if len(batch):
                jp.append(np.full(len(batch), row))
                jt.append(batch.times)
                jm.append(batch.marks)
    if jp:
        jp, jt, jm = np.concatenate(jp), np.concatenate(jt), np.vstack(jm)
    else:
        jp, jt, jm = np.zeros(0, dtype=int), np.zeros(0), np.zeros((0, d))
    return ParticleNoise(x0, dW, bridge, jp, jt, jm, indices)
