"""Run configuration: a strict TOML schema with documented defaults.

Unknown keys are rejected with a :class:`SchemaError` naming the dotted key;
invalid values (for example a non-conservative rate matrix) raise a
:class:`ValidationError` chained to the underlying module error.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import tomli
import tomli_w

from .ctmc import QMatrix, build_qmatrix
from .errors import MKVError, ParseError, SchemaError, ValidationError
from .model import Coefficients, builtin_model
from .noise import Distribution, Envelope, JumpSpec, make_distribution

DEFAULT_STEP = 1e-3
DEFAULT_REPLICATES = 16
DEFAULT_M_FACTOR = 4


@dataclass
class JumpsConfig:
    rate: float
    marks: dict
    envelope: Optional[dict] = None


@dataclass
class ModelConfig:
    name: str
    dim: int = 1
    params: dict = field(default_factory=dict)
    jumps: Optional[JumpsConfig] = None


@dataclass
class ChainConfig:
    q: Optional[list] = None
    rates: Optional[list] = None
    initial_state: int = 0


@dataclass
class TimeConfig:
    horizon: float = 1.0
    step: float = DEFAULT_STEP


@dataclass
class SimulateConfig:
    n_particles: int = 100
    time_scale: float = 1.0


@dataclass
class ChaosConfig:
    n_list: list = field(default_factory=lambda: [50, 100, 200, 400, 800])
    replicates: int = DEFAULT_REPLICATES
    m_factor: int = DEFAULT_M_FACTOR
    slope_threshold: float = -0.4
    tracked: Optional[int] = None
    proxy_check: bool = True


@dataclass
class AverageConfig:
    eps_list: list = field(default_factory=lambda: [1.0, 0.1, 0.01, 0.001])
    replicates: int = DEFAULT_REPLICATES
    n_particles: int = 256
    fraction: float = 0.2


@dataclass
class PicardConfig:
    n_particles: int = 1000
    tol: float = 1e-2
    max_iter: int = 15
    time_scale: float = 1.0


@dataclass
class ErgodicityConfig:
    times: Optional[list] = None
    t_max: float = 10.0
    n_points: int = 101


@dataclass
class FG14Config:
    law: str = "gaussian"
    d: int = 1
    n_list: list = field(default_factory=lambda: [100, 200, 400, 800, 1600, 3200, 6400])
    replicates: int = DEFAULT_REPLICATES
    reference_size: int = 100_000
    slope_threshold: Optional[float] = None


@dataclass
class ValidateConfig:
    probes: int = 1000
    radius: float = 5.0


@dataclass
class RunConfig:
    seed: int
    model: Optional[ModelConfig] = None
    chain: Optional[ChainConfig] = None
    initial: dict = field(default_factory=lambda: {"name": "gaussian", "mean": [0.0], "std": 1.0})
    time: TimeConfig = field(default_factory=TimeConfig)
    workers: int = 1
    output_dir: Optional[str] = None
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    chaos: ChaosConfig = field(default_factory=ChaosConfig)
    average: AverageConfig = field(default_factory=AverageConfig)
    picard: PicardConfig = field(default_factory=PicardConfig)
    ergodicity: ErgodicityConfig = field(default_factory=ErgodicityConfig)
    fg14: FG14Config = field(default_factory=FG14Config)
    validate: ValidateConfig = field(default_factory=ValidateConfig)

    # -- derived objects -----------------------------------------------------

    def qmatrix(self) -> QMatrix:
        if self.chain is None:
            raise SchemaError("missing [chain] section")
        try:
            if self.chain.q is not None:
                return build_qmatrix(self.chain.q)
            return build_qmatrix(self.chain.rates, offdiagonal=True)
        except MKVError as exc:
            raise ValidationError(f"chain: {exc}") from exc
        except ValueError as exc:
            raise ValidationError(f"chain: {exc}") from exc

    def jump_spec(self) -> Optional[JumpSpec]:
        if self.model is None or self.model.jumps is None:
            return None
        j = self.model.jumps
        marks = dict(j.marks)
        name = marks.pop("name", None)
        if name is None:
            raise SchemaError("missing key 'model.jumps.marks.name'")
        env = None
        if j.envelope is not None:
            extra = set(j.envelope) - {"kind", "scale"}
            if extra:
                raise SchemaError(f"unknown key 'model.jumps.envelope.{sorted(extra)[0]}'")
            env = Envelope(**j.envelope)
        return JumpSpec(float(j.rate), make_distribution(name, marks), env)

    def coefficients(self) -> Coefficients:
        if self.model is None:
            raise SchemaError("missing [model] section")
        return builtin_model(self.model.name, self.model.params, jumps=self.jump_spec(), dim=self.model.dim)

    def initial_law(self) -> Distribution:
        params = dict(self.initial)
        name = params.pop("name", None)
        if name is None:
            raise SchemaError("missing key 'initial.name'")
        return make_distribution(name, params)

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return _strip_none(dataclasses.asdict(self))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_strip_none(v) for v in obj]
    return obj


def _coerce(value, type_name: str, key: str):
    base = type_name.replace("Optional[", "").rstrip("]")
    if value is None:
        return None
    if base in ("int", "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"key '{key}' must be a number")
        if base == "int":
            if float(value) != int(value):
                raise SchemaError(f"key '{key}' must be an integer")
            return int(value)
        return float(value)
    if base == "str" and not isinstance(value, str):
        raise SchemaError(f"key '{key}' must be a string")
    if base == "bool" and not isinstance(value, bool):
        raise SchemaError(f"key '{key}' must be true or false")
    if base == "list" and not isinstance(value, list):
        raise SchemaError(f"key '{key}' must be an array")
    if base == "dict" and not isinstance(value, dict):
        raise SchemaError(f"key '{key}' must be a table")
    return value


_SECTIONS = {cls.__name__: cls for cls in (JumpsConfig, ModelConfig, ChainConfig, TimeConfig, SimulateConfig,
                                           ChaosConfig, AverageConfig, PicardConfig, ErgodicityConfig,
                                           FG14Config, ValidateConfig, RunConfig)}


def _build(cls, data, prefix=""):
    if not isinstance(data, dict):
        raise SchemaError(f"key '{prefix.rstrip('.')}' must be a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise SchemaError(f"unknown key '{prefix}{key}'")
    kwargs = {}
    for name, f in names.items():
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise SchemaError(f"missing key '{prefix}{name}'")
            continue
        type_name = f.type if isinstance(f.type, str) else f.type.__name__
        inner = type_name.replace("Optional[", "").rstrip("]")
        if inner in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[inner], data[name], f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(data[name], type_name, prefix + name)
    return cls(**kwargs)


def config_from_dict(data: dict, validate: bool = True) -> RunConfig:
    cfg = _build(RunConfig, data)
    if validate:
        validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.seed < 0 or cfg.seed >= 1 << 64:
        raise ValidationError("seed must be a non-negative 64-bit integer")
    if cfg.workers < 1:
        raise ValidationError("workers must be >= 1")
    if cfg.time.horizon <= 0 or cfg.time.step <= 0:
        raise ValidationError("time.horizon and time.step must be positive")
    if cfg.chain is not None:
        if (cfg.chain.q is None) == (cfg.chain.rates is None):
            raise SchemaError("chain needs exactly one of 'chain.q' or 'chain.rates'")
        q = cfg.qmatrix()
        if not 0 <= cfg.chain.initial_state < q.size:
            raise ValidationError(f"chain.initial_state out of range for {q.size} states")
    cfg.initial_law()
    if cfg.model is not None:
        coeffs = cfg.coefficients()
        if cfg.chain is not None and coeffs.n_states not in (1, cfg.qmatrix().size):
            raise ValidationError(f"model has {coeffs.n_states} regimes, chain has {cfg.qmatrix().size}")
        if cfg.initial_law().dim != coeffs.dim:
            raise ValidationError("initial law and model live in different dimensions")


_POSITION = re.compile(r"line (\d+), column (\d+)")


def parse_config(path) -> RunConfig:
    """Read and validate a :class:`RunConfig`, with defaults applied."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = _POSITION.search(str(exc))
        err = ParseError(f"{source}: {exc}")
        err.line = int(m.group(1)) if m else None
        err.column = int(m.group(2)) if m else None
        raise err from exc
    if "seed" not in data:
        raise SchemaError("missing key 'seed' (a root seed is mandatory)")
    return config_from_dict(data)


def write_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.dumps())
    return path
