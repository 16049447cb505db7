import dataclasses
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from mkvswitch.config import RunConfig, config_from_dict, parse_config, parse_config_text, write_config
from mkvswitch.errors import ParseError, SchemaError, ValidationError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = """
seed = 3

[model]
name = "switching-mf-ou"
params = { a = [2.0, 1.0], c = [1.0, -1.0], s = [0.5, 1.0] }

[chain]
rates = [[0.0, 1.0], [2.0, 0.0]]
"""


def test_defaults_applied():
    cfg = parse_config_text(MINIMAL)
    assert cfg.time.step == 1e-3 and cfg.time.horizon == 1.0
    assert cfg.chaos.replicates == 16 and cfg.chaos.m_factor == 4
    assert cfg.average.replicates == 16 and cfg.workers == 1
    assert cfg.qmatrix().size == 2 and cfg.coefficients().n_states == 2


def test_unknown_key_is_named():
    text = MINIMAL.replace("s = [0.5, 1.0] }", "s = [0.5, 1.0], sigma_typo = 1.0 }")
    with pytest.raises(SchemaError, match="sigma_typo"):
        parse_config_text(text).coefficients()
    with pytest.raises(SchemaError, match="time.sigma_typo"):
        parse_config_text(MINIMAL + "\n[time]\nsigma_typo = 1\n")


def test_missing_seed_and_type_errors():
    with pytest.raises(SchemaError, match="seed"):
        parse_config_text(MINIMAL.replace("seed = 3", ""))
    with pytest.raises(SchemaError, match="time.step"):
        parse_config_text(MINIMAL + "\n[time]\nstep = 'small'\n")
    with pytest.raises(SchemaError):
        parse_config_text(MINIMAL.replace("rates =", "q = [[-1.0, 1.0], [2.0, -2.0]]\nrates ="))


def test_bad_generator_is_validation_error():
    text = MINIMAL.replace("rates = [[0.0, 1.0], [2.0, 0.0]]", "q = [[-1.0, 1.0], [2.0, -1.0]]")
    with pytest.raises(ValidationError):
        parse_config_text(text)
    with pytest.raises(ValidationError):
        parse_config_text(MINIMAL.replace("[2.0, 0.0]", "[-2.0, 0.0]"))
    with pytest.raises(ValidationError):
        parse_config_text(MINIMAL.replace("[chain]", "[chain]\ninitial_state = 5"))
    with pytest.raises(ValidationError):
        parse_config_text(MINIMAL.replace("seed = 3", "seed = -1"))


def test_parse_error_position():
    with pytest.raises(ParseError) as info:
        parse_config_text("seed = 1\n[time\nstep = 1\n")
    assert info.value.line == 2 and info.value.column is not None
    with pytest.raises(ParseError):
        parse_config("/nonexistent/run.toml")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_round_trip(path, tmp_path):
    cfg = parse_config(path)
    again = parse_config(write_config(cfg, tmp_path / "echo.toml"))
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()


def _leaves(obj, prefix=()):
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _leaves(getattr(obj, f.name), prefix + (f.name,))
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
        yield prefix


def _bump(cfg, path):
    def go(obj, keys):
        if len(keys) == 1:
            old = getattr(obj, keys[0])
            return dataclasses.replace(obj, **{keys[0]: old + (1 if isinstance(old, int) else 0.5)})
        return dataclasses.replace(obj, **{keys[0]: go(getattr(obj, keys[0]), keys[1:])})
    return go(cfg, path)


BASE = parse_config(CONFIGS / "chaos.toml")
NUMERIC = list(_leaves(BASE))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(NUMERIC))
def test_hash_changes_iff_field_changes(path):
    changed = _bump(BASE, path)
    assert changed != BASE and changed.config_hash() != BASE.config_hash()
    rebuilt = config_from_dict(BASE.to_dict())
    assert rebuilt.config_hash() == BASE.config_hash()


def test_hash_sensitive_to_nested_params():
    d = BASE.to_dict()
    d["model"]["params"]["a"] = [2.0, 1.5]
    assert config_from_dict(d).config_hash() != BASE.config_hash()
    assert isinstance(BASE, RunConfig)
