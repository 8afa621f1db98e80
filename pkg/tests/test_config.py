import json

import pytest

from fitcls.config import Config, canonical_json, config_hash, load_config
from fitcls.errors import InputError


def test_defaults_round_trip_and_hash_is_stable():
    cfg = Config()
    again = Config.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.hash == cfg.hash
    assert len(cfg.hash) == 64


def test_hash_ignores_key_order_but_not_values():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert canonical_json({"b": 1, "a": "é"}) == '{"a":"é","b":1}'


def test_partial_sections_override_defaults():
    cfg = Config.from_dict({"linear": {"lr": 0.05}, "head": {"width": 8}})
    assert cfg.linear.lr == 0.05 and cfg.linear.patience == Config().linear.patience
    assert cfg.head.width == 8
    assert cfg.lm_arch.build(30).vocab_size == 30


@pytest.mark.parametrize("bad", [
    {"nope": {}},
    {"linear": {"learning_rate": 0.1}},
    {"linear": 3},
    {"head": {"width": 0}},
    {"lm_arch": {"hidden": -1}},
    [],
])
def test_rejects_unknown_or_invalid(bad):
    with pytest.raises(InputError):
        Config.from_dict(bad)


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"split": {"seed": 3}}))
    assert load_config(p).split.seed == 3
    p.write_text("{not json")
    with pytest.raises(InputError):
        load_config(p)
    with pytest.raises(InputError):
        load_config(tmp_path / "missing.json")
