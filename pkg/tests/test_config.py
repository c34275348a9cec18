import json

import pytest

from normalforge.config import DESK_FEATURES, DESK_MFPS, Config, config_from_dict, load_config
from normalforge.errors import ConfigError
from normalforge.refine import DESK_NET, DESK_TRAIN


def test_defaults():
    cfg = load_config(None)
    assert cfg.seed == 0 and cfg.preset == "full"
    assert cfg.pca.k == 100 and cfg.denoise.iterations == 20


def test_desk_preset():
    cfg = config_from_dict({"preset": "desk"})
    assert cfg.net == DESK_NET and cfg.train == DESK_TRAIN
    assert cfg.mfps == DESK_MFPS and cfg.features == DESK_FEATURES


def test_section_override_keeps_other_defaults():
    cfg = config_from_dict({"preset": "desk", "train": {"epochs": 3}, "seed": 7})
    assert cfg.train.epochs == 3 and cfg.train.batch == DESK_TRAIN.batch
    assert cfg.seed == 7


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"train": {"epoch": 3}},
    {"preset": "huge"},
    {"seed": -1},
    {"seed": 1.5},
    {"mfps": {"scales": [30, 10]}},
    {"net": {"connection1": "shear"}},
    {"pca": 3},
    [],
])
def test_rejects_invalid(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_load_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_json_roundtrip(tmp_path):
    cfg = config_from_dict({"preset": "desk", "denoise": {"lam": 0.25}})
    d = json.loads(cfg.to_json())
    d.pop("preset")
    p = tmp_path / "c.json"
    p.write_text(json.dumps(d))
    back = load_config(p)
    assert back.to_json().replace('"full"', '"desk"') == cfg.to_json()
    assert isinstance(back, Config)
