import pytest

from tracemil import config as cfgmod
from tracemil.config import ConfigError


def test_defaults_fill_everything_but_the_seed():
    cfg = cfgmod.from_dict({"seed": 4})
    assert cfg.synth.seed == cfg.train.seed == 4
    assert cfg.influence.variant == "literal"
    assert cfg.model_config().in_dim == cfg.synth.feature_dim
    with pytest.raises(ConfigError, match="seed is mandatory"):
        cfgmod.from_dict({"train": {"epochs": 2}})


def test_seed_override_wins():
    assert cfgmod.from_dict({"seed": 4}, seed_override=9).train.seed == 9


@pytest.mark.parametrize("raw, name", [
    ({"seed": 1, "train": {"learnig_rate": 0.1}}, "learnig_rate"),
    ({"seed": 1, "trian": {}}, "trian"),
    ({"seed": 1, "synth": {"seed": 3}}, "seed"),
])
def test_unknown_keys_are_named(raw, name):
    with pytest.raises(ConfigError, match=name):
        cfgmod.from_dict(raw)


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError, match="variant"):
        cfgmod.from_dict({"seed": 1, "influence": {"variant": "exact"}})
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"seed": -1})
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"seed": 1, "train": {"batch_size": 0}})


def test_canonical_hash_is_stable_and_sensitive(tmp_path):
    a = cfgmod.from_dict({"seed": 2, "train": {"epochs": 3}, "prune": {"ks": [1, 2]}})
    path = tmp_path / "c.yaml"
    path.write_text(cfgmod.dump(a))
    b = cfgmod.load(path)
    assert a == b and a.hash() == b.hash()
    assert a.with_overrides(train={"epochs": 4}).hash() != a.hash()
    # key order in the source file does not matter
    path.write_text("prune: {ks: [1, 2]}\ntrain: {epochs: 3}\nseed: 2\n")
    assert cfgmod.load(path).hash() == a.hash()


def test_malformed_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: [1,\n")
    with pytest.raises(ConfigError, match="YAML"):
        cfgmod.load(path)
