import json
import math

import pytest

from fedprov.config import PRESETS, ConfigError, ExperimentConfig, from_dict, load_config, preset


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_builds(name):
    cfg = preset(name)
    assert cfg.name == name
    assert from_dict(cfg.to_dict()) == cfg


def test_unknown_keys_rejected_at_any_depth(tmp_path):
    for bad in ({"bogus": 1}, {"fl": {"n_client": 3}}, {"aggregator": {"kind": "robust", "epsilon": 0.1}}):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(bad))
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(p)


def test_type_and_range_errors(tmp_path):
    with pytest.raises(ConfigError):
        from_dict({"fl": {"n_clients": "ten"}})
    with pytest.raises(ConfigError):
        from_dict({"fl": {"n_clients": 10, "n_watermarking": 5}})
    with pytest.raises(ConfigError):
        from_dict({"watermark": {"scheme": "rsa"}})
    with pytest.raises(ConfigError):
        from_dict({"aggregator": {"eps": 0.7}})
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_file_overlays_preset(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "desk-active", "fl": {"max_rounds": 7}}))
    cfg = load_config(p)
    assert cfg.aggregator.kind == "robust" and cfg.fl.max_rounds == 7
    assert cfg.fl.n_clients == 10


def test_inf_and_optional_values():
    cfg = from_dict({"watermark": {"scheme": "kth", "edit_penalty": "inf"}})
    assert cfg.watermark.edit_penalty == math.inf
    assert from_dict({"fl": {"local_steps": None}}).fl.local_steps is None


def test_hash_stable_and_sensitive():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != a.replace(fl={"seed": 1}).config_hash()


def test_with_seed_reseeds_every_stream():
    cfg = ExperimentConfig().with_seed(9)
    assert cfg.fl.seed == cfg.aggregator.seed == cfg.bench.seed == 9
    assert cfg.corpus.split_seed == 0


def test_eps_property():
    assert preset("eps-sweep-desk").replace(fl={"n_watermarking": 2}).fl.eps == pytest.approx(0.0667, abs=1e-4)
