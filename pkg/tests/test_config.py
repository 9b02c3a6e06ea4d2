"""Config loading: defaults match the reference hyperparameters, unknown
keys are rejected, values are validated."""

import pytest

from partreid.config import (ConfigError, RunConfig, load_config,
                             load_synthetic_spec)


def test_defaults_match_reference_values():
    cfg = RunConfig()
    assert cfg.pmnet.k == 3
    assert cfg.training.margin == 0.7
    assert cfg.training.p == 4
    assert cfg.training.q == 8
    assert cfg.training.batch_size == 32
    assert cfg.training.flip_prob == 0.5
    assert cfg.training.erase_prob == 0.5
    assert cfg.training.occlusion_prob == 0.3
    assert cfg.training.lr == 1.5e-4
    assert cfg.panet.epochs == 100
    assert cfg.panet.lr == 1e-4


def test_load_missing_path_gives_defaults():
    cfg = load_config(None)
    assert cfg.pmnet.k == 3


def test_load_and_override(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("""
[training]
epochs = 7
margin = 0.5
hul = false
fixed_weights = 2,1,1

[pmnet]
k = 2
""")
    cfg = load_config(path)
    assert cfg.training.epochs == 7
    assert cfg.training.margin == 0.5
    assert cfg.training.hul is False
    assert cfg.training.fixed_weights == (2.0, 1.0, 1.0)
    assert cfg.pmnet.k == 2
    assert cfg.panet.epochs == 100          # untouched defaults remain


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[training]\nnot_a_key = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(path)


def test_bad_value_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[training]\nepochs = many\n")
    with pytest.raises(ConfigError, match="bad value"):
        load_config(path)
    path.write_text("[training]\nflip_prob = 1.5\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_eval_lambdas_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[eval]\nlambdas = 1.81,2.21,2.25\n")
    cfg = load_config(path)
    assert cfg.eval.lambda_values() == (1.81, 2.21, 2.25)
    path.write_text("[eval]\nlambdas = 1,-2,3\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config_file_errors():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/does/not/exist.cfg")


def test_synthetic_spec_file(tmp_path):
    path = tmp_path / "spec.cfg"
    path.write_text("""
[synthetic]
num_identities = 8
images_per_identity = 16
clutter = 0.1
seed = 42
""")
    spec = load_synthetic_spec(path)
    assert spec.num_identities == 8
    assert spec.images_per_identity == 16
    assert spec.clutter == 0.1
    assert spec.seed == 42
    path.write_text("[synthetic]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_synthetic_spec(path)
