import pytest

from lowbit.config import RunConfig, apply_overrides, parse_scalar, parse_toml_subset
from lowbit.errors import ConfigError
from lowbit.model import INPUT_SITES


SAMPLE = """
# toy run
[model]
n_layers = 2
d_model = 32

[qat]
enabled = true
bits = 4

[kurtosis]
lambda = 1e-5

[data]
corpus = "corpus.txt"
"""


class TestParser:
    def test_tables_and_scalars(self):
        values = parse_toml_subset(SAMPLE)
        assert values["model.n_layers"] == 2
        assert values["qat.enabled"] is True
        assert values["kurtosis.lambda"] == 1e-5
        assert values["data.corpus"] == "corpus.txt"

    def test_scalar_types(self):
        assert parse_scalar("3") == 3
        assert parse_scalar("3.5") == 3.5
        assert parse_scalar("true") is True
        assert parse_scalar('"x y"') == "x y"

    def test_garbage_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_scalar("what is this")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_toml_subset("[a]\nx = 1\nx = 2\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            parse_toml_subset("[a]\njust words\n")


class TestRunConfig:
    def test_defaults_are_complete(self, tmp_path):
        cfg = RunConfig.load(None)
        model_cfg = cfg.model_config()
        assert model_cfg.n_layers == 2
        assert model_cfg.qat_sites == ()
        tcfg = cfg.train_config()
        assert tcfg.steps == 2000

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[model]\nwidth = 3\n")
        with pytest.raises(ConfigError):
            RunConfig.load(p)

    def test_type_mismatch_rejected(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text('[model]\nn_layers = "two"\n')
        with pytest.raises(ConfigError):
            RunConfig.load(p)

    def test_overrides(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text(SAMPLE)
        cfg = RunConfig.load(p, overrides=["qat.enabled=false",
                                           "train.steps=7",
                                           "data.corpus=other.txt"])
        assert cfg["qat.enabled"] is False
        assert cfg["train.steps"] == 7
        assert cfg["data.corpus"] == "other.txt"

    def test_qat_sites_expand(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[qat]\nenabled = true\nsites = \"qkv_in,mlp_in\"\n")
        cfg = RunConfig.load(p)
        assert cfg.model_config().qat_sites == ("qkv_in", "mlp_in")
        p.write_text("[qat]\nenabled = true\n")
        assert RunConfig.load(p).model_config().qat_sites == INPUT_SITES

    def test_bad_site_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[qat]\nenabled = true\nsites = "bogus"\n')
        with pytest.raises(ConfigError):
            RunConfig.load(p).model_config()

    def test_kurtosis_config(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[kurtosis]\nlambda = 1e-5\nsites = "qkv_out"\n')
        mc = RunConfig.load(p).model_config()
        assert mc.kurtosis.lam == 1e-5
        assert mc.kurtosis.sites == frozenset({"qkv_out"})

    def test_round_trip_through_to_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text(SAMPLE)
        cfg = RunConfig.load(p, overrides=["train.steps=11"])
        again = parse_toml_subset(cfg.to_toml())
        assert again == cfg.values

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "missing.toml")


def test_override_parse_error_names_key():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["noequals"])
