from pathlib import Path

import pytest

from src.config.settings import (
    EnvironmentConfig,
    apply_overrides,
    build_experiment_config,
    get_cg_rel_tol,
    get_default_seed,
    get_log_level,
    get_output_dir,
    load_experiment_config,
    parse_policy_list,
)
from src.utils.exceptions import ConfigError


class TestEnvironmentGetters:

    def test_defaults(self, monkeypatch):
        for key in ("GOB_OUTPUT_DIR", "GOB_LOG_LEVEL", "GOB_SEED", "GOB_CG_REL_TOL"):
            monkeypatch.delenv(key, raising=False)
        assert get_output_dir() == "results"
        assert get_log_level() == "INFO"
        assert get_default_seed() == 0
        assert get_cg_rel_tol() == pytest.approx(1e-6)

    def test_overrides(self, monkeypatch):
        monkeypatch.setenv("GOB_OUTPUT_DIR", "/tmp/gob")
        monkeypatch.setenv("GOB_LOG_LEVEL", "debug")
        monkeypatch.setenv("GOB_SEED", "7")
        monkeypatch.setenv("GOB_CG_REL_TOL", "1e-9")
        assert get_output_dir() == "/tmp/gob"
        assert get_log_level() == "DEBUG"
        assert get_default_seed() == 7
        assert get_cg_rel_tol() == pytest.approx(1e-9)
        config = build_experiment_config({})
        assert config.seeds == [7, 8, 9]
        assert config.policies[0].cg_rel_tol == pytest.approx(1e-9)

    @pytest.mark.parametrize("key,value", [
        ("GOB_LOG_LEVEL", "LOUD"),
        ("GOB_SEED", "abc"),
        ("GOB_SEED", "-1"),
        ("GOB_CG_REL_TOL", "0"),
        ("GOB_CG_REL_TOL", "x"),
    ])
    def test_invalid_values(self, monkeypatch, key, value):
        monkeypatch.setenv(key, value)
        getter = {"GOB_LOG_LEVEL": get_log_level, "GOB_SEED": get_default_seed,
                  "GOB_CG_REL_TOL": get_cg_rel_tol}[key]
        with pytest.raises(ConfigError, match=key):
            getter()


class TestExperimentConfig:

    def test_defaults_validate(self):
        config = load_experiment_config(None)
        assert config.environment.n == 128
        assert config.policies[0].kind == "G-TS"
        assert config.validation_prefix < config.rounds

    def test_loads_example_file(self):
        config = load_experiment_config(Path(__file__).parent.parent / "configs" / "example.toml")
        kinds = [spec.kind for spec in config.policies]
        assert "G-TS" in kinds and "L-EG" in kinds
        assert config.environment.n == 128

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_experiment_config(tmp_path / "nope.toml")

    def test_bad_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("rounds = = 3\n")
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    @pytest.mark.parametrize("data,fragment", [
        ({"rounds": 10, "validation_prefix": 10}, "validation_prefix"),
        ({"seeds": []}, "seeds"),
        ({"unknown": 1}, "unknown"),
        ({"environment": {"n": 100}}, "power of two"),
        ({"policies": [{"kind": "NOPE"}]}, "kind"),
        ({"policies": [{"kind": "G-TS"}, {"kind": "G-TS"}]}, "unique"),
        ({"policies": [{"kind": "G-TS", "tune": {"cg_max_iters": [1]}}]}, "not tunable"),
        ({"policies": [{"kind": "G-TS", "reshape": 2.0}]}, "reshape"),
    ])
    def test_invalid_configs_name_the_field(self, data, fragment):
        with pytest.raises(ConfigError, match=fragment):
            build_experiment_config(data)

    def test_named_duplicates_allowed(self):
        config = build_experiment_config({"policies": [{"kind": "G-TS"}, {"kind": "G-TS", "name": "G-TS/big",
                                                                          "reshape": 0.5}]})
        assert [spec.label for spec in config.policies] == ["G-TS", "G-TS/big"]

    def test_file_graph_needs_path(self):
        with pytest.raises(ConfigError, match="graph_file"):
            build_experiment_config({"environment": {"graph": "file"}})

    def test_dataset_dir_defaults_to_data_root(self, monkeypatch):
        monkeypatch.setenv("GOB_DATA_DIR", "/data")
        env = EnvironmentConfig(kind="dataset", layout="delicious")
        assert env.data_dir == "/data/delicious"

    def test_learning_mode_follows_kind(self):
        config = build_experiment_config({"policies": [{"kind": "U-EG"}]})
        assert config.policies[0].learn.mode == "U-EG"


class TestOverrides:

    def test_seed_rounds_and_output(self):
        config = build_experiment_config({"rounds": 100, "validation_prefix": 50, "seeds": [0, 1]})
        updated = apply_overrides(config, seed=4, rounds=30, output_dir="elsewhere")
        assert updated.seeds == [4]
        assert updated.rounds == 30
        assert updated.validation_prefix == 29
        assert updated.output_dir == "elsewhere"

    def test_policy_override_keeps_file_hyperparameters(self):
        config = build_experiment_config({"policies": [{"kind": "G-TS", "reshape": 0.3, "lambda": 0.5}]})
        updated = apply_overrides(config, policies=["G-TS", "TS-IND"])
        assert [spec.kind for spec in updated.policies] == ["G-TS", "TS-IND"]
        assert updated.policies[0].reshape == pytest.approx(0.3)
        assert updated.policies[0].lam == pytest.approx(0.5)
        assert updated.policies[1].reshape == pytest.approx(0.01)

    def test_unknown_policy_override(self):
        with pytest.raises(ConfigError):
            apply_overrides(build_experiment_config({}), policies=["BOGUS"])

    def test_parse_policy_list(self):
        assert parse_policy_list(" G-TS, TS-IND ,") == ("G-TS", "TS-IND")
        with pytest.raises(ConfigError):
            parse_policy_list(" , ")
