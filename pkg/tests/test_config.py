import pytest

from elimsurvey.config import DEFAULTS, ConfigError, load_config
from elimsurvey.fit import FitConfig


def write_cfg(tmp_path, text, name="run.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLayering:
    def test_defaults_plus_seed(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, "seed: 7\n"))
        assert cfg.seed == 7
        assert cfg.workers == 1
        assert cfg.grid_spacing == 2.0
        params = cfg.model_params()
        assert params.mu == DEFAULTS["model"]["mu"]
        assert params.corr.family == "exponential"

    def test_file_overrides_default(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, "seed: 7\nmodel:\n  mu: -2.5\n"))
        assert cfg.model_params().mu == -2.5
        # untouched siblings keep their defaults
        assert cfg.model_params().sigma2 == DEFAULTS["model"]["sigma2"]

    def test_flag_overrides_file(self, tmp_path):
        path = write_cfg(tmp_path, "seed: 7\nworkers: 2\n")
        cfg = load_config(path, {"seed": 99, "workers": 5})
        assert cfg.seed == 99
        assert cfg.workers == 5

    def test_none_flags_do_not_override(self, tmp_path):
        path = write_cfg(tmp_path, "seed: 7\nworkers: 2\n")
        cfg = load_config(path, {"seed": None, "workers": None, "out_dir": None})
        assert cfg.seed == 7
        assert cfg.workers == 2

    def test_no_file_runs_on_defaults(self):
        cfg = load_config(None, {"seed": 3})
        assert cfg.seed == 3
        assert cfg.source is None


class TestValidation:
    def test_seed_is_mandatory(self, tmp_path):
        with pytest.raises(ConfigError, match="never seeded from the clock"):
            load_config(write_cfg(tmp_path, "workers: 2\n"))

    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown configuration key 'bogus'"):
            load_config(write_cfg(tmp_path, "seed: 1\nbogus: 2\n"))

    def test_unknown_nested_key_is_dotted(self, tmp_path):
        with pytest.raises(ConfigError, match="'fit.bogus'") as err:
            load_config(write_cfg(tmp_path, "seed: 1\nfit:\n  bogus: 2\n"))
        assert err.value.key == "fit.bogus"

    def test_section_must_be_mapping(self, tmp_path):
        with pytest.raises(ConfigError, match="must be a mapping"):
            load_config(write_cfg(tmp_path, "seed: 1\nfit: 3\n"))

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(tmp_path / "absent.yaml")

    def test_workers_must_be_positive(self, tmp_path):
        with pytest.raises(ConfigError, match="workers"):
            load_config(write_cfg(tmp_path, "seed: 1\nworkers: 0\n"))

    def test_unsupported_override_key(self, tmp_path):
        with pytest.raises(ConfigError, match="unsupported overrides"):
            load_config(write_cfg(tmp_path, "seed: 1\n"), {"spacing": 4})

    def test_projection_needs_both_coordinates(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, "seed: 1\nprojection:\n  lon0: -58.0\n"))
        with pytest.raises(ConfigError, match="both lon0 and lat0"):
            cfg.projection_origin()

    def test_fixed_limited_to_correlation_parameters(self, tmp_path):
        cfg = load_config(write_cfg(
            tmp_path, "seed: 1\nfit:\n  fixed:\n    mu: -4.0\n"))
        with pytest.raises(ConfigError, match="sigma2 and phi"):
            cfg.fit_fixed()


class TestPaths:
    def test_input_paths_resolve_against_config_dir(self, tmp_path):
        (tmp_path / "data").mkdir()
        gaz = tmp_path / "data" / "g.csv"
        gaz.write_text("id,name,lon,lat,population,inhabited,eu_id\n")
        cfg = load_config(write_cfg(
            tmp_path, "seed: 1\npaths:\n  gazette: data/g.csv\n"))
        assert cfg.path("gazette") == gaz

    def test_missing_input_file_is_an_error(self, tmp_path):
        with pytest.raises(ConfigError, match=r"paths\.gazette.*does not exist"):
            load_config(write_cfg(
                tmp_path, "seed: 1\npaths:\n  gazette: nope.csv\n"))

    def test_unconfigured_path_raises_on_access(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, "seed: 1\n"))
        assert not cfg.has_path("gazette")
        with pytest.raises(ConfigError, match="paths.gazette"):
            cfg.path("gazette")

    def test_relative_out_dir_follows_config_file(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, "seed: 1\n"))
        assert cfg.out_dir == tmp_path / "out"

    def test_out_dir_flag_wins_verbatim(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, "seed: 1\n"),
                          {"out_dir": "elsewhere"})
        assert str(cfg.out_dir) == "elsewhere"


class TestDerivedObjects:
    def test_fit_config_carries_seed(self, tmp_path):
        cfg = load_config(write_cfg(
            tmp_path,
            "seed: 1\nfit:\n  mc_samples: 1234\n  burn_in: 100\n  thin: 2\n"))
        fc = cfg.fit_config(seed=42)
        assert fc == FitConfig(mc_samples=1234, burn_in=100, thin=2,
                               relaxation_cycles=3, seed=42)

    def test_refit_config_reads_evaluate_section(self, tmp_path):
        cfg = load_config(write_cfg(
            tmp_path, "seed: 1\nevaluate:\n  fit:\n    mc_samples: 888\n"))
        assert cfg.refit_config().mc_samples == 888

    def test_design_spec(self, tmp_path):
        cfg = load_config(write_cfg(
            tmp_path, "seed: 1\ndesign:\n  k: 5\n  delta_min: 3.5\n"))
        spec = cfg.design_spec(seed=9)
        assert spec.k == 5 and spec.delta_min == 3.5 and spec.seed == 9

    def test_section_returns_a_copy(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, "seed: 1\n"))
        cfg.section("model")["mu"] = 0.0
        assert cfg.model_params().mu == DEFAULTS["model"]["mu"]


class TestHash:
    def test_hash_ignores_workers_and_out_dir(self, tmp_path):
        path = write_cfg(tmp_path, "seed: 1\n")
        a = load_config(path, {"workers": 1, "out_dir": str(tmp_path / "a")})
        b = load_config(path, {"workers": 8, "out_dir": str(tmp_path / "b")})
        assert a.sha256 == b.sha256

    def test_hash_tracks_settings(self, tmp_path):
        a = load_config(write_cfg(tmp_path, "seed: 1\n", "a.yaml"))
        b = load_config(write_cfg(tmp_path, "seed: 2\n", "b.yaml"))
        assert a.sha256 != b.sha256
