"""Layered run configuration: defaults, a YAML file, then flag overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .corrfun import CorrelationSpec
from .design import DesignSpec
from .fit import FitConfig
from .gpfield import ModelParams

DEFAULTS = {
    "seed": None,  # mandatory, from file or flag
    "workers": 1,
    "crs": "geographic",
    "projection": {"lon0": None, "lat0": None},
    "paths": {
        "gazette": None,
        "prevalence": None,
        "raster": None,
        "eus": None,
        "out_dir": "out",
    },
    "grid": {"spacing": 2.0},
    "model": {
        "family": "exponential",
        "kappa": 0.5,
        "nugget": 0.0,
        "phi": 1.0,
        "mu": -4.6,
        "sigma2": 1.0,
    },
    "fit": {
        "mc_samples": 10000,
        "burn_in": 2000,
        "thin": 8,
        "relaxation_cycles": 3,
        "fixed": {},
        "profile_points": 15,
        "profile_halfwidth": 1.5,
    },
    "design": {
        "k": 10,
        "m": 100,
        "delta_min": 2.0,
        "n_reserve": 2,
    },
    "predict": {
        "threshold": 0.01,
        "q_cut": 0.95,
        "q_rule": "at_least",
        "n_draws": 1000,
        "params_csv": None,
    },
    "evaluate": {
        "n_replicates": 200,
        "target_mean_prev": 0.01,
        "threshold": 0.01,
        "q_cut": 0.95,
        "q_rule": "at_least",
        "refit_mode": "full_mcml",
        "n_pred_draws": 200,
        "shift_weighting": "areal",
        "ks": [10],
        "ms": [100],
        "params_csv": None,
        "fit": {
            "mc_samples": 2000,
            "burn_in": 500,
            "thin": 2,
            "relaxation_cycles": 1,
        },
    },
    "simulate": {
        "ranges": [0.15, 0.3],
        "n": 50,
    },
}

# keys whose values name input files that must exist when configured
_INPUT_PATH_KEYS = ("gazette", "prevalence", "raster", "eus")


class ConfigError(ValueError):
    """Bad or missing configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def _merge(defaults: dict, given: dict, prefix: str = "") -> dict:
    """Defaults overridden by given values; unknown keys are an error."""
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown configuration key '{dotted}'", key=dotted)
        if isinstance(defaults[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"'{dotted}' must be a mapping", key=dotted)
        if isinstance(defaults[key], dict) and key != "fixed":
            out[key] = _merge(defaults[key], value, prefix=f"{dotted}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class RunConfig:
    """Effective settings for one command run, resolved and hashed.

    ``mapping`` is the merged configuration after flag overrides; ``sha256``
    is the hash of its canonical JSON form, recorded in manifests so reruns
    can prove they used the same settings.
    """

    mapping: dict
    source: Path | None
    sha256: str

    @property
    def seed(self) -> int:
        return int(self.mapping["seed"])

    @property
    def workers(self) -> int:
        return int(self.mapping["workers"])

    @property
    def out_dir(self) -> Path:
        return Path(self.mapping["paths"]["out_dir"])

    def path(self, key: str) -> Path:
        value = self.mapping["paths"].get(key)
        if value is None:
            raise ConfigError(f"configuration needs 'paths.{key}'", key=f"paths.{key}")
        return Path(value)

    def has_path(self, key: str) -> bool:
        return self.mapping["paths"].get(key) is not None

    def projection_origin(self):
        lon0 = self.mapping["projection"]["lon0"]
        lat0 = self.mapping["projection"]["lat0"]
        if (lon0 is None) != (lat0 is None):
            raise ConfigError("projection needs both lon0 and lat0", key="projection")
        if lon0 is None:
            return None
        return float(lon0), float(lat0)

    @property
    def crs(self) -> str:
        return str(self.mapping["crs"])

    @property
    def grid_spacing(self) -> float:
        return float(self.mapping["grid"]["spacing"])

    def model_params(self) -> ModelParams:
        m = self.mapping["model"]
        try:
            corr = CorrelationSpec(family=m["family"], phi=float(m["phi"]),
                                   kappa=float(m["kappa"]), nugget=float(m["nugget"]))
            return ModelParams(mu=float(m["mu"]), sigma2=float(m["sigma2"]), corr=corr)
        except ValueError as exc:
            raise ConfigError(f"bad model section: {exc}", key="model") from exc

    def _fit_config(self, section: dict, seed: int) -> FitConfig:
        try:
            return FitConfig(
                mc_samples=int(section["mc_samples"]),
                burn_in=int(section["burn_in"]),
                thin=int(section["thin"]),
                relaxation_cycles=int(section["relaxation_cycles"]),
                seed=seed,
            )
        except ValueError as exc:
            raise ConfigError(f"bad fit section: {exc}", key="fit") from exc

    def fit_config(self, seed: int) -> FitConfig:
        return self._fit_config(self.mapping["fit"], seed)

    def refit_config(self) -> FitConfig:
        return self._fit_config(self.mapping["evaluate"]["fit"], 0)

    def fit_fixed(self) -> dict:
        fixed = self.mapping["fit"]["fixed"] or {}
        extra = set(fixed) - {"sigma2", "phi"}
        if extra:
            raise ConfigError(f"fit.fixed supports sigma2 and phi, got {sorted(extra)}",
                              key="fit.fixed")
        return {k: float(v) for k, v in fixed.items()}

    def design_spec(self, seed: int) -> DesignSpec:
        d = self.mapping["design"]
        try:
            return DesignSpec(k=int(d["k"]), m=int(d["m"]),
                              delta_min=float(d["delta_min"]),
                              n_reserve=int(d["n_reserve"]), seed=seed)
        except ValueError as exc:
            raise ConfigError(f"bad design section: {exc}", key="design") from exc

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.mapping[name])


def _canonical_sha256(mapping: dict) -> str:
    # workers and the output location steer the run harness, not the results;
    # leave them out so reruns hash identically wherever they write.
    stripped = copy.deepcopy(mapping)
    stripped.pop("workers", None)
    stripped["paths"].pop("out_dir", None)
    payload = json.dumps(stripped, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve the effective configuration.

    Args:
        path: YAML file; None runs on defaults plus overrides.
        overrides: scalar flag values; supported keys are ``seed``,
            ``workers`` and ``out_dir``.  Precedence: flag > file > default.

    Raises:
        ConfigError: unknown keys, missing seed, or configured input files
            that do not exist.
    """
    given = {}
    source = None
    if path is not None:
        source = Path(path)
        if not source.exists():
            raise ConfigError(f"configuration file {source} does not exist", key="config")
        with open(source) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{source}: top level must be a mapping", key="config")
        given = loaded

    mapping = _merge(DEFAULTS, given)

    overrides = overrides or {}
    unknown = set(overrides) - {"seed", "workers", "out_dir"}
    if unknown:
        raise ConfigError(f"unsupported overrides: {sorted(unknown)}", key="overrides")
    if overrides.get("seed") is not None:
        mapping["seed"] = int(overrides["seed"])
    if overrides.get("workers") is not None:
        mapping["workers"] = int(overrides["workers"])
    if overrides.get("out_dir") is not None:
        mapping["paths"]["out_dir"] = str(overrides["out_dir"])

    if mapping["seed"] is None:
        raise ConfigError("a master seed is required (file key 'seed' or --seed); "
                          "runs are never seeded from the clock", key="seed")
    mapping["seed"] = int(mapping["seed"])
    if int(mapping["workers"]) < 1:
        raise ConfigError("workers must be at least 1", key="workers")

    base = source.parent if source is not None else Path(".")
    for key in _INPUT_PATH_KEYS:
        value = mapping["paths"][key]
        if value is None:
            continue
        resolved = Path(value)
        if not resolved.is_absolute():
            resolved = base / resolved
        if not resolved.exists():
            raise ConfigError(f"paths.{key}: file {resolved} does not exist",
                              key=f"paths.{key}")
        mapping["paths"][key] = str(resolved)
    out_value = Path(mapping["paths"]["out_dir"])
    if not out_value.is_absolute() and overrides.get("out_dir") is None:
        mapping["paths"]["out_dir"] = str(base / out_value)

    return RunConfig(mapping=mapping, source=source, sha256=_canonical_sha256(mapping))
