"""Command-line pipeline: fit, predict, design, evaluate, simulate.

Each subcommand reads one YAML configuration, writes its artifacts plus a
manifest into the output directory, and reports failures as JSON-lines
records on stderr.  Exit codes: 0 success, 2 configuration or input error,
3 prediction-domain error, 4 design infeasibility, 5 evaluation abort.
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .design import DesignError, DesignSpec, InfeasibleDesignError, design_regularity_score, stratified_design
from .evaluate import EvalConfig, EvalError, npv_table, shift_intercept
from .fit import FitError, mcml_fit, profile_deviance
from .geodata import (
    GeodataError,
    build_grid,
    design_to_geojson,
    grid_raster,
    load_eus,
    load_gazette,
    load_prevalence,
    make_projection,
    read_ascii_grid,
    write_ascii_grid,
)
from .gpfield import FieldError, ModelParams, figure2_demo, realisation_to_csv, curve_to_csv
from .predict import PredictError, classify_units, predict_surface, write_decisions, write_t_samples
from .streams import substream_seed

EXIT_CONFIG = 2
EXIT_PREDICT = 3
EXIT_DESIGN = 4
EXIT_EVALUATE = 5


def _fail(category: str, exit_code: int, message: str, key=None):
    record = {"error": category, "exit_code": exit_code, "message": message}
    if key:
        record["key"] = key
    click.echo(json.dumps(record, sort_keys=True), err=True)
    sys.exit(exit_code)


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs, modes):
    """Reproduction record: settings hash, seed, and versions.

    Worker counts and timestamps are deliberately absent; outputs must be
    byte-identical regardless of either.
    """
    import matplotlib
    import scipy

    manifest = {
        "command": command,
        "config_sha256": cfg.sha256,
        "seed": cfg.seed,
        "modes": modes,
        "outputs": sorted(outputs),
        "versions": {
            "elimsurvey": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__,
        },
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_run_config(config_path, seed, workers, out_dir) -> RunConfig:
    try:
        return load_config(config_path, {"seed": seed, "workers": workers,
                                         "out_dir": out_dir})
    except ConfigError as exc:
        _fail("config", EXIT_CONFIG, str(exc), exc.key)


def _explicit_projection(cfg: RunConfig):
    """Projection pinned in the configuration, or None to derive from data."""
    origin = cfg.projection_origin()
    if cfg.crs == "planar":
        return make_projection("planar")
    if origin is None:
        return None
    return make_projection(cfg.crs, lon0=origin[0], lat0=origin[1])


def _require_projection(cfg: RunConfig):
    proj = _explicit_projection(cfg)
    if proj is None:
        raise ConfigError(
            "this command reads no point data it could derive a projection "
            "from; set projection.lon0/lat0 (or crs: planar)", key="projection")
    return proj


def _params_from_csv(path: Path, template: ModelParams) -> ModelParams:
    """Model parameters from a fitted parameter table, on the template's correlation family."""
    from dataclasses import replace
    import csv as _csv

    values = {}
    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "parameter":
            raise ConfigError(f"{path}: expected a fitted parameter table", key="params_csv")
        for row in reader:
            values[row[0]] = float(row[1])
    for name in ("mu", "sigma2", "phi"):
        if name not in values:
            raise ConfigError(f"{path}: parameter table lacks {name!r}", key="params_csv")
    corr = replace(template.corr, phi=values["phi"])
    return replace(template, mu=values["mu"], sigma2=values["sigma2"], corr=corr)


def _grid_for(cfg: RunConfig, projection):
    eus = load_eus(cfg.path("eus"), projection)
    raster = read_ascii_grid(cfg.path("raster")) if cfg.has_path("raster") else None
    bounds = None
    for eu in eus:
        b = eu.geometry.bounds
        bounds = b if bounds is None else (
            min(bounds[0], b[0]), min(bounds[1], b[1]),
            max(bounds[2], b[2]), max(bounds[3], b[3]))
    return build_grid(bounds, cfg.grid_spacing, raster=raster, eus=eus)


@click.group()
def main():
    """Design and analyse prevalence surveys for elimination decisions."""


_shared = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="YAML run configuration."),
    click.option("--seed", type=int, default=None, help="Master seed override."),
    click.option("--workers", type=int, default=None, help="Worker processes."),
    click.option("--out-dir", type=click.Path(), default=None,
                 help="Output directory override."),
]


def shared_options(fn):
    for opt in reversed(_shared):
        fn = opt(fn)
    return fn


@main.command()
@shared_options
def fit(config_path, seed, workers, out_dir):
    """Fit the spatial model to the prevalence data."""
    cfg = _load_run_config(config_path, seed, workers, out_dir)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    try:
        records, _ = load_prevalence(cfg.path("prevalence"),
                                     projection=_explicit_projection(cfg), crs=cfg.crs)
        if not records:
            raise GeodataError("prevalence file contains no records")
        fixed = cfg.fit_fixed() or None
        fit_cfg = cfg.fit_config(seed=substream_seed(cfg.seed, "fit"))
        result = mcml_fit(records, cfg.model_params(), fit_cfg, fixed=fixed)

        result.write_csv(out / "parameters.csv")
        result.write_report(out / "fit_report.txt")
        with open(out / "diagnostics.json", "w") as fh:
            json.dump({"mc_stderr": result.mc_stderr, **result.diagnostics},
                      fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")

        section = cfg.section("fit")
        n_pts = int(section["profile_points"])
        half = float(section["profile_halfwidth"])
        profiles = {}
        for name, value, _lo, _hi, status in result.parameter_rows():
            if status != "estimated":
                continue
            if name in ("sigma2", "phi"):
                grid = np.exp(np.linspace(math.log(value) - half,
                                          math.log(value) + half, n_pts))
            else:
                grid = np.linspace(value - half, value + half, n_pts)
            profiles[name] = profile_deviance(records, result, name, grid)
        with open(out / "profiles.csv", "w", newline="") as fh:
            import csv as _csv
            writer = _csv.writer(fh)
            writer.writerow(["parameter", "value", "rel_loglik"])
            for name, pairs in profiles.items():
                for v, d in pairs:
                    writer.writerow([name, repr(v), repr(d)])
        from .plots import plot_profiles
        plot_profiles(profiles, out / "fit_profiles.png")
    except (ConfigError, GeodataError, FitError, OSError) as exc:
        _fail("fit", EXIT_CONFIG, str(exc), getattr(exc, "key", None))

    outputs = ["parameters.csv", "fit_report.txt", "diagnostics.json",
               "profiles.csv", "fit_profiles.png"]
    _write_manifest(out, "fit", cfg, outputs,
                    {"fixed": sorted(fixed) if fixed else [],
                     "fit_mode": result.diagnostics.get("mode", "mcml")})
    click.echo(f"fit: wrote {len(outputs)} files to {out}")


@main.command()
@shared_options
def predict(config_path, seed, workers, out_dir):
    """Predict exceedance probabilities and decide each evaluation unit."""
    cfg = _load_run_config(config_path, seed, workers, out_dir)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    section = cfg.section("predict")
    try:
        if cfg.has_path("prevalence"):
            records, proj = load_prevalence(cfg.path("prevalence"),
                                            projection=_explicit_projection(cfg),
                                            crs=cfg.crs)
        else:
            records, proj = [], _require_projection(cfg)
        grid = _grid_for(cfg, proj)

        params = cfg.model_params()
        if section["params_csv"] is not None:
            params = _params_from_csv(Path(section["params_csv"]), params)

        surface = predict_surface(records, params, grid,
                                  n_draws=int(section["n_draws"]),
                                  seed=substream_seed(cfg.seed, "predict"))
        results = classify_units(surface, threshold=float(section["threshold"]),
                                 q_cut=float(section["q_cut"]),
                                 q_rule=str(section["q_rule"]))
        write_decisions(results, out / "eu_decisions.csv")
        write_t_samples(results, out / "t_samples.csv")
        write_ascii_grid(out / "prevalence_mean.asc", grid_raster(grid, surface.mean()))
        write_ascii_grid(out / "prevalence_sd.asc", grid_raster(grid, surface.sd()))
        from .plots import plot_surface_maps
        plot_surface_maps(grid, surface.mean(), surface.sd(), out / "prevalence_maps.png")
    except PredictError as exc:
        _fail("predict", EXIT_PREDICT, str(exc))
    except GeodataError as exc:
        code = EXIT_PREDICT if "population mass" in str(exc) else EXIT_CONFIG
        _fail("predict", code, str(exc))
    except (ConfigError, FitError, FieldError, OSError) as exc:
        _fail("predict", EXIT_CONFIG, str(exc), getattr(exc, "key", None))

    outputs = ["eu_decisions.csv", "t_samples.csv", "prevalence_mean.asc",
               "prevalence_sd.asc", "prevalence_maps.png"]
    _write_manifest(out, "predict", cfg, outputs,
                    {"conditional": bool(records),
                     "threshold": float(section["threshold"]),
                     "q_rule": str(section["q_rule"])})
    click.echo(f"predict: wrote {len(outputs)} files to {out}")


@main.command()
@shared_options
def design(config_path, seed, workers, out_dir):
    """Draw a spatially regulated stratified sampling design."""
    cfg = _load_run_config(config_path, seed, workers, out_dir)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    try:
        sites, _ = load_gazette(cfg.path("gazette"),
                                projection=_explicit_projection(cfg), crs=cfg.crs)
        spec = cfg.design_spec(seed=substream_seed(cfg.seed, "design"))
        result = stratified_design(sites, spec)

        result.write_csv(out / "design.csv")
        with open(out / "design.geojson", "w") as fh:
            json.dump(design_to_geojson(result), fh, indent=2, sort_keys=True)
            fh.write("\n")
        scores = design_regularity_score(result, sites,
                                         seed=substream_seed(cfg.seed, "design-regularity"))
        with open(out / "regularity.csv", "w", newline="") as fh:
            import csv as _csv
            writer = _csv.writer(fh)
            writer.writerow(["eu_id", "min_nn", "mean_nn", "srs_min_nn", "srs_mean_nn"])
            for eu_id in sorted(scores):
                s = scores[eu_id]
                writer.writerow([eu_id, repr(s["min_nn"]), repr(s["mean_nn"]),
                                 repr(s["srs_min_nn"]), repr(s["srs_mean_nn"])])
        from .plots import plot_design_map
        plot_design_map(result, sites, out / "design_map.png")
    except InfeasibleDesignError as exc:
        _fail("design", EXIT_DESIGN, str(exc))
    except (ConfigError, GeodataError, DesignError, OSError) as exc:
        _fail("design", EXIT_CONFIG, str(exc), getattr(exc, "key", None))

    outputs = ["design.csv", "design.geojson", "regularity.csv", "design_map.png"]
    _write_manifest(out, "design", cfg, outputs,
                    {"k": spec.k, "m": spec.m, "delta_min": spec.delta_min,
                     "notes": list(result.notes)})
    click.echo(f"design: wrote {len(outputs)} files to {out}")


@main.command()
@shared_options
def evaluate(config_path, seed, workers, out_dir):
    """Estimate a design family's predictive values by simulation."""
    cfg = _load_run_config(config_path, seed, workers, out_dir)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    section = cfg.section("evaluate")
    try:
        sites, proj = load_gazette(cfg.path("gazette"),
                                   projection=_explicit_projection(cfg), crs=cfg.crs)
        grid = _grid_for(cfg, proj)

        params = cfg.model_params()
        if section["params_csv"] is not None:
            params = _params_from_csv(Path(section["params_csv"]), params)
        shifted, delta = shift_intercept(
            params, grid, float(section["target_mean_prev"]),
            weighting=str(section["shift_weighting"]),
            seed=substream_seed(cfg.seed, "shift"))

        d = cfg.section("design")
        designs = {}
        for k in section["ks"]:
            for m in section["ms"]:
                spec = DesignSpec(k=int(k), m=int(m),
                                  delta_min=float(d["delta_min"]),
                                  n_reserve=int(d["n_reserve"]),
                                  seed=substream_seed(cfg.seed, "design-k", int(k)))
                designs[(int(k), int(m))] = stratified_design(sites, spec)

        ev_cfg = EvalConfig(
            grid=grid,
            n_replicates=int(section["n_replicates"]),
            target_mean_prev=float(section["target_mean_prev"]),
            threshold=float(section["threshold"]),
            q_cut=float(section["q_cut"]),
            q_rule=str(section["q_rule"]),
            refit_mode=str(section["refit_mode"]),
            n_pred_draws=int(section["n_pred_draws"]),
            fit_config=cfg.refit_config(),
            seed=substream_seed(cfg.seed, "evaluate"),
        )
        table = npv_table(designs, shifted, ev_cfg, workers=cfg.workers)

        table.write_csv(out / "npv_table.csv")
        replicate_files = [p.name for p in table.write_replicates(out)]
        from .plots import plot_npv_curves
        plot_npv_curves(table, out / "npv_curves.png")
    except InfeasibleDesignError as exc:
        _fail("evaluate", EXIT_DESIGN, str(exc))
    except EvalError as exc:
        _fail("evaluate", EXIT_EVALUATE, str(exc))
    except (ConfigError, GeodataError, DesignError, FitError, OSError) as exc:
        _fail("evaluate", EXIT_CONFIG, str(exc), getattr(exc, "key", None))

    outputs = ["npv_table.csv", "npv_curves.png"] + replicate_files
    _write_manifest(out, "evaluate", cfg, outputs,
                    {"refit_mode": str(section["refit_mode"]),
                     "shift_weighting": str(section["shift_weighting"]),
                     "intercept_shift": delta,
                     "shifted_mu": shifted.mu,
                     "ks": [int(k) for k in section["ks"]],
                     "ms": [int(m) for m in section["ms"]]})
    click.echo(f"evaluate: wrote {len(outputs)} files to {out}")


@main.command()
@shared_options
def simulate(config_path, seed, workers, out_dir):
    """Dump demonstration field realisations and their correlation curves."""
    cfg = _load_run_config(config_path, seed, workers, out_dir)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    section = cfg.section("simulate")
    try:
        panels = figure2_demo(substream_seed(cfg.seed, "simulate"),
                              ranges=tuple(float(r) for r in section["ranges"]),
                              n=int(section["n"]))
        outputs = []
        for panel in panels:
            field_name = f"field_{panel.label}.csv"
            curve_name = f"curve_{panel.label}.csv"
            realisation_to_csv(out / field_name, panel.realisation)
            curve_to_csv(out / curve_name, panel.curve_u, panel.curve_rho)
            outputs += [field_name, curve_name]
        from .plots import plot_field_panels
        plot_field_panels(panels, out / "simulate_panels.png")
        outputs.append("simulate_panels.png")
    except (ConfigError, ValueError, FieldError, OSError) as exc:
        _fail("simulate", EXIT_CONFIG, str(exc), getattr(exc, "key", None))

    _write_manifest(out, "simulate", cfg, outputs,
                    {"ranges": [float(r) for r in section["ranges"]],
                     "n": int(section["n"])})
    click.echo(f"simulate: wrote {len(outputs)} files to {out}")


if __name__ == "__main__":
    main()
