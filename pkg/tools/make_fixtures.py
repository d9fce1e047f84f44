"""Generate the bundled desk-scale fixture set under fixtures/.

A synthetic coastal region: three evaluation-unit strips over a 40 x 40 km
box, ~90 candidate settlements, a survey at 42 of them simulated from known
parameters, and a smooth population raster.  Everything is deterministic
given the seeds below.
"""

import json
from pathlib import Path

import numpy as np

from elimsurvey.geodata import (
    EquirectangularProjection,
    Raster,
    write_ascii_grid,
    write_gazette,
    write_prevalence,
)
from elimsurvey.geodata import PrevalenceRecord, SiteRecord
from elimsurvey.gpfield import ModelParams, simulate_field
from elimsurvey.corrfun import CorrelationSpec
from elimsurvey.streams import stream

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

LON0, LAT0 = -58.5, 6.0
PROJ = EquirectangularProjection(lon0=LON0, lat0=LAT0)
BOX = 20.0  # planar half-width, km
STRIPS = {"west": (-20.0, -6.0), "central": (-6.0, 7.0), "east": (7.0, 20.0)}

TRUTH = ModelParams(mu=-3.5, sigma2=1.2,
                    corr=CorrelationSpec("exponential", phi=5.0))

SEED = 977201


def make_gazette():
    rng = stream(SEED, "gazette")
    sites = []
    i = 0
    for eu_id, (x_lo, x_hi) in STRIPS.items():
        for _ in range(30):
            x = float(rng.uniform(x_lo + 0.8, x_hi - 0.8))
            y = float(rng.uniform(-BOX + 0.8, BOX - 0.8))
            lon, lat = PROJ.inverse(x, y)
            population = int(np.clip(np.exp(rng.normal(6.0, 0.7)), 50, 5000))
            sites.append(SiteRecord(
                id=f"site_{i:03d}", name=f"settlement {i}", lon=float(lon),
                lat=float(lat), x=x, y=y, population=population,
                inhabited=True, eu_id=eu_id))
            i += 1
    # a few abandoned entries stay listed but are not survey candidates
    ghost = stream(SEED, "ghost-picks")
    for j in sorted(ghost.choice(len(sites), size=4, replace=False)):
        s = sites[j]
        sites[j] = SiteRecord(id=s.id, name=s.name, lon=s.lon, lat=s.lat,
                              x=s.x, y=s.y, population=0, inhabited=False,
                              eu_id=s.eu_id)
    write_gazette(FIXTURES / "gazette.csv", sites)
    return sites


def make_eus():
    features = []
    for eu_id, (x_lo, x_hi) in STRIPS.items():
        ring = []
        for x, y in [(x_lo, -BOX), (x_hi, -BOX), (x_hi, BOX), (x_lo, BOX),
                     (x_lo, -BOX)]:
            lon, lat = PROJ.inverse(x, y)
            ring.append([float(lon), float(lat)])
        features.append({
            "type": "Feature",
            "properties": {"eu_id": eu_id, "name": f"{eu_id} strip"},
            "geometry": {"type": "Polygon", "coordinates": [ring]},
        })
    doc = {"type": "FeatureCollection", "features": features}
    with open(FIXTURES / "eus.geojson", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def make_prevalence(sites):
    rng = stream(SEED, "survey-picks")
    chosen = []
    for eu_id in STRIPS:
        pool = [s for s in sites if s.eu_id == eu_id and s.inhabited]
        idx = sorted(rng.choice(len(pool), size=14, replace=False))
        chosen.extend(pool[j] for j in idx)
    points = np.array([[s.x, s.y] for s in chosen])
    real = simulate_field(TRUTH, points, seed=SEED + 1)
    draws = stream(SEED, "survey-counts")
    records = []
    for s, p in zip(chosen, real.p_values):
        n = int(draws.integers(80, 151))
        y = int(draws.binomial(n, p))
        records.append(PrevalenceRecord(lon=s.lon, lat=s.lat, x=s.x, y=s.y,
                                        n_tested=n, n_positive=y,
                                        year=int(draws.integers(2024, 2027))))
    write_prevalence(FIXTURES / "prevalence.csv", records)
    return records


def make_population():
    n = 20
    centres = -BOX + (np.arange(n) + 0.5) * 2.0
    xg, yg = np.meshgrid(centres, centres)
    pd = (5.0
          + 60.0 * np.exp(-((xg - 5.0) ** 2 + (yg + 3.0) ** 2) / 200.0)
          + 40.0 * np.exp(-((xg + 12.0) ** 2 + (yg - 10.0) ** 2) / 150.0))
    raster = Raster(values=pd[::-1, :], xll=-BOX, yll=-BOX, cellsize=2.0,
                    nodata=-9999.0)
    write_ascii_grid(FIXTURES / "population.asc", raster, fmt="%.6f")


CONFIG = """\
seed: 20260819
crs: geographic
projection:
  lon0: -58.5
  lat0: 6.0
paths:
  gazette: gazette.csv
  prevalence: prevalence.csv
  raster: population.asc
  eus: eus.geojson
  out_dir: out
grid:
  spacing: 2.0
model:
  family: exponential
  kappa: 0.5
  nugget: 0.0
  mu: -3.0
  sigma2: 0.8
  phi: 4.0
fit:
  mc_samples: 4000
  burn_in: 800
  thin: 4
  relaxation_cycles: 2
  fixed: {}
  profile_points: 11
  profile_halfwidth: 1.2
design:
  k: 4
  m: 60
  delta_min: 4.0
  n_reserve: 2
predict:
  threshold: 0.01
  q_cut: 0.95
  q_rule: at_least
  n_draws: 400
evaluate:
  n_replicates: 24
  target_mean_prev: 0.01
  threshold: 0.01
  q_cut: 0.95
  q_rule: at_least
  refit_mode: fixed_corr
  n_pred_draws: 100
  shift_weighting: areal
  ks: [3]
  ms: [60]
  fit:
    mc_samples: 1500
    burn_in: 400
    thin: 2
    relaxation_cycles: 1
simulate:
  ranges: [0.15, 0.3]
  n: 50
"""


def main():
    FIXTURES.mkdir(exist_ok=True)
    sites = make_gazette()
    make_eus()
    records = make_prevalence(sites)
    make_population()
    (FIXTURES / "config.yaml").write_text(CONFIG)
    total = sum(r.n_tested for r in records)
    pos = sum(r.n_positive for r in records)
    print(f"gazette: {len(sites)} sites; survey: {len(records)} sites, "
          f"{pos}/{total} positive; truth mu={TRUTH.mu} sigma2={TRUTH.sigma2} "
          f"phi={TRUTH.phi}")


if __name__ == "__main__":
    main()
