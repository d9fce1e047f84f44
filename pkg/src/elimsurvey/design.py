"""Spatially regulated survey designs: stratified inhibitory sampling.

Each evaluation unit is a stratum.  Within a stratum, sites are drawn by
randomised sequential inhibition: a seeded random permutation of the
candidates is scanned, accepting a site whenever it keeps all pairwise
distances at or above the separation floor, restarting with a fresh
permutation when the scan dies out.  Infeasibility raises an error rather
than quietly relaxing the separation, so constraint changes are always a
conscious decision.

Site selection never sees prevalence data; designs depend only on the site
register and the seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .streams import stream, substream_seed

__all__ = [
    "DesignError",
    "InfeasibleDesignError",
    "DesignSpec",
    "DesignRow",
    "Design",
    "candidate_filter",
    "inhibitory_sample",
    "stratified_design",
    "design_regularity_score",
]

MAX_RESTARTS = 1000
SRS_BASELINE_DRAWS = 200


class DesignError(ValueError):
    """Invalid design request (no candidates, unknown unit, bad spec)."""


class InfeasibleDesignError(DesignError):
    """The separation constraint cannot be met; carries what was achievable."""

    def __init__(self, message, eu_id=None, largest_k=None):
        super().__init__(message)
        self.eu_id = eu_id
        self.largest_k = largest_k


@dataclass(frozen=True)
class DesignSpec:
    """Sampling-effort and regulation knobs for one design.

    ``delta_min`` is the minimum separation between primary sites within an
    evaluation unit, in km.
    """

    k: int
    m: int
    delta_min: float = 2.0
    n_reserve: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.delta_min < 0:
            raise ValueError("delta_min must be nonnegative")
        if self.n_reserve < 0:
            raise ValueError("n_reserve must be nonnegative")


@dataclass(frozen=True)
class DesignRow:
    eu_id: str
    site: object
    target_n: int
    reserve: bool


@dataclass(frozen=True)
class Design:
    """Selected sites per evaluation unit, with feasibility notes."""

    spec: DesignSpec
    _rows: tuple
    notes: tuple = ()

    def rows(self):
        return list(self._rows)

    def sites_in(self, eu_id, include_reserves=False):
        return [
            r.site
            for r in self._rows
            if r.eu_id == eu_id and (include_reserves or not r.reserve)
        ]

    def eu_list(self):
        seen = []
        for r in self._rows:
            if r.eu_id not in seen:
                seen.append(r.eu_id)
        return seen

    def validate(self) -> None:
        """Hard assertion of the design invariants; raises on any breach."""
        for r in self._rows:
            if not r.site.inhabited or r.site.population <= 0:
                raise DesignError(f"uninhabited site {r.site.id} selected")
            if r.target_n > r.site.population:
                raise DesignError(
                    f"site {r.site.id}: target_n {r.target_n} exceeds population"
                )
            if r.target_n != min(self.spec.m, r.site.population):
                raise DesignError(f"site {r.site.id}: target_n mismatch")
        for eu_id in self.eu_list():
            prim = self.sites_in(eu_id)
            for i in range(len(prim)):
                for j in range(i + 1, len(prim)):
                    d = math.hypot(
                        prim[i].x - prim[j].x, prim[i].y - prim[j].y
                    )
                    if d < self.spec.delta_min:
                        raise DesignError(
                            f"evaluation unit {eu_id}: sites {prim[i].id} and "
                            f"{prim[j].id} are {d:.3f} km apart, below "
                            f"delta_min={self.spec.delta_min}"
                        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["eu_id", "site_id", "target_n", "reserve"])
            for r in self._rows:
                writer.writerow(
                    [r.eu_id, r.site.id, r.target_n, "true" if r.reserve else "false"]
                )


def _sorted_by_id(sites):
    return sorted(sites, key=lambda s: str(s.id))


def candidate_filter(sites, m: int):
    """Drop uninhabited sites; keep small ones, flagged.

    Args:
        sites: SiteRecords.
        m: Target individuals per site; populations below it are flagged, not
            excluded (those sites are simply sampled exhaustively).

    Returns:
        (candidates, small_flags): candidates sorted by id, and a mapping
        site id -> True for candidates whose population is below ``m``.

    Raises:
        DesignError: An evaluation unit present in the input loses all of its
            sites to the filter.
    """
    sites = _sorted_by_id(sites)
    eus_seen = {s.eu_id for s in sites if s.eu_id is not None}
    candidates = [s for s in sites if s.inhabited and s.population > 0]
    eus_left = {s.eu_id for s in candidates if s.eu_id is not None}
    lost = sorted(eus_seen - eus_left)
    if lost:
        raise DesignError(
            f"evaluation unit(s) {', '.join(map(str, lost))} have no eligible sites"
        )
    small = {s.id: True for s in candidates if s.population < m}
    return candidates, small


def inhibitory_sample(candidates, k: int, delta_min: float, seed: int,
                      max_restarts: int = MAX_RESTARTS):
    """Draw k sites with all pairwise distances >= delta_min.

    Randomised sequential inhibition with restart: deterministic given the
    seed, and invariant to the input order of ``candidates`` (they are
    canonically sorted by id before permutation).

    Returns:
        List of k selected sites.

    Raises:
        InfeasibleDesignError: No valid configuration found within
            ``max_restarts`` fresh permutations; the message reports the
            largest site count that was achieved.
    """
    candidates = _sorted_by_id(candidates)
    n = len(candidates)
    if k > n:
        raise InfeasibleDesignError(
            f"k={k} exceeds the {n} available candidates", largest_k=n
        )
    xs = np.array([s.x for s in candidates])
    ys = np.array([s.y for s in candidates])
    rng = stream(seed, "inhibitory")
    best = 0
    for _ in range(max_restarts):
        order = rng.permutation(n)
        chosen = []
        for idx in order:
            ok = True
            for j in chosen:
                if math.hypot(xs[idx] - xs[j], ys[idx] - ys[j]) < delta_min:
                    ok = False
                    break
            if ok:
                chosen.append(int(idx))
                if len(chosen) == k:
                    return [candidates[j] for j in chosen]
        best = max(best, len(chosen))
    raise InfeasibleDesignError(
        f"could not place k={k} sites with delta_min={delta_min} after "
        f"{max_restarts} restarts; largest achievable was {best}",
        largest_k=best,
    )


def _reserves_for_eu(remaining, primaries, n_reserve, delta_min, seed):
    """Reserve picks from the leftover candidates, preferring separated ones."""
    remaining = _sorted_by_id(remaining)
    rng = stream(seed, "reserves")
    order = rng.permutation(len(remaining))
    clear, close = [], []
    for idx in order:
        s = remaining[idx]
        if all(
            math.hypot(s.x - p.x, s.y - p.y) >= delta_min for p in primaries
        ):
            clear.append(s)
        else:
            close.append(s)
    picks = clear[:n_reserve]
    flagged = []
    if len(picks) < n_reserve:
        extra = close[: n_reserve - len(picks)]
        picks.extend(extra)
        flagged = [s.id for s in extra]
    return picks, flagged


def stratified_design(sites, spec: DesignSpec, eus=None) -> Design:
    """Independent inhibitory samples per evaluation unit, plus reserves.

    Reserves are drawn after the primaries from the unit's remaining
    candidates.  They respect the separation against the primaries where
    possible; when too few separated candidates remain, the closest
    substitutes are taken and noted.

    Args:
        sites: SiteRecords carrying eu_id.
        spec: Effort and regulation parameters.
        eus: Optional iterable restricting (and ordering checks to) specific
            unit ids; anything with an ``eu_id`` attribute is accepted too.

    Returns:
        Design with primaries first within each unit, reserves after.

    Raises:
        InfeasibleDesignError: Any unit cannot host k separated sites; the
            unit id is part of the message.
    """
    candidates, small = candidate_filter(sites, spec.m)
    if eus is None:
        eu_ids = sorted({s.eu_id for s in candidates if s.eu_id is not None})
    else:
        eu_ids = [getattr(e, "eu_id", e) for e in eus]
    if not eu_ids:
        raise DesignError("no evaluation units to design for")

    rows = []
    notes = []
    for i, eu_id in enumerate(eu_ids):
        pool = [s for s in candidates if s.eu_id == eu_id]
        if not pool:
            raise DesignError(f"evaluation unit {eu_id} has no eligible sites")
        try:
            primaries = inhibitory_sample(
                pool, spec.k, spec.delta_min, substream_seed(spec.seed, "design-eu", i)
            )
        except InfeasibleDesignError as err:
            raise InfeasibleDesignError(
                f"evaluation unit {eu_id}: {err}", eu_id=eu_id, largest_k=err.largest_k
            ) from err
        chosen_ids = {s.id for s in primaries}
        remaining = [s for s in pool if s.id not in chosen_ids]
        reserves, flagged = _reserves_for_eu(
            remaining, primaries, spec.n_reserve, spec.delta_min,
            substream_seed(spec.seed, "design-eu-reserve", i),
        )
        if len(reserves) < spec.n_reserve:
            notes.append(
                f"evaluation unit {eu_id}: only {len(reserves)} reserve site(s) available"
            )
        for sid in flagged:
            notes.append(
                f"evaluation unit {eu_id}: reserve site {sid} lies within "
                f"delta_min of a primary site"
            )
        for s in primaries:
            if small.get(s.id):
                notes.append(
                    f"evaluation unit {eu_id}: site {s.id} population "
                    f"{s.population} below target {spec.m}; sampling everyone"
                )
        for s in primaries:
            rows.append(DesignRow(eu_id, s, min(spec.m, s.population), False))
        for s in reserves:
            rows.append(DesignRow(eu_id, s, min(spec.m, s.population), True))

    design = Design(spec=spec, _rows=tuple(rows), notes=tuple(notes))
    design.validate()
    return design


def _nn_stats(xs, ys):
    pts = np.column_stack([xs, ys])
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    np.fill_diagonal(d, np.inf)
    nn = d.min(axis=1)
    return float(nn.min()), float(nn.mean())


def design_regularity_score(design: Design, sites, seed: int = 0,
                            n_baseline: int = SRS_BASELINE_DRAWS) -> dict:
    """Nearest-neighbour spacing of each unit's primaries vs an SRS baseline.

    The baseline redraws the same number of sites from the unit's candidates
    completely at random, ``n_baseline`` times, and averages the same
    statistics.

    Returns:
        Mapping eu_id -> dict with min_nn, mean_nn, srs_min_nn, srs_mean_nn.
    """
    candidates, _ = candidate_filter(sites, design.spec.m)
    out = {}
    for idx, eu_id in enumerate(design.eu_list()):
        prim = design.sites_in(eu_id)
        if len(prim) < 2:
            raise DesignError(
                f"evaluation unit {eu_id} needs at least 2 sites for spacing statistics"
            )
        mn, mean = _nn_stats([s.x for s in prim], [s.y for s in prim])
        pool = [s for s in candidates if s.eu_id == eu_id]
        xs = np.array([s.x for s in pool])
        ys = np.array([s.y for s in pool])
        rng = stream(substream_seed(seed, "srs-baseline", idx), "srs")
        mins = np.empty(n_baseline)
        means = np.empty(n_baseline)
        for b in range(n_baseline):
            pick = rng.choice(len(pool), size=len(prim), replace=False)
            mins[b], means[b] = _nn_stats(xs[pick], ys[pick])
        out[eu_id] = {
            "min_nn": mn,
            "mean_nn": mean,
            "srs_min_nn": float(mins.mean()),
            "srs_mean_nn": float(means.mean()),
        }
    return out
