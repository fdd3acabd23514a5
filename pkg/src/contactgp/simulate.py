"""Synthetic contact datasets with known ground-truth intensity surfaces.

Two stylised scenarios are provided, mimicking pre-pandemic and pandemic
contact behaviour on ages 6..49. Intensities are built from per-band rules
keyed on the absolute age difference (AAD) between participant and contact:
strong age-assortative contact that decays with AAD, plus an
inter-generational band centred on an age gap of 24 years. Age pairs not
covered by any rule have intensity exactly zero.

The raw rules describe intensities from the participant's side only. Before
sampling, the truth is made consistent with the population-level constraint
that contacts between two groups must balance, by averaging the contact
rates implied by the two directions against the population counts. The
estimator enforces the same constraint, so the ground truth must satisfy it
for error metrics to be meaningful.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from contactgp.grids import GENDERS, PAIRS, AgeGrid, CoarseBracketing, pair_index, sim_bracketing
from contactgp.tables import ObservationTable, PopulationTable, bundled_population

SIM_GRID = AgeGrid(6, 49)

SAMPLE_SIZES = (250, 500, 1000, 2000, 5000)


def _ramp(peak: float, step: float, last: int) -> dict[int, float]:
    """AAD rule 'peak at zero, decreasing by step until AAD = last'."""
    return {k: peak - step * k for k in range(last + 1)}


def _plateau(rules: dict[int, float], spans: dict[tuple[int, int], float]) -> dict[int, float]:
    for (lo, hi), value in spans.items():
        for k in range(lo, hi + 1):
            rules[k] = value
    return rules


# Inter-generational band: highest at an age gap of exactly 24, decaying as
# the gap grows. Gaps below 24 are handled by the separate young-parent rules.
_PARENT_NARROW = _plateau({24: 0.8, 25: 0.3}, {(26, 27): 0.1, (28, 29): 0.01})
_PARENT_WIDE_PRE = _plateau({24: 1.6, 25: 0.6}, {(26, 27): 0.2, (28, 29): 0.02})


@dataclass(frozen=True)
class BandRules:
    """AAD-keyed intensities for one participant age band."""

    low: int
    high: int
    by_aad: dict[int, float]

    def covers(self, age: int) -> bool:
        return self.low <= age <= self.high


@dataclass(frozen=True)
class YoungParentRules:
    """Contacts from participants aged 25-29 to their young children.

    Applied only toward younger contacts (gap = participant age - contact
    age, between 19 and 23). The gap-23 value binds only for participants
    aged 29; for younger participants the implied contact age falls outside
    the grid anyway.
    """

    low: int = 25
    high: int = 29
    by_gap: dict[int, float] = None
    gap23_participant_age: int = 29

    def apply(self, truth: np.ndarray, grid: AgeGrid):
        for a in range(self.low, self.high + 1):
            if a not in grid:
                continue
            for gap, value in self.by_gap.items():
                if gap == 23 and a != self.gap23_participant_age:
                    continue
                b = a - gap
                if b in grid:
                    truth[grid.index(a), grid.index(b)] = value


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    grid: AgeGrid
    bands: tuple[BandRules, ...]
    young_parents: YoungParentRules

    def band_for(self, age: int) -> BandRules:
        for band in self.bands:
            if band.covers(age):
                return band
        raise ValueError(f"no rule band covers participant age {age}")


PRE_COVID = ScenarioSpec(
    name="pre",
    grid=SIM_GRID,
    bands=(
        BandRules(6, 18, _plateau(_ramp(2.5, 0.2, 8), {(9, 11): 0.1, (12, 13): 0.03, (14, 15): 0.01}) | _PARENT_NARROW),
        BandRules(19, 29, _plateau(_ramp(2.5, 0.3, 5), {(6, 9): 0.8, (10, 13): 0.04, (14, 15): 0.01}) | _PARENT_NARROW),
        BandRules(30, 39, _plateau(_ramp(2.0, 0.24, 5), {(6, 9): 0.64, (10, 13): 0.03, (14, 15): 0.01}) | _PARENT_WIDE_PRE),
        BandRules(40, 49, _plateau(_ramp(1.5, 0.18, 5), {(6, 9): 0.5, (10, 13): 0.02, (14, 15): 0.007}) | _PARENT_WIDE_PRE),
    ),
    young_parents=YoungParentRules(by_gap={23: 0.6, 22: 0.2, 21: 0.2, 20: 0.02, 19: 0.02}),
)

IN_COVID = ScenarioSpec(
    name="in",
    grid=SIM_GRID,
    bands=(
        BandRules(6, 10, _plateau(_ramp(0.08, 0.007, 8), {(9, 11): 0.003, (12, 13): 0.001, (14, 15): 3e-4}) | _PARENT_NARROW),
        BandRules(11, 18, _plateau(_ramp(0.4, 0.035, 8), {(9, 11): 0.015, (12, 13): 0.005, (14, 15): 15e-4}) | _PARENT_NARROW),
        BandRules(19, 29, _plateau(_ramp(1.5, 0.18, 5), {(6, 9): 0.48, (10, 13): 0.024, (14, 15): 0.006}) | _PARENT_NARROW),
        BandRules(30, 39, _plateau(_ramp(1.25, 0.15, 5), {(6, 9): 0.4, (10, 13): 0.01875, (14, 15): 0.00625}) | _PARENT_NARROW),
        BandRules(40, 49, _plateau(_ramp(1.0, 0.12, 5), {(6, 9): 0.33, (10, 13): 0.01375, (14, 15): 0.00475}) | _PARENT_NARROW),
    ),
    young_parents=YoungParentRules(by_gap={23: 0.6, 22: 0.1, 21: 0.1, 20: 0.01, 19: 0.01}),
)

SCENARIOS = {spec.name: spec for spec in (PRE_COVID, IN_COVID)}


def scenario(name: str) -> ScenarioSpec:
    key = str(name).lower()
    aliases = {"pre": "pre", "pre-covid": "pre", "in": "in", "in-covid": "in"}
    if key not in aliases:
        raise ValueError(f"unknown scenario {name!r}, expected 'pre' or 'in'")
    return SCENARIOS[aliases[key]]


def raw_truth(spec: ScenarioSpec) -> np.ndarray:
    """Participant-side intensity surface, identical for all gender pairs."""
    grid = spec.grid
    truth = np.zeros((grid.size, grid.size))
    for ia, a in enumerate(grid.ages):
        band = spec.band_for(int(a))
        for ib, b in enumerate(grid.ages):
            truth[ia, ib] = band.by_aad.get(abs(int(b) - int(a)), 0.0)
    spec.young_parents.apply(truth, grid)
    return truth


def symmetrize_rates(raw: np.ndarray, population: PopulationTable) -> np.ndarray:
    """Per gender-pair truth satisfying exact contact-rate symmetry.

    Averages the contact rates implied by the two reporting directions, then
    converts back to intensities, so c[g,h](a,b) == c[h,g](b,a) exactly.
    """
    pops = population.counts
    out = np.empty((4, raw.shape[0], raw.shape[1]))
    for gi in range(2):
        for hi in range(2):
            forward = raw / pops[hi][None, :]
            reverse = (raw / pops[gi][None, :]).T
            out[2 * gi + hi] = 0.5 * (forward + reverse) * pops[hi][None, :]
    return out


def build_truth(scenario_name: str, population: PopulationTable | None = None) -> np.ndarray:
    """Ground-truth intensities (pair, participant age, contact age)."""
    spec = scenario(scenario_name)
    population = population or bundled_population(spec.grid)
    if population.grid != spec.grid:
        population = population.restricted(spec.grid)
    return symmetrize_rates(raw_truth(spec), population)


def allocate_participants(population: PopulationTable, total: int) -> np.ndarray:
    """Integer participant counts (gender, age) proportional to population.

    Largest-remainder rounding, so counts sum to ``total`` exactly. Some
    age-gender cells may receive zero participants at small sample sizes;
    those strata are then missing from the survey, as in real data.
    """
    if total < 1:
        raise ValueError("total participants must be positive")
    raw = population.share() * total
    base = np.floor(raw).astype(int)
    short = total - base.sum()
    if short > 0:
        order = np.argsort((base - raw).ravel())  # most negative = largest remainder
        base.ravel()[order[:short]] += 1
    return base


def sample_counts(truth: np.ndarray, participants: np.ndarray, seed) -> np.ndarray:
    """Poisson contact counts per (pair, participant age, contact age) cell."""
    lam = truth * participants[np.repeat([0, 1], 2), :, None]
    rng = np.random.default_rng(seed)
    return rng.poisson(lam)


def aggregate_counts(fine: np.ndarray, brackets: CoarseBracketing) -> np.ndarray:
    """Sum fine contact-age cells into reporting brackets (exact)."""
    member = brackets.membership_matrix()
    if fine.shape[-1] != member.shape[0]:
        raise ValueError(
            f"bracketing covers {member.shape[0]} ages, counts have {fine.shape[-1]}"
        )
    return fine @ member


@dataclass
class SimulatedDataset:
    scenario: str
    n_total: int
    replicate: int
    seed: int
    grid: AgeGrid
    brackets: CoarseBracketing
    population: PopulationTable
    truth: np.ndarray         # (4, B, B)
    participants: np.ndarray  # (2, B) integer counts
    fine_counts: np.ndarray   # (4, B, B)
    coarse_counts: np.ndarray  # (4, B, C)

    def observation_table(self) -> ObservationTable:
        """Cross-sectional observation table (single wave, no repeats)."""
        strata = [(g, a) for g in range(2) for a in range(self.grid.size) if self.participants[g, a] > 0]
        counts = np.zeros((len(strata), self.brackets.size, 2))
        for s, (g, a) in enumerate(strata):
            for h in range(2):
                counts[s, :, h] = self.coarse_counts[2 * g + h, a, :]
        return ObservationTable(
            grid=self.grid,
            brackets=self.brackets,
            waves=(1,),
            repeats=(0,),
            wave_idx=np.zeros(len(strata), dtype=int),
            repeat_idx=np.zeros(len(strata), dtype=int),
            age_idx=np.array([a for _, a in strata], dtype=int),
            gender_idx=np.array([g for g, _ in strata], dtype=int),
            n_participants=np.array([self.participants[g, a] for g, a in strata], dtype=float),
            detail_prop=np.ones(len(strata)),
            counts=counts,
        )

    def truth_frame(self) -> pd.DataFrame:
        rows = []
        for p, pair in enumerate(PAIRS):
            for ia, a in enumerate(self.grid.ages):
                for ib, b in enumerate(self.grid.ages):
                    rows.append(
                        {
                            "part_gender": pair[0],
                            "cont_gender": pair[1],
                            "part_age": int(a),
                            "cont_age": int(b),
                            "intensity": self.truth[p, ia, ib],
                        }
                    )
        return pd.DataFrame(rows)

    def fine_count_frame(self) -> pd.DataFrame:
        rows = []
        for p, pair in enumerate(PAIRS):
            for ia, a in enumerate(self.grid.ages):
                for ib, b in enumerate(self.grid.ages):
                    rows.append(
                        {
                            "part_gender": pair[0],
                            "cont_gender": pair[1],
                            "part_age": int(a),
                            "cont_age": int(b),
                            "count": int(self.fine_counts[p, ia, ib]),
                        }
                    )
        return pd.DataFrame(rows)

    def manifest(self) -> dict:
        payload = {
            "scenario": self.scenario,
            "n_total": self.n_total,
            "replicate": self.replicate,
            "seed": self.seed,
            "age_range": [self.grid.min_age, self.grid.max_age],
            "brackets": list(self.brackets.labels),
        }
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
        return {**payload, "config_hash": digest[:16]}


def simulate_dataset(
    scenario_name: str,
    n_total: int,
    seed: int,
    replicate: int = 0,
    population: PopulationTable | None = None,
) -> SimulatedDataset:
    spec = scenario(scenario_name)
    population = (population or bundled_population(spec.grid)).restricted(spec.grid)
    brackets = sim_bracketing(spec.grid)
    truth = build_truth(spec.name, population)
    participants = allocate_participants(population, n_total)
    fine = sample_counts(truth, participants, seed)
    coarse = aggregate_counts(fine, brackets)
    return SimulatedDataset(
        scenario=spec.name,
        n_total=n_total,
        replicate=replicate,
        seed=int(seed),
        grid=spec.grid,
        brackets=brackets,
        population=population,
        truth=truth,
        participants=participants,
        fine_counts=fine,
        coarse_counts=coarse,
    )


def replicate_suite(
    scenario_name: str,
    n_total: int,
    replicates: int,
    seed: int,
    population: PopulationTable | None = None,
) -> list[SimulatedDataset]:
    """Independent replicate datasets with seeds derived from one master seed."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    children = np.random.SeedSequence(seed).spawn(replicates)
    return [
        simulate_dataset(
            scenario_name,
            n_total,
            seed=int(child.generate_state(1)[0]),
            replicate=i,
            population=population,
        )
        for i, child in enumerate(children)
    ]


def truth_frame_to_array(truth: pd.DataFrame, grid: AgeGrid) -> np.ndarray:
    """Read a truth_intensity.csv frame back into a (4, B, B) array."""
    out = np.zeros((4, grid.size, grid.size))
    pairs = truth["part_gender"].astype(str) + truth["cont_gender"].astype(str)
    p = np.array([pair_index(s[0], s[1]) for s in pairs])
    ia = truth["part_age"].to_numpy() - grid.min_age
    ib = truth["cont_age"].to_numpy() - grid.min_age
    out[p, ia, ib] = truth["intensity"].to_numpy()
    return out
