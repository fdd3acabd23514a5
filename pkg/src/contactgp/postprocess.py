"""Posterior summaries: intensity matrices, marginal and conditional
intensities, relative change, the crude empirical estimator, and accuracy
metrics.

Every functional is applied draw by draw and only then summarized (posterior
median plus central 95% interval); summarizing first and transforming after
would silently shift nonlinear quantities.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from contactgp.grids import GENDERS, PAIRS, AgeGrid
from contactgp.tables import ObservationTable, PopulationTable

DEFAULT_CI = 0.95


def summarize(values: np.ndarray, ci: float = DEFAULT_CI) -> dict:
    """Median and central credible interval over the leading (draw) axis."""
    if not 0 < ci < 1:
        raise ValueError("ci must lie in (0, 1)")
    tail = 100.0 * (1.0 - ci) / 2.0
    lower, median, upper = np.percentile(values, [tail, 50.0, 100.0 - tail], axis=0)
    return {"median": median, "lower": lower, "upper": upper}


def _flat_draws(intensity) -> np.ndarray:
    intensity = np.asarray(intensity)
    if intensity.ndim == 6:  # per-chain draws not yet merged
        intensity = intensity.reshape((-1,) + intensity.shape[2:])
    if intensity.ndim != 5:
        raise ValueError("expected intensity draws of shape (n, waves, 4, B, B)")
    return intensity


def marginal_draws(intensity) -> np.ndarray:
    """Total contacts per participant: sum over contact ages and genders.

    Returns draws of shape (n, waves, 2, B), indexed by participant gender.
    """
    intensity = _flat_draws(intensity)
    by_pair = intensity.sum(axis=4)  # (n, T, 4, B)
    male = by_pair[:, :, 0] + by_pair[:, :, 1]    # MM + MF
    female = by_pair[:, :, 2] + by_pair[:, :, 3]  # FM + FF
    return np.stack([male, female], axis=2)


def marginal_intensity(intensity, waves, grid: AgeGrid, ci: float = DEFAULT_CI) -> pd.DataFrame:
    """Summarized marginal contact intensities per wave, gender and age."""
    draws = marginal_draws(intensity)
    stats = summarize(draws, ci)
    rows = []
    for t, wave in enumerate(waves):
        for g, gender in enumerate(GENDERS):
            for a, age in enumerate(grid.ages):
                rows.append(
                    {
                        "wave": wave,
                        "gender": gender,
                        "age": int(age),
                        "median": stats["median"][t, g, a],
                        "lower": stats["lower"][t, g, a],
                        "upper": stats["upper"][t, g, a],
                    }
                )
    return pd.DataFrame(rows)


def conditional_draws(
    intensity,
    population: PopulationTable,
    age: int,
    mode: str = "population-weighted",
) -> np.ndarray:
    """Contact intensity of one participant age slice, aggregated over genders.

    Per draw: sum over contact genders, then combine the two participant
    genders either by population weights at the slice age (default) or by a
    plain sum.
    """
    intensity = _flat_draws(intensity)
    ia = population.grid.index(age)
    by_gender = np.stack(
        [
            intensity[:, :, 0, ia, :] + intensity[:, :, 1, ia, :],  # male participants
            intensity[:, :, 2, ia, :] + intensity[:, :, 3, ia, :],  # female participants
        ],
        axis=2,
    )  # (n, T, 2, B)
    if mode == "sum":
        return by_gender.sum(axis=2)
    if mode != "population-weighted":
        raise ValueError("mode must be 'population-weighted' or 'sum'")
    pops = population.counts[:, ia]
    weights = pops / pops.sum()
    return np.tensordot(by_gender, weights, axes=([2], [0]))


def conditional_intensity(
    intensity,
    population: PopulationTable,
    age: int,
    waves,
    mode: str = "population-weighted",
    ci: float = DEFAULT_CI,
) -> pd.DataFrame:
    draws = conditional_draws(intensity, population, age, mode)
    stats = summarize(draws, ci)
    rows = []
    for t, wave in enumerate(waves):
        for b, cont_age in enumerate(population.grid.ages):
            rows.append(
                {
                    "wave": wave,
                    "part_age": int(age),
                    "cont_age": int(cont_age),
                    "median": stats["median"][t, b],
                    "lower": stats["lower"][t, b],
                    "upper": stats["upper"][t, b],
                }
            )
    return pd.DataFrame(rows)


def relative_change_draws(intensity, reference_index: int) -> np.ndarray:
    """Draw-wise percent change of marginal intensities vs a reference wave."""
    marg = marginal_draws(intensity)  # (n, T, 2, B)
    ref = marg[:, reference_index : reference_index + 1]
    return 100.0 * (marg / ref - 1.0)


def relative_change(
    intensity, waves, grid: AgeGrid, reference_wave, ci: float = DEFAULT_CI
) -> pd.DataFrame:
    waves = list(waves)
    if reference_wave not in waves:
        raise ValueError(f"reference wave {reference_wave} not among {waves}")
    draws = relative_change_draws(intensity, waves.index(reference_wave))
    stats = summarize(draws, ci)
    rows = []
    for t, wave in enumerate(waves):
        for g, gender in enumerate(GENDERS):
            for a, age in enumerate(grid.ages):
                rows.append(
                    {
                        "wave": wave,
                        "reference_wave": reference_wave,
                        "gender": gender,
                        "age": int(age),
                        "median": stats["median"][t, g, a],
                        "lower": stats["lower"][t, g, a],
                        "upper": stats["upper"][t, g, a],
                    }
                )
    return pd.DataFrame(rows)


def crude_estimator(table: ObservationTable) -> pd.DataFrame:
    """Model-free coarse intensities Y / (N * s), no smoothing.

    Counts and participants are pooled over repeat groups; strata with no
    participants are simply absent. The detail proportion divides out the
    contacts that were reported without age information.
    """
    pooled: dict = {}
    for s in range(table.n_strata):
        key = (table.wave_idx[s], table.age_idx[s], table.gender_idx[s])
        n, counts, _ = pooled.get(key, (0.0, np.zeros_like(table.counts[0]), 1.0))
        pooled[key] = (n + table.n_participants[s], counts + table.counts[s], table.detail_prop[s])
    rows = []
    for (t, a, g), (n, counts, detail) in sorted(pooled.items()):
        for c, label in enumerate(table.brackets.labels):
            for h, cont_gender in enumerate(GENDERS):
                rows.append(
                    {
                        "wave": table.waves[t],
                        "part_age": int(table.grid.ages[a]),
                        "part_gender": GENDERS[g],
                        "cont_bracket": label,
                        "cont_gender": cont_gender,
                        "intensity": counts[c, h] / (n * detail),
                    }
                )
    return pd.DataFrame(rows)


def rate_asymmetry(crude: pd.DataFrame, table: ObservationTable, population: PopulationTable) -> float:
    """Mean absolute asymmetry of crude contact rates across directions.

    The crude estimator ignores the population-level consistency constraint,
    so on real-shaped data this is positive. Rates are compared on the
    coarse grid: participant brackets versus contact brackets, aggregating
    the population within brackets.
    """
    brackets = table.brackets
    n_c = brackets.size
    member = brackets.membership_matrix()
    pop_c = population.counts @ member  # (2, C)

    rate = np.full((2, 2, n_c, n_c), np.nan)
    weight = np.zeros((2, 2, n_c, n_c))
    for _, row in crude.iterrows():
        gi = GENDERS.index(row["part_gender"])
        hi = GENDERS.index(row["cont_gender"])
        ci = brackets.bracket_of(int(row["part_age"]))
        cj = list(brackets.labels).index(row["cont_bracket"])
        r = row["intensity"] / pop_c[hi, cj]
        prev = 0.0 if np.isnan(rate[gi, hi, ci, cj]) else rate[gi, hi, ci, cj]
        w = weight[gi, hi, ci, cj]
        rate[gi, hi, ci, cj] = (prev * w + r) / (w + 1)
        weight[gi, hi, ci, cj] = w + 1
    diffs = []
    for gi in range(2):
        for hi in range(2):
            fwd = rate[gi, hi]
            rev = rate[hi, gi].T
            mask = ~np.isnan(fwd) & ~np.isnan(rev)
            scale = np.nanmax(np.abs(fwd)) or 1.0
            diffs.append(np.abs(fwd[mask] - rev[mask]) / scale)
    return float(np.mean(np.concatenate(diffs)))


def mae(point_estimate: np.ndarray, truth: np.ndarray) -> float:
    """Mean absolute error between matched intensity arrays."""
    point_estimate = np.asarray(point_estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if point_estimate.shape != truth.shape:
        raise ValueError(
            f"shape mismatch: estimate {point_estimate.shape} vs truth {truth.shape}"
        )
    return float(np.mean(np.abs(point_estimate - truth)))


def intensity_summary(intensity, waves, grid: AgeGrid, ci: float = DEFAULT_CI) -> pd.DataFrame:
    """Tidy per-cell posterior summary of the intensity surfaces."""
    stats = summarize(_flat_draws(intensity), ci)
    rows = []
    for t, wave in enumerate(waves):
        for p, pair in enumerate(PAIRS):
            for a, age_a in enumerate(grid.ages):
                for b, age_b in enumerate(grid.ages):
                    rows.append(
                        {
                            "wave": wave,
                            "part_gender": pair[0],
                            "cont_gender": pair[1],
                            "part_age": int(age_a),
                            "cont_age": int(age_b),
                            "median": stats["median"][t, p, a, b],
                            "lower": stats["lower"][t, p, a, b],
                            "upper": stats["upper"][t, p, a, b],
                        }
                    )
    return pd.DataFrame(rows)
