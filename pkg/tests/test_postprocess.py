import numpy as np
import pandas as pd
import pytest

from contactgp.grids import AgeGrid, CoarseBracketing, pair_index
from contactgp.postprocess import (
    conditional_draws,
    conditional_intensity,
    crude_estimator,
    intensity_summary,
    mae,
    marginal_draws,
    marginal_intensity,
    rate_asymmetry,
    relative_change,
    relative_change_draws,
    summarize,
)
from contactgp.simulate import build_truth, simulate_dataset
from contactgp.tables import ObservationTable, PopulationTable, bundled_population, uniform_population

GRID = AgeGrid(6, 49)


def constant_intensity(value, n=4, waves=1, ages=5):
    return np.full((n, waves, 4, ages, ages), float(value))


class TestSummarize:
    def test_interval_order(self):
        rng = np.random.default_rng(0)
        stats = summarize(rng.standard_normal((500, 3, 2)))
        assert np.all(stats["lower"] <= stats["median"])
        assert np.all(stats["median"] <= stats["upper"])

    def test_invalid_ci(self):
        with pytest.raises(ValueError):
            summarize(np.zeros((10, 2)), ci=1.5)


class TestMarginal:
    def test_constant_field_exact_value(self):
        ages = 5
        value = 0.3
        grid = AgeGrid(0, ages - 1)
        intensity = constant_intensity(value, ages=ages)
        frame = marginal_intensity(intensity, waves=(1,), grid=grid)
        # sum over contact ages and both contact genders: 2 * value * B
        assert np.allclose(frame["median"], 2 * value * ages)
        assert np.allclose(frame["lower"], frame["upper"])

    def test_truth_child_marginal_on_one_surface(self):
        truth = build_truth("pre")
        row = truth[pair_index("M", "M"), GRID.index(12), :]
        assert abs(row.sum() - 32.0) <= 0.15 * 32.0

    def test_marginal_draw_shape(self):
        draws = marginal_draws(np.random.default_rng(1).uniform(0.1, 1.0, size=(7, 2, 4, 6, 6)))
        assert draws.shape == (7, 2, 2, 6)


class TestConditional:
    def test_flat_field_gives_flat_curve(self):
        intensity = constant_intensity(0.5, ages=GRID.size)
        pop = bundled_population(GRID)
        draws = conditional_draws(intensity, pop, age=10)
        assert np.allclose(draws, draws[..., :1])

    def test_truth_slice_peak_and_parent_structure(self):
        truth = build_truth("pre")[None, None]  # one pseudo-draw
        pop = bundled_population(GRID)
        frame = conditional_intensity(truth, pop, age=10, waves=(1,))
        curve = frame.sort_values("cont_age")["median"].to_numpy()
        ages = frame.sort_values("cont_age")["cont_age"].to_numpy()
        assert ages[np.argmax(curve)] == 10  # peer peak
        at = {a: v for a, v in zip(ages, curve)}
        assert at[34] > at[31]  # secondary structure at an age gap of 24
        assert at[34] > at[40]

    def test_sum_mode_exceeds_weighted_mode(self):
        intensity = constant_intensity(0.5, ages=GRID.size)
        pop = bundled_population(GRID)
        summed = conditional_draws(intensity, pop, age=10, mode="sum")
        weighted = conditional_draws(intensity, pop, age=10)
        assert np.allclose(summed, 2 * weighted)  # equal gender surfaces here

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            conditional_draws(constant_intensity(1.0), uniform_population(AgeGrid(0, 4)), 2, mode="mean")


class TestRelativeChange:
    def test_reference_wave_is_exact_zero(self):
        rng = np.random.default_rng(2)
        intensity = rng.uniform(0.5, 1.5, size=(50, 2, 4, 5, 5))
        grid = AgeGrid(0, 4)
        frame = relative_change(intensity, waves=(1, 2), grid=grid, reference_wave=1)
        ref_rows = frame[frame["wave"] == 1]
        assert np.allclose(ref_rows["median"], 0.0)
        assert np.allclose(ref_rows["lower"], 0.0)
        assert np.allclose(ref_rows["upper"], 0.0)

    def test_doubling_gives_plus_100(self):
        rng = np.random.default_rng(3)
        base = rng.uniform(0.5, 1.5, size=(40, 1, 4, 5, 5))
        intensity = np.concatenate([base, 2 * base], axis=1)
        draws = relative_change_draws(intensity, reference_index=0)
        assert np.allclose(draws[:, 1], 100.0)

    def test_missing_reference_rejected(self):
        with pytest.raises(ValueError):
            relative_change(constant_intensity(1.0, waves=2), (1, 2), AgeGrid(0, 4), reference_wave=9)

    def test_ratio_computed_draw_wise_not_from_summaries(self):
        # a skewed posterior: transforming after summarizing would differ
        rng = np.random.default_rng(4)
        base = np.exp(rng.standard_normal((4000, 1, 4, 3, 3)))
        wave2 = base * np.exp(rng.standard_normal((4000, 1, 4, 3, 3)))
        intensity = np.concatenate([base, wave2], axis=1)
        draws = relative_change_draws(intensity, 0)
        drawwise_median = np.percentile(100.0 * (marginal_draws(intensity)[:, 1] / marginal_draws(intensity)[:, 0] - 1.0), 50, axis=0)
        marg_summary = summarize(marginal_draws(intensity))["median"]
        summary_then_ratio = 100.0 * (marg_summary[1] / marg_summary[0] - 1.0)
        assert np.allclose(np.percentile(draws[:, 1], 50, axis=0), drawwise_median)
        assert not np.allclose(summary_then_ratio, drawwise_median, rtol=1e-2)


class TestCrudeEstimator:
    def make_table(self):
        grid = AgeGrid(0, 5)
        brk = CoarseBracketing.from_strings(grid, ["0-2", "3-5"])
        parts = pd.DataFrame(
            [[1, 0, 2, "M", 4], [1, 1, 2, "M", 2], [1, 0, 3, "F", 5]],
            columns=["wave", "repeat", "age", "gender", "n"],
        )
        contacts = pd.DataFrame(
            [
                [1, 0, 2, "M", "0-2", "F", 6],
                [1, 1, 2, "M", "0-2", "F", 4],
                [1, 0, 3, "F", "3-5", "M", 0],
            ],
            columns=["wave", "repeat", "part_age", "part_gender", "cont_bracket", "cont_gender", "count"],
        )
        detail = pd.DataFrame([[1, 2, "M", 0.8]], columns=["wave", "age", "gender", "s"])
        return ObservationTable.from_frames(contacts, parts, grid, brk, detail=detail)

    def test_direct_arithmetic(self):
        crude = crude_estimator(self.make_table())
        # repeats pooled: (6 + 4) / (4 + 2) / 0.8
        row = crude[
            (crude["part_age"] == 2)
            & (crude["cont_bracket"] == "0-2")
            & (crude["cont_gender"] == "F")
        ]
        assert row["intensity"].item() == pytest.approx(10 / 6 / 0.8)

    def test_explicit_value(self):
        grid = AgeGrid(0, 5)
        brk = CoarseBracketing.from_strings(grid, ["0-2", "3-5"])
        parts = pd.DataFrame([[1, 0, 1, "M", 4]], columns=["wave", "repeat", "age", "gender", "n"])
        contacts = pd.DataFrame(
            [[1, 0, 1, "M", "3-5", "F", 10]],
            columns=["wave", "repeat", "part_age", "part_gender", "cont_bracket", "cont_gender", "count"],
        )
        detail = pd.DataFrame([[1, 1, "M", 0.8]], columns=["wave", "age", "gender", "s"])
        table = ObservationTable.from_frames(contacts, parts, grid, brk, detail=detail)
        crude = crude_estimator(table)
        hit = crude[(crude["cont_bracket"] == "3-5") & (crude["cont_gender"] == "F")]
        assert hit["intensity"].item() == pytest.approx(3.125)

    def test_zero_counts_give_zero(self):
        crude = crude_estimator(self.make_table())
        row = crude[
            (crude["part_age"] == 3)
            & (crude["cont_bracket"] == "0-2")
            & (crude["cont_gender"] == "F")
        ]
        assert row["intensity"].item() == 0.0

    def test_absent_strata_stay_absent(self):
        crude = crude_estimator(self.make_table())
        assert set(crude["part_age"]) == {2, 3}

    def test_crude_rates_asymmetric_on_fatigued_data(self):
        ds = simulate_dataset("pre", 2000, seed=8)
        table = ds.observation_table()
        # inject reporting fatigue on one side: halve male-participant reports
        counts = table.counts.copy()
        male = table.gender_idx == 0
        counts[male] = np.floor(counts[male] * 0.5)
        fatigued = ObservationTable(
            grid=table.grid,
            brackets=table.brackets,
            waves=table.waves,
            repeats=table.repeats,
            wave_idx=table.wave_idx,
            repeat_idx=table.repeat_idx,
            age_idx=table.age_idx,
            gender_idx=table.gender_idx,
            n_participants=table.n_participants,
            detail_prop=table.detail_prop,
            counts=counts,
        )
        crude = crude_estimator(fatigued)
        assert rate_asymmetry(crude, fatigued, ds.population) > 0.0


class TestMae:
    def test_exact_match_is_zero(self):
        truth = build_truth("pre")
        assert mae(truth, truth) == 0.0

    def test_constant_offset(self):
        truth = build_truth("pre")
        assert mae(truth + 0.05, truth) == pytest.approx(0.05)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mae(np.zeros((4, 3, 3)), np.zeros((4, 2, 2)))


class TestAggregateBalance:
    def test_total_cross_gender_contacts_balance_per_draw(self):
        # population-scaled MF totals equal FM totals by rate symmetry
        rng = np.random.default_rng(5)
        pop = bundled_population(GRID)
        raw = rng.uniform(0.0, 2.0, size=(GRID.size, GRID.size))
        from contactgp.simulate import symmetrize_rates

        truth = symmetrize_rates(raw, pop)
        mf = pair_index("M", "F")
        fm = pair_index("F", "M")
        total_mf = float(np.sum(pop.counts[0][:, None] * truth[mf]))
        total_fm = float(np.sum(pop.counts[1][:, None] * truth[fm]))
        assert total_mf == pytest.approx(total_fm, rel=1e-12)


@pytest.mark.slow
def test_two_wave_fit_recovers_known_relative_change():
    """A wave-2 truth 1.3x wave-1 should land +30% inside the interval."""
    from contactgp.inference import SamplerConfig, sample
    from contactgp.model import ContactModel, ModelConfig

    grid = AgeGrid(6, 25)
    brk = CoarseBracketing.from_strings(grid, ["6-9", "10-14", "15-19", "20-25"])
    population = uniform_population(grid, 200_000.0)
    ages = grid.ages.astype(float)
    base = 1.2 * np.exp(-np.subtract.outer(ages, ages) ** 2 / 40.0) + 0.25
    rng = np.random.default_rng(17)
    member = brk.membership_matrix()

    parts, rows = [], []
    n_per = 40
    for wave, scale in ((1, 1.0), (2, 1.3)):
        for gi, g in enumerate("MF"):
            for ia, a in enumerate(grid.ages):
                parts.append([wave, 0, int(a), g, n_per])
                for hi, hg in enumerate("MF"):
                    coarse = rng.poisson(base[ia] * scale * n_per) @ member
                    for c, label in enumerate(brk.labels):
                        rows.append([wave, 0, int(a), g, label, hg, int(coarse[c])])
    table = ObservationTable.from_frames(
        pd.DataFrame(rows, columns=["wave", "repeat", "part_age", "part_gender", "cont_bracket", "cont_gender", "count"]),
        pd.DataFrame(parts, columns=["wave", "repeat", "age", "gender", "n"]),
        grid,
        brk,
    )
    model = ContactModel(
        table,
        population,
        ModelConfig(m1=12, m2=6, kernel="matern52", fatigue_adjustment=False, detail_adjustment=False),
    )
    draws, _ = sample(
        model, SamplerConfig(chains=2, warmup_iters=200, sampling_iters=200, seed=3), init="map"
    )
    frame = relative_change(draws.flat_intensity(), table.waves, grid, reference_wave=1)
    wave2 = frame[frame["wave"] == 2]
    # the +30% truth is inside the interval for the bulk of ages
    covered = ((wave2["lower"] <= 30.0) & (30.0 <= wave2["upper"])).mean()
    assert covered >= 0.8
    assert abs(np.median(wave2["median"]) - 30.0) < 10.0


def test_intensity_summary_layout():
    rng = np.random.default_rng(6)
    intensity = rng.uniform(0.1, 1.0, size=(30, 1, 4, 4, 4))
    grid = AgeGrid(0, 3)
    frame = intensity_summary(intensity, waves=(1,), grid=grid)
    assert len(frame) == 4 * 4 * 4
    assert np.all(frame["lower"] <= frame["median"])
    assert set(frame.columns) >= {"wave", "part_gender", "cont_gender", "part_age", "cont_age", "median"}
