"""Survey data structures and CSV schemas.

The canonical on-disk form of a dataset is a directory of tidy CSV files:

    contacts.csv      wave, repeat, part_age, part_gender, cont_bracket,
                      cont_gender, count
    participants.csv  wave, repeat, age, gender, n
    population.csv    age, gender, pop
    detail.csv        wave, age, gender, s            (optional)
    manifest.json     provenance: scenario, seed, grid, brackets, ...

In memory, counts live in a dense array over (stratum, contact bracket,
contact gender) where a stratum is a (wave, repeat, participant age,
participant gender) combination with at least one participant. Cells never
reported are zero; strata without participants are absent (missing, not
zero).
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from contactgp.grids import GENDERS, AgeGrid, CoarseBracketing

FLOAT_FORMAT = "%.17g"  # preserves doubles across write/parse round trips

CONTACT_COLUMNS = ["wave", "repeat", "part_age", "part_gender", "cont_bracket", "cont_gender", "count"]
PARTICIPANT_COLUMNS = ["wave", "repeat", "age", "gender", "n"]
POPULATION_COLUMNS = ["age", "gender", "pop"]
DETAIL_COLUMNS = ["wave", "age", "gender", "s"]


class SchemaError(ValueError):
    """A table does not satisfy the dataset schema."""


def _require_columns(df: pd.DataFrame, columns, name: str):
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(f"{name} is missing columns {missing}")


def _gender_codes(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=object)
    codes = np.full(arr.shape, -1, dtype=int)
    for i, g in enumerate(GENDERS):
        codes[arr == g] = i
    if np.any(codes < 0):
        bad = sorted(set(arr[codes < 0]))
        raise SchemaError(f"{name} contains unknown gender values {bad}")
    return codes


@dataclass(frozen=True)
class PopulationTable:
    """Population counts by single year of age and gender."""

    grid: AgeGrid
    counts: np.ndarray  # (2, B), rows ordered as GENDERS

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.shape != (2, self.grid.size):
            raise SchemaError(f"population has shape {counts.shape}, expected (2, {self.grid.size})")
        if not np.all(counts > 0):
            raise SchemaError("population must be strictly positive on the full age grid")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_frame(cls, df: pd.DataFrame, grid: AgeGrid) -> "PopulationTable":
        _require_columns(df, POPULATION_COLUMNS, "population.csv")
        counts = np.zeros((2, grid.size))
        g = _gender_codes(df["gender"], "population.csv")
        ages = df["age"].to_numpy()
        keep = (ages >= grid.min_age) & (ages <= grid.max_age)
        counts[g[keep], ages[keep].astype(int) - grid.min_age] = df["pop"].to_numpy()[keep]
        return cls(grid, counts)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"age": int(a), "gender": g, "pop": self.counts[gi, ai]}
            for gi, g in enumerate(GENDERS)
            for ai, a in enumerate(self.grid.ages)
        ]
        return pd.DataFrame(rows, columns=POPULATION_COLUMNS)

    def restricted(self, grid: AgeGrid) -> "PopulationTable":
        lo = self.grid.index(grid.min_age)
        hi = self.grid.index(grid.max_age)
        return PopulationTable(grid, self.counts[:, lo : hi + 1])

    def share(self) -> np.ndarray:
        """Age-gender proportions, summing to one over the grid."""
        return self.counts / self.counts.sum()


def uniform_population(grid: AgeGrid, total: float = 1_000_000.0) -> PopulationTable:
    per_cell = total / (2 * grid.size)
    return PopulationTable(grid, np.full((2, grid.size), per_cell))


def bundled_population(grid: AgeGrid | None = None) -> PopulationTable:
    """Shipped single-year age-gender population table.

    Approximate reconstruction of the German 2011 census age structure from
    published aggregate shapes; intended as a reasonable default, not an
    official extract (see README).
    """
    ref = importlib.resources.files("contactgp.resources") / "population_germany_2011.csv"
    with importlib.resources.as_file(ref) as path:
        df = pd.read_csv(path)
    full = PopulationTable.from_frame(df, AgeGrid(0, 84))
    return full.restricted(grid) if grid is not None else full


@dataclass(frozen=True)
class ObservationTable:
    """Dense coarse-bracket contact counts with per-stratum offsets.

    Arrays are aligned on the stratum axis; ``counts[s, c, h]`` is the number
    of contacts reported by stratum ``s`` to contact bracket ``c`` and gender
    ``h``. ``detail_prop`` is the proportion of the stratum's wave-age-gender
    cell reported with full age/gender detail, in (0, 1].
    """

    grid: AgeGrid
    brackets: CoarseBracketing
    waves: tuple[int, ...]
    repeats: tuple[int, ...]
    wave_idx: np.ndarray
    repeat_idx: np.ndarray
    age_idx: np.ndarray
    gender_idx: np.ndarray
    n_participants: np.ndarray
    detail_prop: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        s = self.n_strata
        for name in ("wave_idx", "repeat_idx", "age_idx", "gender_idx", "n_participants", "detail_prop"):
            if getattr(self, name).shape != (s,):
                raise SchemaError(f"{name} misaligned with strata")
        if self.counts.shape != (s, self.brackets.size, 2):
            raise SchemaError(f"counts have shape {self.counts.shape}")
        if np.any(self.counts < 0):
            raise SchemaError("negative contact counts")
        if np.any(self.n_participants <= 0):
            raise SchemaError("strata must have positive participant counts")
        if np.any((self.detail_prop <= 0) | (self.detail_prop > 1)):
            raise SchemaError("detail proportions must lie in (0, 1]")

    @property
    def n_strata(self) -> int:
        return self.wave_idx.shape[0]

    @property
    def n_cells(self) -> int:
        return self.counts.size

    @property
    def n_waves(self) -> int:
        return len(self.waves)

    @property
    def max_repeat(self) -> int:
        return max(self.repeats)

    @classmethod
    def from_frames(
        cls,
        contacts: pd.DataFrame,
        participants: pd.DataFrame,
        grid: AgeGrid,
        brackets: CoarseBracketing,
        detail: pd.DataFrame | None = None,
    ) -> "ObservationTable":
        """Assemble the dense table, zero-filling unreported cells.

        Every contact row must reference a stratum present in participants
        (referential integrity); strata with no participants are omitted.
        """
        _require_columns(participants, PARTICIPANT_COLUMNS, "participants.csv")
        _require_columns(contacts, CONTACT_COLUMNS, "contacts.csv")
        part = participants[participants["n"] != 0]
        if np.any(part["n"].to_numpy() < 0):
            raise SchemaError("negative participant counts")

        waves = tuple(sorted(int(w) for w in set(part["wave"]))) or (1,)
        repeats = tuple(sorted(int(r) for r in set(part["repeat"]))) or (0,)
        wave_pos = {w: i for i, w in enumerate(waves)}
        repeat_pos = {r: i for i, r in enumerate(repeats)}

        keys = {}
        wave_idx, repeat_idx, age_idx, gender_idx, n_part = [], [], [], [], []
        g_codes = _gender_codes(part["gender"], "participants.csv")
        for row, gcode in zip(part.itertuples(index=False), g_codes):
            key = (int(row.wave), int(row.repeat), int(row.age), int(gcode))
            if key in keys:
                raise SchemaError(f"duplicate participant stratum {key}")
            if row.age not in grid:
                raise SchemaError(f"participant age {row.age} outside grid")
            keys[key] = len(wave_idx)
            wave_idx.append(wave_pos[key[0]])
            repeat_idx.append(repeat_pos[key[1]])
            age_idx.append(grid.index(key[2]))
            gender_idx.append(key[3])
            n_part.append(float(row.n))

        counts = np.zeros((len(keys), brackets.size, 2))
        label_pos = {lab: i for i, lab in enumerate(brackets.labels)}
        ch_codes = _gender_codes(contacts["cont_gender"], "contacts.csv")
        pg_codes = _gender_codes(contacts["part_gender"], "contacts.csv")
        for row, hcode, gcode in zip(contacts.itertuples(index=False), ch_codes, pg_codes):
            key = (int(row.wave), int(row.repeat), int(row.part_age), int(gcode))
            if key not in keys:
                raise SchemaError(
                    f"contact row references stratum {key} absent from participants.csv"
                )
            if row.cont_bracket not in label_pos:
                raise SchemaError(f"unknown contact bracket {row.cont_bracket!r}")
            if row.count < 0:
                raise SchemaError("negative contact count")
            counts[keys[key], label_pos[row.cont_bracket], hcode] += float(row.count)

        detail_prop = np.ones(len(keys))
        if detail is not None:
            _require_columns(detail, DETAIL_COLUMNS, "detail.csv")
            lookup = {}
            d_codes = _gender_codes(detail["gender"], "detail.csv")
            for row, gcode in zip(detail.itertuples(index=False), d_codes):
                lookup[(int(row.wave), int(row.age), int(gcode))] = float(row.s)
            for key, s_idx in keys.items():
                w, _, a, g = key
                if (w, a, g) in lookup:
                    detail_prop[s_idx] = lookup[(w, a, g)]

        return cls(
            grid=grid,
            brackets=brackets,
            waves=waves,
            repeats=repeats,
            wave_idx=np.asarray(wave_idx, dtype=int),
            repeat_idx=np.asarray(repeat_idx, dtype=int),
            age_idx=np.asarray(age_idx, dtype=int),
            gender_idx=np.asarray(gender_idx, dtype=int),
            n_participants=np.asarray(n_part, dtype=float),
            detail_prop=detail_prop,
            counts=counts,
        )

    def to_contact_frame(self) -> pd.DataFrame:
        rows = []
        for s in range(self.n_strata):
            for c, label in enumerate(self.brackets.labels):
                for h, hg in enumerate(GENDERS):
                    rows.append(
                        {
                            "wave": self.waves[self.wave_idx[s]],
                            "repeat": self.repeats[self.repeat_idx[s]],
                            "part_age": int(self.grid.ages[self.age_idx[s]]),
                            "part_gender": GENDERS[self.gender_idx[s]],
                            "cont_bracket": label,
                            "cont_gender": hg,
                            "count": int(self.counts[s, c, h]),
                        }
                    )
        return pd.DataFrame(rows, columns=CONTACT_COLUMNS)

    def to_participant_frame(self) -> pd.DataFrame:
        rows = [
            {
                "wave": self.waves[self.wave_idx[s]],
                "repeat": self.repeats[self.repeat_idx[s]],
                "age": int(self.grid.ages[self.age_idx[s]]),
                "gender": GENDERS[self.gender_idx[s]],
                "n": self.n_participants[s],
            }
            for s in range(self.n_strata)
        ]
        return pd.DataFrame(rows, columns=PARTICIPANT_COLUMNS)


def impute_child_ages(records: pd.DataFrame, seed: int) -> pd.DataFrame:
    """Replace bracketed child ages ('10-14') by uniform draws within bounds.

    Records with exact integer ages pass through unchanged. Malformed
    brackets are collected and reported together with their row labels.
    """
    if "age" not in records.columns:
        raise SchemaError("records need an 'age' column")
    rng = np.random.default_rng(seed)
    out = records.copy()
    ages = np.empty(len(records), dtype=int)
    errors = []
    for pos, (label, raw) in enumerate(records["age"].items()):
        text = str(raw).strip()
        try:
            ages[pos] = int(text)
            continue
        except ValueError:
            pass
        parts = text.split("-")
        ok = len(parts) == 2
        if ok:
            try:
                low, high = int(parts[0]), int(parts[1])
                ok = low <= high
            except ValueError:
                ok = False
        if not ok:
            errors.append((label, text))
            continue
        ages[pos] = int(rng.integers(low, high + 1))
    if errors:
        raise SchemaError(f"malformed age brackets in rows {errors}")
    out["age"] = ages
    return out


def zero_fill_and_truncate(
    contacts: pd.DataFrame,
    participants: pd.DataFrame,
    grid: AgeGrid,
    brackets: CoarseBracketing,
    aggregates: pd.DataFrame | None = None,
    cap: int = 60,
) -> ObservationTable:
    """Build the dense observation table from raw survey frames.

    Cells that a present stratum never reported become zero; strata with no
    participants stay missing. Each aggregate (missing age/gender) report is
    truncated at ``cap`` before computing the per (wave, age, gender)
    detail proportion s = Y / (Y + T). Cells where every contact was
    reported in aggregate are floored at 1 / (Y + T + 1) so the offset
    log(s) stays finite.
    """
    detail = None
    if aggregates is not None and len(aggregates):
        _require_columns(aggregates, ["wave", "age", "gender", "count"], "aggregates")
        if np.any(aggregates["count"].to_numpy() < 0):
            raise SchemaError("negative aggregate report")
        agg = aggregates.copy()
        agg["count"] = np.minimum(agg["count"], cap)
        t_totals = agg.groupby(["wave", "age", "gender"])["count"].sum()
        y_totals = contacts.groupby(["wave", "part_age", "part_gender"])["count"].sum()
        rows = []
        for (wave, age, gender), t in t_totals.items():
            y = float(y_totals.get((wave, age, gender), 0.0))
            s = max(y / (y + t), 1.0 / (y + t + 1.0)) if t > 0 else 1.0
            rows.append({"wave": wave, "age": age, "gender": gender, "s": s})
        detail = pd.DataFrame(rows, columns=DETAIL_COLUMNS)
    return ObservationTable.from_frames(contacts, participants, grid, brackets, detail=detail)


@dataclass
class SurveyDataset:
    """A dataset directory in memory."""

    table: ObservationTable
    population: PopulationTable
    manifest: dict = field(default_factory=dict)
    truth: pd.DataFrame | None = None
    fine_counts: pd.DataFrame | None = None


def write_dataset(
    path: str | Path,
    table: ObservationTable,
    population: PopulationTable,
    manifest: dict,
    detail: pd.DataFrame | None = None,
    truth: pd.DataFrame | None = None,
    fine_counts: pd.DataFrame | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table.to_contact_frame().to_csv(path / "contacts.csv", index=False)
    table.to_participant_frame().to_csv(path / "participants.csv", index=False, float_format=FLOAT_FORMAT)
    population.to_frame().to_csv(path / "population.csv", index=False, float_format=FLOAT_FORMAT)
    if detail is not None:
        detail.to_csv(path / "detail.csv", index=False, float_format=FLOAT_FORMAT)
    if truth is not None:
        truth.to_csv(path / "truth_intensity.csv", index=False, float_format=FLOAT_FORMAT)
    if fine_counts is not None:
        fine_counts.to_csv(path / "counts_fine.csv", index=False)
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def read_dataset(path: str | Path, grid: AgeGrid | None = None, brackets: CoarseBracketing | None = None) -> SurveyDataset:
    path = Path(path)
    manifest = {}
    manifest_path = path / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    if grid is None:
        if "age_range" not in manifest:
            raise SchemaError("dataset manifest lacks age_range; pass the grid explicitly")
        grid = AgeGrid(*manifest["age_range"])
    if brackets is None:
        if "brackets" not in manifest:
            raise SchemaError("dataset manifest lacks brackets; pass them explicitly")
        brackets = CoarseBracketing.from_strings(grid, manifest["brackets"])

    contacts = pd.read_csv(path / "contacts.csv")
    participants = pd.read_csv(path / "participants.csv")
    population = PopulationTable.from_frame(pd.read_csv(path / "population.csv"), grid)
    detail_path = path / "detail.csv"
    detail = pd.read_csv(detail_path) if detail_path.exists() else None
    table = ObservationTable.from_frames(contacts, participants, grid, brackets, detail=detail)

    truth_path = path / "truth_intensity.csv"
    truth = pd.read_csv(truth_path) if truth_path.exists() else None
    fine_path = path / "counts_fine.csv"
    fine = pd.read_csv(fine_path) if fine_path.exists() else None
    return SurveyDataset(table=table, population=population, manifest=manifest, truth=truth, fine_counts=fine)
