"""Age-grid algebra: fine ages, coarse reporting brackets, gender pairs and
the age-by-difference rotation used by the random-field parameterisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GENDERS = ("M", "F")

# Ordered gender-pair directions (participant gender, contact gender).
# Only MF, MM and FF carry independent random fields; FM is always derived
# from MF by transposing the contact-rate surface.
PAIRS = ("MM", "MF", "FM", "FF")
MODELED_PAIRS = ("MF", "MM", "FF")


def gender_index(g: str) -> int:
    try:
        return GENDERS.index(g)
    except ValueError:
        raise ValueError(f"unknown gender {g!r}, expected one of {GENDERS}") from None


def pair_index(g: str, h: str) -> int:
    """Index of the (participant gender, contact gender) direction in PAIRS."""
    return 2 * gender_index(g) + gender_index(h)


@dataclass(frozen=True)
class AgeGrid:
    """Consecutive integer ages [min_age, max_age], inclusive."""

    min_age: int
    max_age: int

    def __post_init__(self):
        if self.min_age < 0 or self.max_age < self.min_age:
            raise ValueError(f"invalid age range {self.min_age}..{self.max_age}")

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.min_age, self.max_age + 1)

    @property
    def size(self) -> int:
        return self.max_age - self.min_age + 1

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.min_age + self.max_age)

    @property
    def half_range(self) -> float:
        return 0.5 * (self.max_age - self.min_age)

    def __contains__(self, age) -> bool:
        return self.min_age <= age <= self.max_age and float(age).is_integer()

    def index(self, age: int) -> int:
        if age not in self:
            raise ValueError(f"age {age} outside grid {self.min_age}..{self.max_age}")
        return int(age) - self.min_age

    def scaled(self) -> np.ndarray:
        """Ages shifted so the grid midpoint sits at zero."""
        return self.ages - self.midpoint


@dataclass(frozen=True)
class DiffGrid:
    """Signed age differences d = b - a reachable on an AgeGrid.

    Holds D = 2B - 1 consecutive integers, symmetric about zero.
    """

    grid: AgeGrid

    @property
    def half_span(self) -> int:
        return self.grid.size - 1

    @property
    def diffs(self) -> np.ndarray:
        return np.arange(-self.half_span, self.half_span + 1)

    @property
    def size(self) -> int:
        return 2 * self.grid.size - 1

    def __contains__(self, d) -> bool:
        return -self.half_span <= d <= self.half_span and float(d).is_integer()

    def index(self, d: int) -> int:
        if d not in self:
            raise ValueError(f"age difference {d} outside +/-{self.half_span}")
        return int(d) + self.half_span

    def scaled(self) -> np.ndarray:
        """Differences are already centered; returned as floats for symmetry
        with AgeGrid.scaled()."""
        return self.diffs.astype(float)


def rotate_to_diff(grid: AgeGrid, a: int, b: int) -> tuple[int, int]:
    """Map an (age, age) pair to (age, difference) coordinates.

    The inverse is ``b = a + d``; see :func:`invert_diff`.
    """
    if a not in grid:
        raise ValueError(f"participant age {a} outside grid")
    if b not in grid:
        raise ValueError(f"contact age {b} outside grid")
    return int(a), int(b) - int(a)


def invert_diff(grid: AgeGrid, a: int, d: int) -> int:
    b = int(a) + int(d)
    if a not in grid or b not in grid:
        raise ValueError(f"(a={a}, d={d}) does not map back into the grid")
    return b


def scaled_input(x, half_grid) -> float:
    """Shift a grid coordinate so the grid midpoint sits at zero.

    ``half_grid`` is the AgeGrid or DiffGrid the coordinate lives on.
    """
    if x not in half_grid:
        raise ValueError(f"{x} outside grid")
    if isinstance(half_grid, DiffGrid):
        return float(x)
    return float(x) - half_grid.midpoint


@dataclass(frozen=True)
class CoarseBracketing:
    """Ordered, closed integer brackets that exactly partition an AgeGrid."""

    grid: AgeGrid
    brackets: tuple[tuple[int, int], ...]
    _member: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.brackets:
            raise ValueError("empty bracket list")
        member = np.full(self.grid.size, -1, dtype=int)
        expected_low = self.grid.min_age
        for idx, (low, high) in enumerate(self.brackets):
            if low != expected_low:
                raise ValueError(
                    f"brackets do not partition the grid: expected bracket to "
                    f"start at {expected_low}, got {low}-{high}"
                )
            if high < low:
                raise ValueError(f"invalid bracket {low}-{high}")
            member[low - self.grid.min_age : high - self.grid.min_age + 1] = idx
            expected_low = high + 1
        if expected_low != self.grid.max_age + 1:
            raise ValueError(
                f"brackets stop at {expected_low - 1}, grid ends at {self.grid.max_age}"
            )
        object.__setattr__(self, "_member", member)

    @classmethod
    def from_strings(cls, grid: AgeGrid, labels) -> "CoarseBracketing":
        """Parse brackets given as 'low-high' strings (e.g. '25-34')."""
        brackets = []
        for label in labels:
            try:
                low, high = (int(part) for part in str(label).split("-"))
            except ValueError:
                raise ValueError(f"malformed bracket {label!r}, expected 'low-high'") from None
            brackets.append((low, high))
        return cls(grid, tuple(brackets))

    @property
    def size(self) -> int:
        return len(self.brackets)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(f"{lo}-{hi}" for lo, hi in self.brackets)

    def bracket_of(self, b: int) -> int:
        """Index of the unique bracket containing fine age ``b``."""
        if b not in self.grid:
            raise ValueError(f"age {b} outside grid {self.grid.min_age}..{self.grid.max_age}")
        return int(self._member[int(b) - self.grid.min_age])

    def membership_matrix(self) -> np.ndarray:
        """0/1 matrix (fine ages x brackets) used to aggregate fine cells."""
        mat = np.zeros((self.grid.size, self.size))
        mat[np.arange(self.grid.size), self._member] = 1.0
        return mat


# Coarse contact-age reporting scheme of COVID-era surveys on the 0..84 grid.
SURVEY_BRACKET_LABELS = (
    "0-4", "5-9", "10-14", "15-19", "20-24", "25-34", "35-44",
    "45-54", "55-64", "65-69", "70-74", "75-79", "80-84",
)

# Aggregation scheme used for the synthetic 6..49 datasets.
SIM_BRACKET_LABELS = ("6-9", "10-14", "15-19", "20-24", "25-34", "35-44", "45-49")


def survey_bracketing(grid: AgeGrid | None = None) -> CoarseBracketing:
    grid = grid or AgeGrid(0, 84)
    return CoarseBracketing.from_strings(grid, SURVEY_BRACKET_LABELS)


def sim_bracketing(grid: AgeGrid | None = None) -> CoarseBracketing:
    grid = grid or AgeGrid(6, 49)
    return CoarseBracketing.from_strings(grid, SIM_BRACKET_LABELS)
