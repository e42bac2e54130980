"""Stated-preference instrument: choice packages, cost rescaling and the
factorial grid of travel contexts.

Money is held as integer cents so that rescaling and serialisation are
exact; dollars are only produced at the boundary (``Alternative.cost``).

Average trade-off ratio
-----------------------
The published package levels (6.6 and 29.1 USD/h) do not pin down which
alternative pairs enter the average.  Three pairings are available through
``average_tradeoff_ratio(..., scheme=...)``:

========================  ==========  ==========  =====================
scheme                    original    ratio-29.1  meets 6.6±0.3/29.1±0.5
========================  ==========  ==========  =====================
``"all_pairs"``           5.99        27.05       no
``"adjacent_time"``       6.33        28.58       no (29.1 side)
``"tradeoff"`` (default)  6.43        29.04       yes
========================  ==========  ==========  =====================

``"tradeoff"`` keeps only pairs that actually present a trade-off (the
faster alternative is strictly more expensive) and pools them as
``60 * sum|dcost| / sum|dtime|``.  Every scheme is linear in a uniform cost
rescale.  ``ChoicePackage.declared_ratio`` always carries the published
level, whichever scheme is used for the computed value.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import InvalidArgumentError, UndefinedRatioError

N_ALTERNATIVES = 13

PURPOSES = ("personal", "business", "commute", "leisure")
INCOMES = (15, 25, 35, 50)
SEXES = ("male", "female")
AGE_BANDS = ("20s", "50s")
EDUCATIONS = ("high_school", "bachelors_plus")

ORIGINAL_LABEL = "original-6.6"
BASE_LABEL = "ratio-29.1"
SCALE_FACTORS = (Fraction(1, 3), Fraction(2, 3), Fraction(1), Fraction(4, 3), Fraction(5, 3))
PACKAGE_LABELS = (ORIGINAL_LABEL, "ratio-9.7", "ratio-19.4", "ratio-29.1", "ratio-38.8", "ratio-48.5")

FACTOR_NAMES = ("package_label", "purpose", "income", "sex", "age_band", "education")
FACTOR_LEVELS = {
    "package_label": PACKAGE_LABELS,
    "purpose": PURPOSES,
    "income": INCOMES,
    "sex": SEXES,
    "age_band": AGE_BANDS,
    "education": EDUCATIONS,
}

TRADEOFF_SCHEMES = ("tradeoff", "all_pairs", "adjacent_time")


@dataclass(frozen=True)
class Alternative:
    id: int
    cost_cents: int
    time_min: int
    trucks: bool

    def __post_init__(self):
        if not 1 <= self.id <= N_ALTERNATIVES:
            raise InvalidArgumentError(f"alternative id {self.id} outside 1..{N_ALTERNATIVES}")
        if self.cost_cents < 0:
            raise InvalidArgumentError(f"alternative {self.id}: negative cost")
        if self.time_min <= 0:
            raise InvalidArgumentError(f"alternative {self.id}: time must be positive")

    @property
    def cost(self) -> float:
        """Cost in USD."""
        return self.cost_cents / 100

    def attributes(self) -> tuple[float, float, float]:
        return (self.cost, float(self.time_min), 1.0 if self.trucks else 0.0)


@dataclass(frozen=True)
class ChoiceSet:
    index: int
    alternatives: tuple[Alternative, ...]

    def __post_init__(self):
        if self.index not in (1, 2):
            raise InvalidArgumentError(f"choice set index must be 1 or 2, got {self.index}")
        ids = sorted(a.id for a in self.alternatives)
        if ids != list(range(1, N_ALTERNATIVES + 1)):
            raise InvalidArgumentError(
                f"choice set {self.index} must hold alternatives 1..{N_ALTERNATIVES} exactly once"
            )

    def alternative(self, alt_id: int) -> Alternative:
        for a in self.alternatives:
            if a.id == alt_id:
                return a
        raise KeyError(alt_id)

    def attribute_matrix(self) -> list[tuple[float, float, float]]:
        """Rows of (cost USD, time min, truck 0/1) ordered by alternative id."""
        return [a.attributes() for a in sorted(self.alternatives, key=lambda a: a.id)]


@dataclass(frozen=True)
class ChoicePackage:
    label: str
    sets: tuple[ChoiceSet, ChoiceSet]
    declared_ratio: float

    def __post_init__(self):
        if len(self.sets) != 2 or sorted(s.index for s in self.sets) != [1, 2]:
            raise InvalidArgumentError(f"package {self.label!r} needs choice sets 1 and 2")
        if not self.declared_ratio > 0:
            raise InvalidArgumentError(f"package {self.label!r}: declared_ratio must be positive")

    def choice_set(self, index: int) -> ChoiceSet:
        for s in self.sets:
            if s.index == index:
                return s
        raise KeyError(index)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "declared_ratio": self.declared_ratio,
            "sets": [
                {
                    "index": s.index,
                    "alternatives": [
                        {"id": a.id, "cost_cents": a.cost_cents, "time_min": a.time_min, "trucks": a.trucks}
                        for a in s.alternatives
                    ],
                }
                for s in self.sets
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChoicePackage":
        try:
            sets = tuple(
                ChoiceSet(
                    int(s["index"]),
                    tuple(
                        Alternative(int(a["id"]), int(a["cost_cents"]), int(a["time_min"]), bool(a["trucks"]))
                        for a in s["alternatives"]
                    ),
                )
                for s in data["sets"]
            )
            return cls(str(data["label"]), sets, float(data["declared_ratio"]))
        except (KeyError, TypeError) as exc:
            raise InvalidArgumentError(f"malformed package document: {exc!r}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChoicePackage":
        return cls.from_dict(json.loads(text))


def _make_set(index: int, rows: Sequence[tuple[int, int, bool]]) -> ChoiceSet:
    return ChoiceSet(index, tuple(Alternative(i + 1, c, t, k) for i, (c, t, k) in enumerate(rows)))


# (cost in cents, time in minutes, trucks)
_ORIGINAL_SET1 = [
    (0, 40, True), (35, 30, True), (70, 30, True), (100, 30, True), (35, 20, True),
    (70, 20, True), (135, 20, True), (200, 10, True), (335, 10, True), (35, 40, False),
    (70, 30, False), (175, 20, False), (400, 10, False),
]
_ORIGINAL_SET2 = [
    (0, 60, True), (50, 45, True), (100, 45, True), (150, 45, True), (50, 30, True),
    (100, 30, True), (200, 30, True), (300, 15, True), (500, 15, True), (50, 60, False),
    (100, 45, False), (250, 30, False), (600, 15, False),
]
_BASE_SET1 = [
    (0, 40, True), (150, 30, True), (300, 30, True), (450, 30, True), (150, 20, True),
    (300, 20, True), (600, 20, True), (900, 10, True), (1500, 10, True), (150, 40, False),
    (300, 30, False), (800, 20, False), (1800, 10, False),
]
_BASE_SET2 = [
    (0, 60, True), (225, 45, True), (450, 45, True), (675, 45, True), (225, 30, True),
    (450, 30, True), (900, 30, True), (1350, 15, True), (2250, 15, True), (225, 60, False),
    (450, 45, False), (1200, 30, False), (2700, 15, False),
]


def builtin_packages() -> list[ChoicePackage]:
    """The two transcribed packages: the original design and the 29.1 USD/h one."""
    return [
        ChoicePackage(ORIGINAL_LABEL, (_make_set(1, _ORIGINAL_SET1), _make_set(2, _ORIGINAL_SET2)), 6.6),
        ChoicePackage(BASE_LABEL, (_make_set(1, _BASE_SET1), _make_set(2, _BASE_SET2)), 29.1),
    ]


def _as_fraction(factor) -> Fraction:
    if isinstance(factor, Fraction):
        return factor
    if isinstance(factor, int):
        return Fraction(factor)
    if isinstance(factor, str):
        return Fraction(factor)
    # floats such as 1/3 come back to the intended small rational
    return Fraction(factor).limit_denominator(10**6)


def _round_half_away(x: Fraction) -> int:
    sign = -1 if x < 0 else 1
    q, r = divmod(abs(x.numerator), x.denominator)
    if 2 * r >= x.denominator:
        q += 1
    return sign * q


def ratio_label(ratio: float) -> str:
    return f"ratio-{ratio:.1f}"


def scale_costs(package: ChoicePackage, factor, label: str | None = None) -> ChoicePackage:
    """Multiply every cost by ``factor`` (rounded to the cent, ties away from zero).

    Times and truck flags are untouched.  The declared ratio is scaled and
    rounded to one decimal; the new label defaults to ``ratio-<declared>``.
    """
    try:
        k = _as_fraction(factor)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise InvalidArgumentError(f"invalid scale factor {factor!r}") from exc
    if k <= 0:
        raise InvalidArgumentError(f"scale factor must be positive, got {factor!r}")
    if k == 1 and label is None:
        return package
    sets = tuple(
        ChoiceSet(
            s.index,
            tuple(
                Alternative(a.id, _round_half_away(a.cost_cents * k), a.time_min, a.trucks)
                for a in s.alternatives
            ),
        )
        for s in package.sets
    )
    declared = Fraction(Decimal(repr(package.declared_ratio))) * k
    declared = float(
        (Decimal(declared.numerator) / Decimal(declared.denominator)).quantize(
            Decimal("0.1"), rounding=ROUND_HALF_UP
        )
    )
    return ChoicePackage(label or ratio_label(declared), sets, declared)


def choice_setting_packages() -> list[ChoicePackage]:
    """The six choice settings: the original package plus the rescaled family."""
    original, base = builtin_packages()
    return [original] + [scale_costs(base, k) for k in SCALE_FACTORS]


def package_registry() -> dict[str, ChoicePackage]:
    return {p.label: p for p in choice_setting_packages()}


def _pairs(choice_set: ChoiceSet, scheme: str):
    alts = choice_set.alternatives
    if scheme == "adjacent_time":
        levels = sorted({a.time_min for a in alts})
        neighbours = {(lo, hi) for lo, hi in zip(levels, levels[1:])}
    for a, b in itertools.combinations(alts, 2):
        if a.time_min == b.time_min:
            continue
        if scheme == "tradeoff":
            if (a.cost_cents - b.cost_cents) * (a.time_min - b.time_min) >= 0:
                continue
        elif scheme == "adjacent_time":
            if (min(a.time_min, b.time_min), max(a.time_min, b.time_min)) not in neighbours:
                continue
        yield abs(a.cost_cents - b.cost_cents), abs(a.time_min - b.time_min)


def average_tradeoff_ratio(package: ChoicePackage, scheme: str = "tradeoff") -> float:
    """Package-level average of |dcost|/|dtime| in USD per hour.

    Pairs are formed within each choice set and both sets are pooled.
    ``"all_pairs"`` and ``"adjacent_time"`` take the unweighted mean of pair
    ratios; ``"tradeoff"`` pools differences (a time-weighted mean).
    """
    if scheme not in TRADEOFF_SCHEMES:
        raise InvalidArgumentError(f"unknown trade-off scheme {scheme!r}")
    pairs = [p for s in package.sets for p in _pairs(s, scheme)]
    if not pairs:
        raise UndefinedRatioError(f"package {package.label!r} has no pair with differing travel times")
    if scheme == "tradeoff":
        return 0.6 * sum(dc for dc, _ in pairs) / sum(dt for _, dt in pairs)
    return 0.6 * float(sum(Fraction(dc, dt) for dc, dt in pairs)) / len(pairs)


@dataclass(frozen=True)
class ScenarioCell:
    package_label: str
    purpose: str
    income: int
    sex: str
    age_band: str
    education: str

    def __post_init__(self):
        bad = [
            f"{name}={getattr(self, name)!r}"
            for name in FACTOR_NAMES
            if getattr(self, name) not in FACTOR_LEVELS[name]
        ]
        if bad:
            raise InvalidArgumentError("scenario cell outside the factor levels: " + ", ".join(bad))

    def key(self) -> str:
        return "|".join(str(getattr(self, name)) for name in FACTOR_NAMES)

    @classmethod
    def from_key(cls, key: str) -> "ScenarioCell":
        parts = key.split("|")
        if len(parts) != len(FACTOR_NAMES):
            raise InvalidArgumentError(f"malformed cell key {key!r}")
        values = dict(zip(FACTOR_NAMES, parts))
        values["income"] = int(values["income"])
        return cls(**values)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in FACTOR_NAMES}


@dataclass(frozen=True)
class FactorGrid:
    factors: tuple[tuple[str, tuple], ...] = field(default_factory=tuple)

    def __post_init__(self):
        names = [name for name, _ in self.factors]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"duplicate factor names in {names}")
        for name, levels in self.factors:
            if len(levels) == 0:
                raise InvalidArgumentError(f"factor {name!r} has no levels")

    @classmethod
    def full(cls, **overrides: Iterable) -> "FactorGrid":
        """Full grid, with any factor optionally restricted to a subset of levels."""
        unknown = set(overrides) - set(FACTOR_NAMES)
        if unknown:
            raise InvalidArgumentError(f"unknown factor(s): {sorted(unknown)}")
        return cls(tuple((name, tuple(overrides.get(name, FACTOR_LEVELS[name]))) for name in FACTOR_NAMES))

    def levels(self, name: str) -> tuple:
        return dict(self.factors)[name]

    def size(self) -> int:
        n = 1
        for _, levels in self.factors:
            n *= len(levels)
        return n

    def to_dict(self) -> dict:
        return {"factors": [[name, list(levels)] for name, levels in self.factors]}

    @classmethod
    def from_dict(cls, data: dict) -> "FactorGrid":
        return cls(tuple((name, tuple(levels)) for name, levels in data["factors"]))


def factorial_cells(grid: FactorGrid) -> list[ScenarioCell]:
    """Cartesian product of the grid levels, first factor varying slowest."""
    names = [name for name, _ in grid.factors]
    unknown = [n for n in names if n not in FACTOR_NAMES]
    if unknown:
        raise InvalidArgumentError(f"unknown factor(s): {unknown}")
    missing = [n for n in FACTOR_NAMES if n not in names]
    if missing:
        raise InvalidArgumentError(f"grid is missing factor(s): {missing}")
    for name, levels in grid.factors:
        if not levels:
            raise InvalidArgumentError(f"factor {name!r} has no levels")
    cells = []
    for combo in itertools.product(*(levels for _, levels in grid.factors)):
        cells.append(ScenarioCell(**dict(zip(names, combo))))
    return cells
