"""Economic value calculators: productivity delta, programming wage sums
from occupation task tables, and social-surplus changes under perfectly
elastic or perfectly inelastic code supply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

N_FREQUENCY_LEVELS = 7

# Time weight per task-frequency level (1 = yearly or less ... 7 = hourly+).
DISTRIBUTIVE_WEIGHTS = (0.0, 0.02, 0.05, 0.08, 0.10, 0.25, 0.50)
RELEVANCE_WEIGHTS = (0.5, 1.0, 4.0, 48.0, 240.0, 480.0, 1920.0)

WAGE_TO_COMPENSATION = 1.449


@dataclass
class SurplusInputs:
    delta: float              # fractional productivity effect
    eta: float                # demand elasticity, expected < 0
    v1: float                 # pre-adoption value of code (billions USD)
    scenario: Literal["elastic", "inelastic"] = "inelastic"

    def __post_init__(self):
        if self.eta == 0:
            raise ValueError("eta must be nonzero")
        if self.v1 <= 0:
            raise ValueError("v1 must be positive")


@dataclass
class TaskRow:
    occupation_id: str
    task_id: str
    frequency_shares: tuple[float, ...]  # 7 responder shares, each in [0,1]
    programming_share: float

    def __post_init__(self):
        if len(self.frequency_shares) != N_FREQUENCY_LEVELS:
            raise ValueError("frequency_shares must have 7 levels")
        if any(s < 0 for s in self.frequency_shares):
            raise ValueError("frequency shares must be >= 0")
        if not 0.0 <= self.programming_share <= 1.0:
            raise ValueError("programming_share must lie in [0, 1]")


@dataclass
class OccupationRow:
    occupation_id: str
    annual_wage: float
    employment: float


@dataclass
class MicrodataRow:
    weight: float
    annual_wage: float
    occupation_id: str


@dataclass
class WageTaskTable:
    tasks: list[TaskRow]
    occupations: dict[str, OccupationRow]
    weight_scheme: Literal["distributive", "relevance"] = "distributive"
    r: float = WAGE_TO_COMPENSATION

    def __post_init__(self):
        if self.r <= 1.0:
            raise ValueError("wage-to-compensation ratio must exceed 1")


def productivity_delta(beta: float, adoption: float) -> float:
    """exp(beta * adoption) - 1."""
    return math.exp(beta * adoption) - 1.0


def surplus_elastic(inputs: SurplusInputs) -> float:
    """-(delta/eta) * V1 * (1 + delta/2)."""
    return -(inputs.delta / inputs.eta) * inputs.v1 * (1.0 + inputs.delta / 2.0)


def surplus_inelastic(inputs: SurplusInputs) -> float:
    """delta * V1 * (1 + delta/(2*eta))."""
    return inputs.delta * inputs.v1 * (1.0 + inputs.delta / (2.0 * inputs.eta))


def task_time_shares(tasks: Sequence[TaskRow], scheme: str,
                     renormalize: bool = True) -> dict[str, float]:
    """Share of working time per task within one occupation.

    distributive: each frequency level owns a fixed slice of time, split
    across the level's tasks by responder share; unoccupied levels either
    forfeit their slice (renormalize=False) or get rescaled away keeping
    proportions (default).
    relevance: task weight = sum over levels of weight*share, normalized
    to sum to one within the occupation.
    """
    if scheme == "distributive":
        level_totals = [0.0] * N_FREQUENCY_LEVELS
        for t in tasks:
            for c in range(N_FREQUENCY_LEVELS):
                level_totals[c] += t.frequency_shares[c]
        occupied_mass = sum(DISTRIBUTIVE_WEIGHTS[c]
                            for c in range(N_FREQUENCY_LEVELS) if level_totals[c] > 0)
        if occupied_mass <= 0:
            raise ValueError("zero total task weight")
        scale = 1.0 / occupied_mass if renormalize else 1.0
        shares: dict[str, float] = {t.task_id: 0.0 for t in tasks}
        for c in range(N_FREQUENCY_LEVELS):
            if level_totals[c] <= 0:
                continue
            for t in tasks:
                shares[t.task_id] += (DISTRIBUTIVE_WEIGHTS[c] * scale
                                      * t.frequency_shares[c] / level_totals[c])
        return shares
    if scheme == "relevance":
        raw = {}
        for t in tasks:
            raw[t.task_id] = sum(w * s for w, s in zip(RELEVANCE_WEIGHTS, t.frequency_shares))
        total = sum(raw.values())
        if total <= 0:
            raise ValueError("zero total task weight")
        return {tid: v / total for tid, v in raw.items()}
    raise ValueError(f"unknown weight scheme {scheme!r}")


@dataclass
class WageSumResult:
    total: float
    excluded_occupations: list[str] = field(default_factory=list)

    def __float__(self):
        return self.total


def wage_sum(table: WageTaskTable, source: str = "aggregate",
             microdata: Optional[Sequence[MicrodataRow]] = None,
             renormalize: bool = True) -> WageSumResult:
    """Total compensation attributable to programming time.

    aggregate: r * sum_o wage_o * employment_o * sum_t time_t * prog_share_t
    microdata: r * sum_i w_i * wage_i * (same occupation task factor)
    Occupations whose tasks carry zero total weight are excluded and listed.
    """
    by_occ: dict[str, list[TaskRow]] = {}
    for t in table.tasks:
        by_occ.setdefault(t.occupation_id, []).append(t)

    prog_time: dict[str, float] = {}
    excluded: list[str] = []
    for occ, tasks in sorted(by_occ.items()):
        try:
            shares = task_time_shares(tasks, table.weight_scheme, renormalize=renormalize)
        except ValueError:
            excluded.append(occ)
            continue
        prog_time[occ] = sum(shares[t.task_id] * t.programming_share for t in tasks)

    if source == "aggregate":
        missing = sorted(set(prog_time) - set(table.occupations))
        if missing:
            raise ValueError(f"occupations lacking wage/employment data: {', '.join(missing)}")
        total = sum(table.occupations[occ].annual_wage * table.occupations[occ].employment
                    * factor for occ, factor in sorted(prog_time.items()))
    elif source == "microdata":
        if microdata is None:
            raise ValueError("microdata source requires rows")
        missing = sorted({m.occupation_id for m in microdata} - set(prog_time) - set(excluded))
        if missing:
            raise ValueError(f"occupations lacking task data: {', '.join(missing)}")
        total = sum(m.weight * m.annual_wage * prog_time.get(m.occupation_id, 0.0)
                    for m in microdata)
    else:
        raise ValueError(f"unknown source {source!r}")
    return WageSumResult(total=table.r * total, excluded_occupations=excluded)
