"""Enhance/degrade plans built from good and bad neuron lists."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .engine import DOUBLE, ZERO, OverrideMap
from .errors import IntegrityError
from .neurons import NeuronId, NeuronSets

DIRECTIONS = ("enhance", "degrade")
PLAN_FILE_VERSION = 1


@dataclass(frozen=True)
class InterventionPlan:
    direction: str
    budget: int
    ratio: float
    selected_good: tuple[NeuronId, ...]
    selected_bad: tuple[NeuronId, ...]
    shortfall: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if len(self.selected_good) + len(self.selected_bad) > self.budget:
            raise ValueError("plan exceeds its budget")
        if set(self.selected_good) & set(self.selected_bad):
            raise ValueError("a neuron cannot be both good and bad in one plan")

    @property
    def override_map(self) -> OverrideMap:
        up, down = (DOUBLE, ZERO) if self.direction == "enhance" else (ZERO, DOUBLE)
        return OverrideMap([(n, up) for n in self.selected_good] + [(n, down) for n in self.selected_bad])

    @property
    def label(self) -> str:
        return f"{self.direction}@{self.ratio:.1f}"

    def summary(self) -> dict:
        return {
            "direction": self.direction,
            "budget": self.budget,
            "ratio": self.ratio,
            "n_good": len(self.selected_good),
            "n_bad": len(self.selected_bad),
            "shortfall": dict(self.shortfall),
        }


def build_plan(sets: NeuronSets, direction: str, budget: int, ratio: float, refill: bool = False) -> InterventionPlan:
    """Take ``round(ratio * budget)`` good neurons and the rest bad, from the list heads.

    A list shorter than its share gives everything it has and the gap is
    recorded in ``shortfall``. With ``refill`` the gap is topped up from the
    other list instead, so the total stays at the budget when possible.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if not sets.good and not sets.bad:
        raise ValueError("both neuron sets are empty")
    # round half away from zero: 0.5 * 5 -> 3, not banker's 2
    want_good = int(ratio * budget + 0.5 + 1e-9)
    want_bad = budget - want_good
    n_good = min(want_good, len(sets.good))
    n_bad = min(want_bad, len(sets.bad))
    if refill:
        gap_good, gap_bad = want_good - n_good, want_bad - n_bad
        n_good = min(len(sets.good), n_good + gap_bad)
        n_bad = min(len(sets.bad), n_bad + gap_good)
    shortfall = {"good": max(0, want_good - n_good), "bad": max(0, want_bad - n_bad)}
    return InterventionPlan(
        direction,
        budget,
        round(float(ratio), 10),
        tuple(sets.good_ids[:n_good]),
        tuple(sets.bad_ids[:n_bad]),
        shortfall,
    )


def sweep_ratios(step: float = 0.1) -> list[float]:
    n = int(round(1.0 / step))
    if abs(n * step - 1.0) > 1e-9:
        raise ValueError("sweep step must divide 1 evenly")
    return [round(i / n, 10) for i in range(n + 1)]


def ratio_sweep(sets: NeuronSets, direction: str, budget: int, step: float = 0.1) -> list[InterventionPlan]:
    """One plan per ratio 0.0, 0.1, ..., 1.0.

    The endpoints stay pure single-list controls (and may be empty no-ops).
    Mixed ratios refill a short list from the other one.
    """
    return [build_plan(sets, direction, budget, r, refill=0.0 < r < 1.0) for r in sweep_ratios(step)]


def plan_to_json(plan: InterventionPlan) -> dict:
    return {
        **plan.summary(),
        "overrides": plan.override_map.to_records(),
        "good": [{"layer": n.layer, "index": n.index} for n in plan.selected_good],
        "bad": [{"layer": n.layer, "index": n.index} for n in plan.selected_bad],
    }


def plan_from_json(d: Mapping) -> InterventionPlan:
    return InterventionPlan(
        d["direction"],
        int(d["budget"]),
        float(d["ratio"]),
        tuple(NeuronId(r["layer"], r["index"]) for r in d["good"]),
        tuple(NeuronId(r["layer"], r["index"]) for r in d["bad"]),
        dict(d.get("shortfall", {})),
    )


def write_plans(path: str | Path, plans, meta: Mapping) -> None:
    doc = {"version": PLAN_FILE_VERSION, **dict(meta), "plans": [plan_to_json(p) for p in plans]}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def read_plans(path: str | Path) -> tuple[list[InterventionPlan], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != PLAN_FILE_VERSION:
        raise IntegrityError(f"{path}: unsupported plan file version {doc.get('version')!r}")
    meta = {k: v for k, v in doc.items() if k not in ("plans", "version")}
    return [plan_from_json(p) for p in doc["plans"]], meta
