"""Neuron addressing and dense per-neuron score containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from .errors import EngineInputError, NumericError


class NeuronId(NamedTuple):
    layer: int
    index: int

    def flat(self, d_ffn: int) -> int:
        return self.layer * d_ffn + self.index

    @classmethod
    def from_flat(cls, flat: int, d_ffn: int) -> "NeuronId":
        return cls(int(flat) // d_ffn, int(flat) % d_ffn)


def check_neuron(nid: NeuronId, n_layers: int, d_ffn: int) -> None:
    if not (0 <= nid.layer < n_layers and 0 <= nid.index < d_ffn):
        raise EngineInputError(f"neuron {tuple(nid)} outside {n_layers}x{d_ffn}")


@dataclass
class NeuronScoreMap:
    """Dense real score per FFN neuron, shape ``(n_layers, d_ffn)``.

    ``meta`` carries provenance such as the step count ``m``, the target kind
    and the ids of the examples/proxies that contributed.
    """

    scores: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError("score map must be 2-D (n_layers, d_ffn)")
        if not np.all(np.isfinite(self.scores)):
            raise NumericError("score map contains non-finite values")

    @property
    def n_layers(self) -> int:
        return self.scores.shape[0]

    @property
    def d_ffn(self) -> int:
        return self.scores.shape[1]

    def __len__(self) -> int:
        return self.scores.size

    def __getitem__(self, nid: NeuronId) -> float:
        return float(self.scores[nid[0], nid[1]])

    def __add__(self, other: "NeuronScoreMap") -> "NeuronScoreMap":
        if self.scores.shape != other.scores.shape:
            raise ValueError("score maps have different shapes")
        ids = list(self.meta.get("sources", [])) + list(other.meta.get("sources", []))
        meta = {**self.meta, "sources": ids}
        return NeuronScoreMap(self.scores + other.scores, meta)

    def flat(self) -> np.ndarray:
        return self.scores.reshape(-1)


def top_order(values: np.ndarray) -> np.ndarray:
    """Flat indices sorted by descending value; ties go to the lower (layer, index)."""
    return np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")


def bottom_order(values: np.ndarray) -> np.ndarray:
    """Flat indices sorted by ascending value; ties go to the lower (layer, index)."""
    return np.argsort(np.asarray(values, dtype=np.float64), kind="stable")


@dataclass
class NeuronSets:
    """Task-level good/bad neuron lists.

    ``good`` is sorted by descending score and ``bad`` by ascending score.
    ``shortfall`` records how many slots of ``K`` could not be filled because
    too few neurons had the required sign.
    """

    good: list[tuple[NeuronId, float]]
    bad: list[tuple[NeuronId, float]]
    ambiguous: frozenset[NeuronId] = frozenset()
    z: int = 0
    K: int = 0
    shortfall: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        g = {n for n, _ in self.good}
        b = {n for n, _ in self.bad}
        if g & b:
            raise ValueError("good and bad sets overlap")
        if self.ambiguous & (g | b):
            raise ValueError("ambiguous neurons leaked into the final sets")

    @property
    def good_ids(self) -> list[NeuronId]:
        return [n for n, _ in self.good]

    @property
    def bad_ids(self) -> list[NeuronId]:
        return [n for n, _ in self.bad]
