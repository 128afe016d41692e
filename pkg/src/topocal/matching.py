"""Exhaustive template matching against a dictionary of known homographies."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyDictionaryError, InvalidInputError, InvalidParameterError
from .geometry import Homography
from .loss import loss_config, topo_loss
from .raster import OneHotMap, SemanticMap, to_onehot

METRICS = ("mse", "topmse")


@dataclass(frozen=True)
class DictionaryEntry:
    id: int
    template: SemanticMap
    homography: Homography
    source: str = ""


@dataclass(frozen=True)
class MatchResult:
    entry_id: int
    score: float
    metric: str

    def to_dict(self) -> dict:
        return {"entry_id": self.entry_id, "score": self.score, "metric": self.metric}


@dataclass
class Dictionary:
    """Ordered template/homography pairs; one-hot forms are cached on first use."""

    entries: list = field(default_factory=list)
    _onehot: dict = field(default_factory=dict, repr=False)
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.entries = list(self.entries)
        self._index = {e.id: i for i, e in enumerate(self.entries)}
        if len(self._index) != len(self.entries):
            raise InvalidInputError("dictionary entry ids must be unique")
        if self.entries:
            first = self.entries[0].template
            for e in self.entries:
                t = e.template
                if t.size != first.size or t.class_count != first.class_count:
                    raise InvalidInputError("all templates must share size and class count")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, entry_id: int) -> DictionaryEntry:
        return self.entries[self._index[entry_id]]

    def onehot(self, entry: DictionaryEntry) -> OneHotMap:
        oh = self._onehot.get(entry.id)
        if oh is None:
            oh = self._onehot[entry.id] = to_onehot(entry.template)
        return oh


def _metric_cfg(metric: str):
    metric = metric.lower().replace("-", "").replace("_", "")
    if metric not in METRICS:
        raise InvalidParameterError(f"unknown matching metric {metric!r}; expected one of {METRICS}")
    return metric, loss_config(metric)


def score_all(query: SemanticMap, dictionary: Dictionary, metric: str = "topmse") -> list:
    """Metric value for every entry, in dictionary order."""
    if len(dictionary) == 0:
        raise EmptyDictionaryError("cannot match against an empty dictionary")
    metric, cfg = _metric_cfg(metric)
    first = dictionary.entries[0].template
    if query.size != first.size or query.class_count != first.class_count:
        raise InvalidInputError(
            f"query {query.width}x{query.height} does not match templates {first.width}x{first.height}"
        )
    q = to_onehot(query)
    return [MatchResult(e.id, topo_loss(q, dictionary.onehot(e), cfg), metric) for e in dictionary]


def _rank(results: Sequence[MatchResult]):
    return sorted(results, key=lambda r: (r.score, r.entry_id))


def match(query: SemanticMap, dictionary: Dictionary, metric: str = "topmse") -> MatchResult:
    return _rank(score_all(query, dictionary, metric))[0]


def match_topk(query: SemanticMap, dictionary: Dictionary, metric: str = "topmse", k: int = 1) -> list:
    if k < 1:
        raise InvalidParameterError(f"k must be >= 1, got {k}")
    return _rank(score_all(query, dictionary, metric))[:k]


def scores_array(results: Sequence[MatchResult]) -> np.ndarray:
    return np.array([r.score for r in results])
