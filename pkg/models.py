#!/usr/bin/env python3
"""
Trifle Data Models
Type-safe classes shared by the circuit engine, the datasets and the evaluation harness
"""
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

NORMALIZATION_TOL = 1e-9


class TrifleError(Exception):
    """Root of every domain error raised by this package"""


class NodeKind(Enum):
    """Input, sum or product"""
    INPUT = "input"
    SUM = "sum"
    PRODUCT = "product"


@dataclass(frozen=True)
class Variable:
    """A categorical variable of the flattened trajectory window"""
    index: int
    cardinality: int
    name: str = ""

    def __post_init__(self):
        if self.index < 0:
            raise TrifleError(f"variable index must be >= 0, got {self.index}")
        if self.cardinality < 2:
            raise TrifleError(f"variable {self.index} needs cardinality >= 2, got {self.cardinality}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        return cls(index=int(data["index"]), cardinality=int(data["cardinality"]), name=data.get("name", ""))


EvidenceEntry = Union[None, int, FrozenSet[int]]


@dataclass(frozen=True)
class EvidenceMask:
    """Partial assignment: observed categories and restricted category subsets

    A variable absent from both maps is unobserved.
    """
    observed: Mapping[int, int] = field(default_factory=dict)
    restricted: Mapping[int, FrozenSet[int]] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.observed) & set(self.restricted)
        if overlap:
            raise TrifleError(f"variables both observed and restricted: {sorted(overlap)}")
        for var, cat in self.observed.items():
            if cat < 0:
                raise TrifleError(f"negative category {cat} for variable {var}")
        for var, allowed in self.restricted.items():
            if not allowed:
                raise TrifleError(f"empty restriction on variable {var}")

    @classmethod
    def empty(cls) -> "EvidenceMask":
        return cls({}, {})

    @classmethod
    def of(cls, observed: Optional[Mapping[int, int]] = None,
           restricted: Optional[Mapping[int, Iterable[int]]] = None) -> "EvidenceMask":
        return cls(dict(observed or {}),
                   {v: frozenset(int(c) for c in s) for v, s in (restricted or {}).items()})

    def entry(self, var: int) -> EvidenceEntry:
        """None when unobserved, an int when observed, a frozenset when restricted"""
        if var in self.observed:
            return self.observed[var]
        return self.restricted.get(var)

    def is_unobserved(self, var: int) -> bool:
        return var not in self.observed and var not in self.restricted

    @property
    def variables(self) -> List[int]:
        return sorted(set(self.observed) | set(self.restricted))

    def observe(self, var: int, category: int) -> "EvidenceMask":
        observed = dict(self.observed)
        observed[var] = int(category)
        restricted = {v: s for v, s in self.restricted.items() if v != var}
        return EvidenceMask(observed, restricted)

    def restrict(self, var: int, allowed: Iterable[int]) -> "EvidenceMask":
        restricted = dict(self.restricted)
        restricted[var] = frozenset(int(c) for c in allowed)
        observed = {v: c for v, c in self.observed.items() if v != var}
        return EvidenceMask(observed, restricted)

    def merge(self, other: "EvidenceMask") -> "EvidenceMask":
        """Union of two masks that agree wherever both speak"""
        for var in other.variables:
            mine = self.entry(var)
            if mine is not None and mine != other.entry(var):
                raise TrifleError(f"conflicting evidence on variable {var}")
        return EvidenceMask({**self.observed, **other.observed}, {**self.restricted, **other.restricted})

    def to_dict(self) -> dict:
        return {"observed": {str(k): v for k, v in sorted(self.observed.items())},
                "restricted": {str(k): sorted(s) for k, s in sorted(self.restricted.items())}}

    @classmethod
    def from_dict(cls, data: dict):
        return cls.of({int(k): int(v) for k, v in data.get("observed", {}).items()},
                      {int(k): v for k, v in data.get("restricted", {}).items()})


@dataclass(frozen=True)
class ValueMap:
    """Real value of every category of a value variable (return or reward units)"""
    values: Tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise TrifleError("value map needs at least one category")
        if not all(math.isfinite(v) for v in self.values):
            raise TrifleError("value map entries must be finite")

    @classmethod
    def of(cls, values: Iterable[float]) -> "ValueMap":
        return cls(tuple(float(v) for v in values))

    def __len__(self) -> int:
        return len(self.values)

    def __call__(self, category: int) -> float:
        return self.values[category]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def scaled(self, factor: float) -> "ValueMap":
        return ValueMap.of(factor * v for v in self.values)


@dataclass(frozen=True)
class CategoricalDist:
    """Probability vector over the categories of one variable"""
    probs: Tuple[float, ...]

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.size == 0 or np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise TrifleError("categorical probabilities must be finite and nonnegative")
        if abs(arr.sum() - 1.0) > NORMALIZATION_TOL:
            raise TrifleError(f"categorical probabilities sum to {arr.sum()!r}, not 1")

    @classmethod
    def of(cls, probs: Iterable[float]) -> "CategoricalDist":
        return cls(tuple(float(p) for p in probs))

    def __len__(self) -> int:
        return len(self.probs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)

    def expectation(self, vm: ValueMap) -> float:
        return float(self.as_array() @ vm.as_array())


@dataclass
class RawTrajectory:
    """One logged episode: state ids, action ids and rewards per step"""
    states: List[int]
    actions: List[int]
    rewards: List[float]
    terminal: bool = True

    def __post_init__(self):
        if not self.states:
            raise TrifleError("trajectory has no steps")
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise TrifleError("trajectory columns differ in length")
        if not all(math.isfinite(r) for r in self.rewards):
            raise TrifleError("trajectory rewards must be finite")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def total_return(self) -> float:
        return float(sum(self.rewards))

    def to_dict(self) -> dict:
        return {"states": [int(s) for s in self.states], "actions": [int(a) for a in self.actions],
                "rewards": [float(r) for r in self.rewards], "terminal": bool(self.terminal)}

    @classmethod
    def from_dict(cls, data: dict):
        return cls(states=[int(s) for s in data["states"]], actions=[int(a) for a in data["actions"]],
                   rewards=[float(r) for r in data["rewards"]], terminal=bool(data.get("terminal", True)))


@dataclass
class LabeledTrajectory:
    """A raw trajectory plus its per-step return-to-go"""
    raw: RawTrajectory
    rtg: List[float]
    gamma: float

    def __len__(self) -> int:
        return len(self.raw)


@dataclass
class EpisodeMetrics:
    """Per-episode outcome of one evaluation rollout"""
    episode: int
    seed: int
    total_return: float = 0.0
    penalty_count: int = 0
    wall_hits: int = 0
    boundary_hits: int = 0
    success: bool = False
    steps: int = 0
    predicted: List[float] = field(default_factory=list)
    realized: List[float] = field(default_factory=list)
    optimality: List[float] = field(default_factory=list)

    @property
    def mean_predicted(self) -> Optional[float]:
        return float(np.mean(self.predicted)) if self.predicted else None

    @property
    def mean_realized(self) -> Optional[float]:
        return float(np.mean(self.realized)) if self.realized else None

    @property
    def mean_optimality(self) -> Optional[float]:
        return float(np.mean(self.optimality)) if self.optimality else None

    def to_row(self) -> Dict[str, object]:
        """Flat CSV row"""
        return {"episode": self.episode, "seed": self.seed, "return": self.total_return,
                "penalty": self.penalty_count, "wall_hits": self.wall_hits,
                "boundary_hits": self.boundary_hits, "success": int(self.success), "steps": self.steps,
                "mean_predicted": self.mean_predicted, "mean_realized": self.mean_realized,
                "mean_optimality": self.mean_optimality}


@dataclass
class RunReport:
    """Everything one evaluation run produced"""
    config: Dict[str, object]
    episodes: List[EpisodeMetrics] = field(default_factory=list)
    aggregates: Dict[str, Optional[float]] = field(default_factory=dict)
    correlation: Optional[float] = None
    mean_optimality: Optional[float] = None

    def to_dict(self) -> dict:
        return {"config": self.config, "aggregates": self.aggregates, "correlation": self.correlation,
                "mean_optimality": self.mean_optimality, "n_episodes": len(self.episodes)}
