#!/usr/bin/env python3
"""
Trifle Trajectory Data
Return-to-go labels, value binning, fixed-length token windows and dataset files
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models import LabeledTrajectory, RawTrajectory, TrifleError, ValueMap, Variable

logger = logging.getLogger(__name__)

DATASET_FORMAT = "trifle-dataset"
DATASET_VERSION = 1
QUANTITIES = ("reward", "rtg")
BIN_METHODS = ("quantile", "exact")


class DatasetError(TrifleError):
    """Dataset cannot be built from the given trajectories"""


class DatasetFormatError(DatasetError):
    """Malformed or incompatible dataset files"""


@dataclass(frozen=True)
class WindowLayout:
    """Variable layout of a K-step window, shared by training and planning

    Each step flattens to state factors, action factors, reward bin, RTG bin.
    Every variable gets one extra category, PAD, as its last index.
    """
    context: int
    state_cards: Tuple[int, ...]
    action_cards: Tuple[int, ...]
    reward_card: int
    rtg_card: int

    def __post_init__(self):
        if self.context < 1:
            raise DatasetError(f"context length must be positive, got {self.context}")
        if not self.state_cards or not self.action_cards:
            raise DatasetError("layout needs at least one state and one action factor")
        if min(self.state_cards + self.action_cards + (self.reward_card, self.rtg_card)) < 1:
            raise DatasetError("layout cardinalities must be positive")

    @property
    def step_width(self) -> int:
        return len(self.state_cards) + len(self.action_cards) + 2

    @property
    def n_vars(self) -> int:
        return self.context * self.step_width

    @property
    def n_states(self) -> int:
        return int(np.prod(self.state_cards))

    @property
    def n_actions(self) -> int:
        return int(np.prod(self.action_cards))

    def state_vars(self, pos: int) -> List[int]:
        base = self._base(pos)
        return list(range(base, base + len(self.state_cards)))

    def action_vars(self, pos: int) -> List[int]:
        base = self._base(pos) + len(self.state_cards)
        return list(range(base, base + len(self.action_cards)))

    def reward_var(self, pos: int) -> int:
        return self._base(pos) + self.step_width - 2

    def rtg_var(self, pos: int) -> int:
        return self._base(pos) + self.step_width - 1

    def _base(self, pos: int) -> int:
        if not 0 <= pos < self.context:
            raise DatasetError(f"window position {pos} outside 0..{self.context - 1}")
        return pos * self.step_width

    def step_cards(self) -> np.ndarray:
        """Per-step cardinalities without PAD"""
        return np.array(self.state_cards + self.action_cards + (self.reward_card, self.rtg_card), dtype=np.int64)

    def cards(self) -> np.ndarray:
        """Cardinality of every window variable, PAD included"""
        return np.tile(self.step_cards() + 1, self.context)

    def pad_step(self) -> np.ndarray:
        return self.step_cards()

    def pad(self, var: int) -> int:
        return int(self.step_cards()[var % self.step_width])

    def split_state(self, state_id: int) -> Tuple[int, ...]:
        if not 0 <= state_id < self.n_states:
            raise DatasetError(f"state id {state_id} outside 0..{self.n_states - 1}")
        return tuple(int(x) for x in np.unravel_index(state_id, self.state_cards))

    def join_state(self, factors: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(factors), self.state_cards))

    def split_action(self, action: int) -> Tuple[int, ...]:
        if not 0 <= action < self.n_actions:
            raise DatasetError(f"action {action} outside 0..{self.n_actions - 1}")
        return tuple(int(x) for x in np.unravel_index(action, self.action_cards))

    def join_action(self, factors: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(factors), self.action_cards))

    def variables(self) -> List[Variable]:
        names = ([f"s{d}" for d in range(len(self.state_cards))]
                 + [f"a{d}" for d in range(len(self.action_cards))] + ["r", "rtg"])
        cards = self.cards()
        return [Variable(i, int(cards[i]), f"{names[i % self.step_width]}[{i // self.step_width}]")
                for i in range(self.n_vars)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        return cls(context=int(data["context"]), state_cards=tuple(int(c) for c in data["state_cards"]),
                   action_cards=tuple(int(c) for c in data["action_cards"]),
                   reward_card=int(data["reward_card"]), rtg_card=int(data["rtg_card"]))


@dataclass(frozen=True)
class QuantityBins:
    """Bin edges and representative values of one continuous quantity

    Quantile bins cover [edges[i], edges[i+1]); exact bins hold one observed
    value each and encode to the nearest one. Values outside [low, high]
    clamp to the terminal bins.
    """
    edges: Tuple[float, ...]
    values: Tuple[float, ...]
    method: str
    low: float
    high: float

    def __post_init__(self):
        if self.method not in BIN_METHODS:
            raise DatasetError(f"unknown binning method '{self.method}'")
        if not self.edges or len(self.edges) != len(self.values):
            raise DatasetError("bins need matching non-empty edges and values")
        if np.any(np.diff(self.edges) <= 0):
            raise DatasetError("bin edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return len(self.edges)

    def encode(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Bin indices and a mask of clamped entries"""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        edges = np.asarray(self.edges)
        if self.method == "exact":
            right = np.clip(np.searchsorted(edges, x), 0, len(edges) - 1)
            left = np.clip(right - 1, 0, len(edges) - 1)
            idx = np.where(np.abs(x - edges[left]) <= np.abs(edges[right] - x), left, right)
        else:
            idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 1)
        return idx.astype(np.int64), (x < self.low) | (x > self.high)

    def decode(self, idx) -> np.ndarray:
        """Representative values; the PAD index decodes to 0"""
        return self.value_map().as_array()[np.asarray(idx)]

    def value_map(self) -> ValueMap:
        return ValueMap.of(self.values + (0.0,))

    def to_dict(self) -> dict:
        return {"edges": list(self.edges), "values": list(self.values), "method": self.method,
                "low": self.low, "high": self.high}

    @classmethod
    def from_dict(cls, data: dict):
        return cls(tuple(float(e) for e in data["edges"]), tuple(float(v) for v in data["values"]),
                   data["method"], float(data["low"]), float(data["high"]))


@dataclass(frozen=True)
class BinDictionary:
    reward: QuantityBins
    rtg: QuantityBins

    def __getitem__(self, quantity: str) -> QuantityBins:
        if quantity not in QUANTITIES:
            raise DatasetError(f"unknown quantity '{quantity}'")
        return getattr(self, quantity)

    def to_dict(self) -> dict:
        return {q: self[q].to_dict() for q in QUANTITIES}

    @classmethod
    def from_dict(cls, data: dict):
        try:
            return cls(QuantityBins.from_dict(data["reward"]), QuantityBins.from_dict(data["rtg"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"malformed bin table: {exc}") from exc


@dataclass
class ClampCounter:
    counts: Dict[str, int] = field(default_factory=lambda: {q: 0 for q in QUANTITIES})

    def add(self, quantity: str, n: int):
        self.counts[quantity] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass(frozen=True)
class TokenWindow:
    start: int
    tokens: np.ndarray


def label_rtg(t: RawTrajectory, gamma: float) -> LabeledTrajectory:
    """RTG_t = r_t + γ·RTG_{t+1}, RTG_T = r_T"""
    if not 0.0 <= gamma <= 1.0:
        raise DatasetError(f"gamma must lie in [0, 1], got {gamma}")
    rtg = [0.0] * len(t)
    running = 0.0
    for i in range(len(t) - 1, -1, -1):
        running = t.rewards[i] + gamma * running
        rtg[i] = running
    return LabeledTrajectory(raw=t, rtg=rtg, gamma=gamma)


def _quantity_values(dataset: Iterable[LabeledTrajectory], quantity: str) -> np.ndarray:
    if quantity not in QUANTITIES:
        raise DatasetError(f"unknown quantity '{quantity}'")
    chunks = [np.asarray(lt.raw.rewards if quantity == "reward" else lt.rtg, dtype=np.float64) for lt in dataset]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def fit_bins(dataset: Sequence[LabeledTrajectory], quantity: str, n_bins: int,
             method: str = "quantile") -> QuantityBins:
    """Equal-mass quantile bins (merged on duplicates) or one bin per distinct value

    Quantile bin i starts at the (i·N // n_bins)-th smallest value; each bin's
    value is the mean of the training values it holds.
    """
    if n_bins < 1:
        raise DatasetError(f"n_bins must be >= 1, got {n_bins}")
    values = _quantity_values(dataset, quantity)
    if values.size == 0:
        raise DatasetError(f"cannot fit {quantity} bins on an empty dataset")
    ordered = np.sort(values)
    if method == "exact":
        edges = np.unique(ordered)
        return QuantityBins(tuple(edges.tolist()), tuple(edges.tolist()), "exact",
                            float(ordered[0]), float(ordered[-1]))
    if method != "quantile":
        raise DatasetError(f"unknown binning method '{method}'")
    n = len(ordered)
    edges = np.unique(ordered[[i * n // n_bins for i in range(n_bins)]])
    idx = np.clip(np.searchsorted(edges, ordered, side="right") - 1, 0, len(edges) - 1)
    means = np.bincount(idx, weights=ordered, minlength=len(edges)) / np.bincount(idx, minlength=len(edges))
    logger.debug("Fitted %d %s bins (%d requested)", len(edges), quantity, n_bins)
    return QuantityBins(tuple(edges.tolist()), tuple(means.tolist()), "quantile",
                        float(ordered[0]), float(ordered[-1]))


def fit_bin_dictionary(dataset: Sequence[LabeledTrajectory], n_bins: int, method: str = "quantile") -> BinDictionary:
    return BinDictionary(fit_bins(dataset, "reward", n_bins, method), fit_bins(dataset, "rtg", n_bins, method))


def step_tokens(lt: LabeledTrajectory, bins: BinDictionary, layout: WindowLayout,
                counter: Optional[ClampCounter] = None) -> np.ndarray:
    """[T, step_width] token matrix of one labeled trajectory"""
    raw = lt.raw
    n_state, n_action = len(layout.state_cards), len(layout.action_cards)
    out = np.empty((len(raw), layout.step_width), dtype=np.int64)
    try:
        out[:, :n_state] = np.stack(np.unravel_index(np.asarray(raw.states), layout.state_cards), axis=1)
        out[:, n_state:n_state + n_action] = np.stack(
            np.unravel_index(np.asarray(raw.actions), layout.action_cards), axis=1)
    except ValueError as exc:
        raise DatasetError(f"trajectory ids do not fit the layout: {exc}") from exc
    for col, quantity, series in ((-2, "reward", raw.rewards), (-1, "rtg", lt.rtg)):
        idx, clamped = bins[quantity].encode(series)
        out[:, col] = idx
        if clamped.any():
            logger.warning("Clamped %d %s values outside the fitted range", int(clamped.sum()), quantity)
            if counter is not None:
                counter.add(quantity, int(clamped.sum()))
    return out


def tokenize(lt: LabeledTrajectory, bins: BinDictionary, layout: WindowLayout, tail_pad: int = 0,
             counter: Optional[ClampCounter] = None) -> List[TokenWindow]:
    """Stride-1 windows of K steps

    tail_pad PAD steps follow the last step; episodes still shorter than K are
    front-padded so exactly one window results. Window starts are episode step
    indices (negative under front padding).
    """
    steps = step_tokens(lt, bins, layout, counter)
    pad = layout.pad_step()[None, :]
    if tail_pad:
        steps = np.concatenate([steps, np.repeat(pad, tail_pad, axis=0)])
    front = max(layout.context - len(steps), 0)
    if front:
        steps = np.concatenate([np.repeat(pad, front, axis=0), steps])
    views = np.lib.stride_tricks.sliding_window_view(steps, (layout.context, layout.step_width))
    flat = views.reshape(-1, layout.n_vars)
    return [TokenWindow(start=i - front, tokens=row.copy()) for i, row in enumerate(flat)]


@dataclass
class TrajectoryDataset:
    trajectories: List[LabeledTrajectory]
    bins: BinDictionary
    layout: WindowLayout
    gamma: float
    tail_pad: int = 0
    clamps: ClampCounter = field(default_factory=ClampCounter, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.trajectories)

    @cached_property
    def tokens(self) -> np.ndarray:
        """[n_windows, n_vars] token matrix over all trajectories"""
        rows = [w.tokens for lt in self.trajectories
                for w in tokenize(lt, self.bins, self.layout, self.tail_pad, self.clamps)]
        return np.stack(rows) if rows else np.zeros((0, self.layout.n_vars), dtype=np.int64)

    @property
    def mean_return(self) -> float:
        return float(np.mean([lt.raw.total_return for lt in self.trajectories]))

    def value_maps(self) -> Tuple[ValueMap, ValueMap]:
        """(reward, rtg) value maps with PAD valued 0"""
        return self.bins.reward.value_map(), self.bins.rtg.value_map()


def build_dataset(raws: Sequence[RawTrajectory], gamma: float, context: int,
                  state_cards: Sequence[int], action_cards: Sequence[int], n_bins: int = 100,
                  method: str = "quantile", tail_pad: int = 0) -> TrajectoryDataset:
    if not raws:
        raise DatasetError("no trajectories to build a dataset from")
    labeled = [label_rtg(t, gamma) for t in raws]
    bins = fit_bin_dictionary(labeled, n_bins, method)
    layout = WindowLayout(context, tuple(state_cards), tuple(action_cards), bins.reward.n_bins, bins.rtg.n_bins)
    ds = TrajectoryDataset(labeled, bins, layout, gamma, tail_pad)
    logger.info("Dataset: %d trajectories, %d windows, %d reward bins, %d rtg bins",
                len(ds), len(ds.tokens), layout.reward_card, layout.rtg_card)
    return ds


def dataset_paths(prefix: str) -> Tuple[str, str]:
    return f"{prefix}.traj.jsonl", f"{prefix}.meta.json"


def save_dataset(ds: TrajectoryDataset, prefix: str):
    traj_path, meta_path = dataset_paths(prefix)
    os.makedirs(os.path.dirname(os.path.abspath(traj_path)), exist_ok=True)
    meta = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "gamma": ds.gamma, "tail_pad": ds.tail_pad,
            "n_trajectories": len(ds), "layout": ds.layout.to_dict(), "bins": ds.bins.to_dict()}
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    with open(traj_path, "w", encoding="utf-8") as f:
        for lt in ds.trajectories:
            f.write(json.dumps(lt.raw.to_dict(), sort_keys=True) + "\n")
    logger.info("Saved %d trajectories to %s", len(ds), traj_path)


def load_dataset(prefix: str) -> TrajectoryDataset:
    traj_path, meta_path = dataset_paths(prefix)
    for path in (traj_path, meta_path):
        if not os.path.exists(path):
            raise DatasetFormatError(f"dataset file not found: {path}")
    try:
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{meta_path} is not valid JSON: {exc}") from exc
    if not isinstance(meta, dict) or meta.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{meta_path} is not a dataset header")
    if meta.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"dataset version {meta.get('version')} unsupported, expected {DATASET_VERSION}")
    if "bins" not in meta:
        raise DatasetFormatError(f"{meta_path} has no bin table")
    if "layout" not in meta or "gamma" not in meta:
        raise DatasetFormatError(f"{meta_path} lacks layout or gamma")
    bins = BinDictionary.from_dict(meta["bins"])
    layout = WindowLayout.from_dict(meta["layout"])
    gamma = float(meta["gamma"])

    raws = []
    with open(traj_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raws.append(RawTrajectory.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, TrifleError) as exc:
                raise DatasetFormatError(f"{traj_path} line {lineno}: {exc}") from exc
    if not raws:
        raise DatasetFormatError(f"{traj_path} holds no trajectories")
    return TrajectoryDataset([label_rtg(t, gamma) for t in raws], bins, layout, gamma, int(meta.get("tail_pad", 0)))
