#!/usr/bin/env python3
"""
Trifle Circuit Inference
Exact batched queries: log-space forward pass, backward flows, posteriors,
expectations, tails, quantiles and independent-sum convolution
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse

from circuit_core import KIND_PRODUCT, KIND_SUM, Circuit
from models import CategoricalDist, EvidenceMask, TrifleError, ValueMap, Variable

logger = logging.getLogger(__name__)

UNOBSERVED = -1
RESTRICTED = -2
QUANTILE_TOL = 1e-12

VarRef = Union[int, Variable]


class InferenceError(TrifleError):
    """Query that does not fit the circuit or the evidence"""


class ZeroProbabilityError(InferenceError):
    """Conditioning on evidence the circuit gives probability zero"""


def _var_index(target: VarRef) -> int:
    return target.index if isinstance(target, Variable) else int(target)


@dataclass
class EvidenceBatch:
    """B evidence masks in array form

    obs[b, v] is a category, UNOBSERVED, or RESTRICTED; for restricted rows
    allowed[v][b] is the boolean vector of admissible categories.
    """
    obs: np.ndarray
    allowed: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.obs.shape[0]

    @property
    def n_vars(self) -> int:
        return self.obs.shape[1]

    @classmethod
    def empty(cls, n_vars: int, size: int = 1) -> "EvidenceBatch":
        return cls(np.full((size, n_vars), UNOBSERVED, dtype=np.int64))

    @classmethod
    def from_tokens(cls, tokens: np.ndarray) -> "EvidenceBatch":
        """Full-evidence batch, one row per token row"""
        return cls(np.array(tokens, dtype=np.int64, ndmin=2))

    @classmethod
    def from_masks(cls, masks: Sequence[EvidenceMask], cards: Sequence[int]) -> "EvidenceBatch":
        cards = list(cards)
        obs = np.full((len(masks), len(cards)), UNOBSERVED, dtype=np.int64)
        allowed: Dict[int, np.ndarray] = {}
        for b, mask in enumerate(masks):
            for var, cat in mask.observed.items():
                _check_var(var, cards)
                obs[b, var] = cat
            for var, subset in mask.restricted.items():
                _check_var(var, cards)
                if max(subset) >= cards[var]:
                    raise InferenceError(f"restricted category {max(subset)} out of range for variable {var}")
                obs[b, var] = RESTRICTED
                table = allowed.setdefault(var, np.zeros((len(masks), cards[var]), dtype=bool))
                table[b, sorted(subset)] = True
        return cls(obs, allowed)

    def copy(self) -> "EvidenceBatch":
        return EvidenceBatch(self.obs.copy(), {v: a.copy() for v, a in self.allowed.items()})

    def observe(self, var: int, categories) -> "EvidenceBatch":
        out = self.copy()
        out.obs[:, var] = categories
        return out

    def unobserve(self, var: int) -> "EvidenceBatch":
        out = self.copy()
        out.obs[:, var] = UNOBSERVED
        return out

    def restrict(self, var: int, allowed: np.ndarray) -> "EvidenceBatch":
        """allowed: [card] shared by all rows, or [B, card]"""
        out = self.copy()
        allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), (self.size, np.shape(allowed)[-1])).copy()
        if not allowed.any(axis=1).all():
            raise InferenceError(f"empty restriction on variable {var}")
        out.obs[:, var] = RESTRICTED
        out.allowed[var] = allowed
        return out

    def repeat(self, n: int) -> "EvidenceBatch":
        """Each row repeated n times consecutively"""
        return EvidenceBatch(np.repeat(self.obs, n, axis=0),
                             {v: np.repeat(a, n, axis=0) for v, a in self.allowed.items()})

    def take(self, rows) -> "EvidenceBatch":
        rows = np.asarray(rows)
        return EvidenceBatch(self.obs[rows], {v: a[rows] for v, a in self.allowed.items()})

    def mask(self, row: int) -> EvidenceMask:
        observed = {v: int(c) for v, c in enumerate(self.obs[row]) if c >= 0}
        restricted = {v: np.flatnonzero(self.allowed[v][row]).tolist()
                      for v, c in enumerate(self.obs[row]) if c == RESTRICTED}
        return EvidenceMask.of(observed, restricted)

    def validate(self, cards: np.ndarray):
        if self.n_vars != len(cards):
            raise InferenceError(f"evidence covers {self.n_vars} variables, circuit has {len(cards)}")
        if np.any(self.obs < RESTRICTED):
            raise InferenceError("evidence holds negative categories")
        over = self.obs >= cards[None, :]
        if over.any():
            _, var = np.argwhere(over)[0]
            raise InferenceError(f"category {self.obs[over][0]} out of range for variable {var}")
        for var in np.flatnonzero((self.obs == RESTRICTED).any(axis=0)):
            if var not in self.allowed:
                raise InferenceError(f"variable {var} marked restricted without an allowed set")


def _check_var(var: int, cards: List[int]):
    if not 0 <= var < len(cards):
        raise InferenceError(f"evidence references unknown variable {var}")


@dataclass
class ForwardCache:
    """Per-node log-probabilities [N, B] under a batch of evidence"""
    logp: np.ndarray
    batch: EvidenceBatch

    @property
    def log_marginal(self) -> np.ndarray:
        return self.logp[-1]


@dataclass
class FlowCache:
    """Per-node flows [N, B]; optional sum-edge flows"""
    flows: np.ndarray
    edge_totals: Optional[np.ndarray] = None
    edge_flows: Optional[np.ndarray] = None


@dataclass
class Posteriors:
    log_evidence: np.ndarray
    dists: Dict[int, np.ndarray]


# Passes

def _input_log_values(table: np.ndarray, obs: np.ndarray, allowed: Optional[np.ndarray]) -> np.ndarray:
    out = np.zeros((table.shape[0], len(obs)))
    seen = obs >= 0
    if seen.any():
        out[:, seen] = np.log(table)[:, obs[seen]]
    restricted = obs == RESTRICTED
    if restricted.any():
        out[:, restricted] = np.log(table @ allowed[restricted].T.astype(np.float64))
    return out


def _forward_rows(c: Circuit, batch: EvidenceBatch) -> np.ndarray:
    logp = np.empty((c.n_nodes, batch.size))
    with np.errstate(divide="ignore", invalid="ignore"):
        for var, nodes in enumerate(c.input_nodes):
            if len(nodes):
                logp[nodes] = _input_log_values(c.input_tables[var], batch.obs[:, var], batch.allowed.get(var))
        log_w = np.log(c.edge_weight)
        for blocks in c.layers:
            for blk in blocks:
                vals = logp[blk.children]
                if blk.kind == KIND_PRODUCT:
                    logp[blk.nodes] = np.add.reduceat(vals, blk.starts, axis=0)
                    continue
                vals = vals + log_w[blk.edges][:, None]
                peak = np.maximum.reduceat(vals, blk.starts, axis=0)
                peak = np.where(np.isfinite(peak), peak, 0.0)
                mass = np.add.reduceat(np.exp(vals - np.repeat(peak, blk.counts, axis=0)), blk.starts, axis=0)
                logp[blk.nodes] = np.log(mass) + peak
    return logp


def forward(c: Circuit, batch: EvidenceBatch, workers: int = 1) -> ForwardCache:
    """Bottom-up log-space pass; unobserved inputs contribute log 1

    With workers > 1 the batch rows are split into contiguous slices; every
    column is computed independently, so the result does not depend on the
    worker count.
    """
    batch.validate(c.cards)
    if workers > 1 and batch.size >= 2 * workers:
        parts = np.array_split(np.arange(batch.size), workers)
        results = Parallel(n_jobs=workers, backend="threading")(
            delayed(_forward_rows)(c, batch.take(rows)) for rows in parts)
        logp = np.concatenate(results, axis=1)
    else:
        logp = _forward_rows(c, batch)
    return ForwardCache(logp, batch)


def backward_flows(c: Circuit, fc: ForwardCache, allow_zero: bool = False,
                   edge_totals: bool = False, keep_edge_flows: bool = False) -> FlowCache:
    """Top-down flow pass with root flow 1

    A sum parent passes flow_m·θ·p_n/p_m to child n, a product parent passes
    flow_m; parents with p_m = 0 pass nothing. Rows whose evidence has
    probability zero get all-zero flows when allow_zero is set.
    """
    logp = fc.logp
    zero = ~np.isfinite(fc.log_marginal)
    if zero.any() and not allow_zero:
        raise ZeroProbabilityError(f"evidence has probability zero in {int(zero.sum())} of {len(zero)} rows")
    flows = np.zeros_like(logp)
    flows[c.root] = np.where(zero, 0.0, 1.0)
    totals = np.zeros(c.n_edges) if edge_totals else None
    per_sample = np.zeros((c.n_edges, logp.shape[1])) if keep_edge_flows else None

    with np.errstate(divide="ignore", invalid="ignore"):
        log_w = np.log(c.edge_weight)
        for blocks in reversed(c.layers):
            for blk in blocks:
                contrib = np.repeat(flows[blk.nodes], blk.counts, axis=0)
                if blk.kind == KIND_SUM:
                    parent = np.repeat(logp[blk.nodes], blk.counts, axis=0)
                    alive = np.isfinite(parent)
                    log_ratio = log_w[blk.edges][:, None] + logp[blk.children] - np.where(alive, parent, 0.0)
                    contrib = contrib * np.exp(np.where(alive, log_ratio, -np.inf))
                    if totals is not None:
                        totals[blk.edges] = contrib.sum(axis=1)
                    if per_sample is not None:
                        per_sample[blk.edges] = contrib
                flows[blk.targets] += blk.scatter @ contrib
    return FlowCache(flows, totals, per_sample)


def input_scores(c: Circuit, fl: FlowCache, var: int) -> np.ndarray:
    """Σ_n flow_n·f_n(x) over input nodes of var, shape [B, card]"""
    nodes = c.input_nodes[var]
    return fl.flows[nodes].T @ c.input_tables[var]


def joint_scores(c: Circuit, fc: ForwardCache, fl: FlowCache, var: int) -> np.ndarray:
    """Unnormalized posterior p(x, e) per category; rows sum to p(e)"""
    return np.exp(fc.log_marginal)[:, None] * input_scores(c, fl, var)


def posterior_marginals_batch(c: Circuit, batch: EvidenceBatch, targets: Iterable[VarRef],
                              workers: int = 1) -> Posteriors:
    """All requested posteriors from one forward and one backward pass

    Rows whose evidence has probability zero get all-zero distributions.
    """
    targets = [_var_index(t) for t in targets]
    for var in targets:
        if not 0 <= var < c.n_vars:
            raise InferenceError(f"unknown target variable {var}")
        if np.any(batch.obs[:, var] != UNOBSERVED):
            raise InferenceError(f"target variable {var} is not unobserved in the evidence")
    fc = forward(c, batch, workers=workers)
    fl = backward_flows(c, fc, allow_zero=True)
    dists = {}
    for var in targets:
        scores = input_scores(c, fl, var)
        total = scores.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            dists[var] = np.where(total > 0, scores / np.where(total > 0, total, 1.0), 0.0)
    return Posteriors(fc.log_marginal, dists)


# Single-mask queries

def _single(c: Circuit, e: EvidenceMask) -> EvidenceBatch:
    return EvidenceBatch.from_masks([e], c.cards)


def forward_marginal(c: Circuit, e: EvidenceMask) -> float:
    """log p(e)"""
    return float(forward(c, _single(c, e)).log_marginal[0])


def forward_marginal_batch(c: Circuit, batch: EvidenceBatch, workers: int = 1) -> np.ndarray:
    return forward(c, batch, workers=workers).log_marginal.copy()


def conditional(c: Circuit, query: EvidenceMask, given: EvidenceMask) -> float:
    """log p(query | given)"""
    log_given = forward_marginal(c, given)
    if not np.isfinite(log_given):
        raise ZeroProbabilityError("conditioning event has probability zero")
    try:
        merged = given.merge(query)
    except TrifleError as exc:
        raise InferenceError(str(exc)) from exc
    return forward_marginal(c, merged) - log_given


def posterior_marginal(c: Circuit, e: EvidenceMask, target: VarRef) -> CategoricalDist:
    var = _var_index(target)
    if not 0 <= var < c.n_vars:
        raise InferenceError(f"unknown target variable {var}")
    if not e.is_unobserved(var):
        raise InferenceError(f"target variable {var} is observed in the evidence")
    fc = forward(c, _single(c, e))
    fl = backward_flows(c, fc)
    scores = input_scores(c, fl, var)[0]
    return CategoricalDist.of(scores / scores.sum())


def _checked_values(c: Circuit, var: int, vm: ValueMap) -> np.ndarray:
    if len(vm) != c.cards[var]:
        raise InferenceError(f"value map has {len(vm)} entries, variable {var} has {c.cards[var]} categories")
    return vm.as_array()


def expectation(c: Circuit, e: EvidenceMask, target: VarRef, vm: ValueMap) -> float:
    var = _var_index(target)
    _checked_values(c, var, vm)
    return posterior_marginal(c, e, var).expectation(vm)


def tail_probability(c: Circuit, e: EvidenceMask, target: VarRef, vm: ValueMap, v: float) -> float:
    """P(vm(X) ≥ v | e)"""
    var = _var_index(target)
    values = _checked_values(c, var, vm)
    probs = posterior_marginal(c, e, var).as_array()
    return float(dist_tail(probs[None, :], values, v)[0])


def quantile_threshold(c: Circuit, e: EvidenceMask, target: VarRef, vm: ValueMap, delta: float) -> float:
    """Largest value v of the map with P(vm(X) ≥ v | e) ≥ 1 − delta"""
    if not 0.0 < delta < 1.0:
        raise InferenceError(f"delta must lie in (0, 1), got {delta}")
    var = _var_index(target)
    values = _checked_values(c, var, vm)
    probs = posterior_marginal(c, e, var).as_array()
    return float(dist_quantile(probs[None, :], values, delta)[0])


def log_likelihood(c: Circuit, tokens: np.ndarray, workers: int = 1) -> np.ndarray:
    """Full-evidence log-probability of every token row"""
    return forward_marginal_batch(c, EvidenceBatch.from_tokens(tokens), workers=workers)


# Distribution arithmetic on [B, C] probability rows

def dist_expectation(probs: np.ndarray, values: np.ndarray) -> np.ndarray:
    return probs @ np.asarray(values, dtype=np.float64)


def dist_tail(probs: np.ndarray, values: np.ndarray, v) -> np.ndarray:
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), (probs.shape[0],))
    return (probs * (np.asarray(values)[None, :] >= v[:, None])).sum(axis=1)


def dist_quantile(probs: np.ndarray, values: np.ndarray, delta: float) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ordered = values[order]
    tails = np.cumsum(probs[:, order][:, ::-1], axis=1)[:, ::-1]
    # duplicated values share the tail of their first occurrence
    tails = tails[:, np.searchsorted(ordered, ordered, side="left")]
    ok = tails >= (1.0 - delta) - QUANTILE_TOL
    last = ordered.size - 1 - np.argmax(ok[:, ::-1], axis=1)
    return ordered[np.where(ok.any(axis=1), last, 0)]


def dist_cdf(probs: np.ndarray, values: np.ndarray, v) -> np.ndarray:
    """P(value ≤ v) per row"""
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), (probs.shape[0],))
    return (probs * (np.asarray(values)[None, :] <= v[:, None])).sum(axis=1)


def _merge_support(values: np.ndarray, probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    support, inverse = np.unique(values, return_inverse=True)
    if len(support) == len(values) and np.array_equal(support, values):
        return values, probs
    merge = sparse.csr_matrix((np.ones(len(values)), (inverse, np.arange(len(values)))),
                              shape=(len(support), len(values)))
    return support, (merge @ probs.T).T


def _rebin(values: np.ndarray, probs: np.ndarray, n_bins: int) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = values[0], values[-1]
    if hi == lo:
        return values[:1], probs.sum(axis=1, keepdims=True)
    if n_bins == 1:
        return np.array([(lo + hi) / 2.0]), probs.sum(axis=1, keepdims=True)
    grid = np.linspace(lo, hi, n_bins)
    width = (hi - lo) / (n_bins - 1)
    idx = np.clip(np.rint((values - lo) / width).astype(np.int64), 0, n_bins - 1)
    assign = sparse.csr_matrix((np.ones(len(values)), (idx, np.arange(len(values)))),
                               shape=(n_bins, len(values)))
    return grid, (assign @ probs.T).T


def convolve_sum_batch(probs_list: Sequence[np.ndarray], values_list: Sequence[np.ndarray],
                       weights: Sequence[float], out_bins: Optional[int] = 101,
                       max_support: int = 4096) -> Tuple[np.ndarray, np.ndarray]:
    """Distribution of Σ w_i·X_i for independent X_i, row by row

    The exact support is kept (duplicates merged) until it exceeds
    max_support; the result is re-binned to out_bins uniform centers spanning
    the support, or left exact when out_bins is None.
    """
    if not probs_list:
        raise InferenceError("convolve_sum needs at least one distribution")
    if not (len(probs_list) == len(values_list) == len(weights)):
        raise InferenceError("convolve_sum inputs differ in length")
    if not np.all(np.isfinite(weights)):
        raise InferenceError("convolve_sum weights must be finite")
    if out_bins is not None and out_bins < 1:
        raise InferenceError(f"out_bins must be >= 1, got {out_bins}")

    values, probs = _merge_support(weights[0] * np.asarray(values_list[0], dtype=np.float64),
                                   np.asarray(probs_list[0], dtype=np.float64))
    n_rows = probs.shape[0]
    for p_next, v_next, w in zip(probs_list[1:], values_list[1:], weights[1:]):
        v_next = w * np.asarray(v_next, dtype=np.float64)
        sums = (values[:, None] + v_next[None, :]).ravel()
        joint = (probs[:, :, None] * np.asarray(p_next)[:, None, :]).reshape(n_rows, -1)
        values, probs = _merge_support(sums, joint)
        if len(values) > max_support:
            values, probs = _rebin(values, probs, max_support)
    if out_bins is not None:
        values, probs = _rebin(values, probs, out_bins)
    return probs, values


def convolve_sum(dists: Sequence[CategoricalDist], vms: Sequence[ValueMap], weights: Sequence[float],
                 out_bins: Optional[int] = 101) -> Tuple[CategoricalDist, ValueMap]:
    if len(dists) != len(vms):
        raise InferenceError("convolve_sum needs one value map per distribution")
    for d, vm in zip(dists, vms):
        if len(d) != len(vm):
            raise InferenceError("distribution and value map differ in length")
    probs, values = convolve_sum_batch([d.as_array()[None, :] for d in dists], [vm.as_array() for vm in vms],
                                       list(weights), out_bins=out_bins)
    return CategoricalDist.of(probs[0]), ValueMap.of(values)


# Sampling

def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF draw per row; never returns a zero-probability category"""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    last_positive = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last_positive)


def sample_variables(c: Circuit, batch: EvidenceBatch, variables: Iterable[VarRef],
                     rng: np.random.Generator, workers: int = 1) -> EvidenceBatch:
    """Draw each listed variable from its exact posterior, then observe it"""
    for var in (_var_index(v) for v in variables):
        probs = posterior_marginals_batch(c, batch, [var], workers=workers).dists[var]
        dead = probs.sum(axis=1) == 0
        if dead.any():
            logger.warning("Sampling variable %d under zero-probability evidence in %d rows", var, int(dead.sum()))
            probs = np.where(dead[:, None], 1.0 / probs.shape[1], probs)
        batch = batch.observe(var, sample_categorical(probs, rng))
    return batch
