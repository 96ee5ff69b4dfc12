#!/usr/bin/env python3
"""
Trifle Planner
Decision-time action selection: threshold-corrected sampling, exact multi-step
values, beam search, the Monte-Carlo baseline and constrained actions
"""
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from circuit_core import Circuit
from circuit_inference import (UNOBSERVED, EvidenceBatch, convolve_sum_batch, dist_quantile, dist_tail,
                               posterior_marginals_batch, sample_categorical, sample_variables)
from models import TrifleError, ValueMap
from stochastic_envs import make_rng
from trajectory_data import QuantityBins, WindowLayout

logger = logging.getLogger(__name__)

SINGLE_STEP = "single_step"
MULTI_STEP = "multi_step"
FUTURE_ACTION_MODES = ("marginalize", "sample")
POLICIES = ("s-trifle", "m-trifle", "tt-baseline", "prior")
PLANNER_STREAM = 3


class PlannerError(TrifleError):
    """Invalid planner configuration or an unsatisfiable decision"""


class ConstraintError(PlannerError):
    """No admissible action keeps positive weight"""


@dataclass(frozen=True)
class PlannerConfig:
    value_mode: str = MULTI_STEP
    beam_width: int = 8
    horizon: int = 3
    scaling_ratio: int = 2
    delta: float = 0.2
    lookahead: int = 2
    gamma: float = 1.0
    context: int = 7
    excluded_actions: Tuple[int, ...] = ()
    seed: int = 0
    mc_samples: int = 1
    future_actions: str = "marginalize"
    convolve_bins: int = 101

    def __post_init__(self):
        if self.value_mode not in (SINGLE_STEP, MULTI_STEP):
            raise PlannerError(f"unknown value mode '{self.value_mode}'")
        if min(self.beam_width, self.horizon, self.scaling_ratio) < 1:
            raise PlannerError("beam width, horizon and scaling ratio must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise PlannerError(f"delta must lie in (0, 1), got {self.delta}")
        if self.value_mode == MULTI_STEP and self.lookahead < 1:
            raise PlannerError("multi-step values need a lookahead of at least one step")
        if not 0.0 <= self.gamma <= 1.0:
            raise PlannerError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.future_slots > self.context - 1:
            raise PlannerError(f"context {self.context} leaves no room for {self.future_slots} future steps")
        if self.mc_samples < 1 or self.convolve_bins < 1:
            raise PlannerError("mc_samples and convolve_bins must be positive")
        if self.future_actions not in FUTURE_ACTION_MODES:
            raise PlannerError(f"future_actions must be one of {FUTURE_ACTION_MODES}")

    @property
    def future_slots(self) -> int:
        """Window positions reserved after the current step"""
        return max(self.horizon, self.lookahead)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["excluded_actions"] = list(self.excluded_actions)
        return data

    @classmethod
    def from_dict(cls, data: dict):
        known = {f.name for f in fields(cls)}
        params = {k: v for k, v in data.items() if k in known}
        if "excluded_actions" in params:
            params["excluded_actions"] = tuple(int(a) for a in params["excluded_actions"])
        return cls(**params)


@dataclass(frozen=True)
class ValueMaps:
    """Decoded values of the reward and RTG categories (PAD included)"""
    reward: np.ndarray
    rtg: np.ndarray

    @classmethod
    def from_maps(cls, reward: ValueMap, rtg: ValueMap) -> "ValueMaps":
        return cls(reward.as_array(), rtg.as_array())


@dataclass
class DecisionContext:
    """Evidence for one decision: a single-row batch and the current window position"""
    batch: EvidenceBatch
    current: int
    layout: WindowLayout


@dataclass
class BeamState:
    """Candidates of one beam round: evidence rows and their scores"""
    batch: EvidenceBatch
    scores: np.ndarray


@dataclass
class PlanResult:
    action: int
    score: float
    beams: BeamState


@dataclass
class RollingHistory:
    states: List[int] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)

    def record(self, state: int, action: int, reward: float):
        self.states.append(int(state))
        self.actions.append(int(action))
        self.rewards.append(float(reward))

    def __len__(self) -> int:
        return len(self.states)


# Priors

class CircuitPrior:
    """Next-token distribution read from the trained circuit"""

    def __init__(self, circuit: Circuit):
        self.circuit = circuit

    def next_token_dist(self, batch: EvidenceBatch, var: int) -> np.ndarray:
        return posterior_marginals_batch(self.circuit, batch, [var]).dists[var]


class PluginPrior:
    """External provider: evidence batch and variable in, [B, card] distribution out"""

    def __init__(self, provider: Callable[[EvidenceBatch, int], np.ndarray]):
        self.provider = provider

    def next_token_dist(self, batch: EvidenceBatch, var: int) -> np.ndarray:
        probs = np.asarray(self.provider(batch, var), dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] != batch.size:
            raise PlannerError(f"plugin prior returned shape {probs.shape} for a batch of {batch.size}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
            raise PlannerError("plugin prior returned unnormalized distributions")
        return probs


# Evidence

def encode_context(layout: WindowLayout, reward_bins: QuantityBins, history: RollingHistory,
                   state_id: int, cfg: PlannerConfig) -> DecisionContext:
    """Window evidence for the decision at episode step len(history)

    The current step sits at position K-1-F, or at its own step index early
    in the episode when the window is anchored at the episode start. Past
    states, actions and rewards are observed; RTG tokens stay unobserved.
    """
    if layout.context != cfg.context:
        raise PlannerError(f"planner context {cfg.context} differs from the data layout ({layout.context})")
    t = len(history)
    current = min(t, layout.context - 1 - cfg.future_slots)
    batch = EvidenceBatch.empty(layout.n_vars)
    obs = batch.obs[0]
    first = t - current
    if current:
        rewards, _ = reward_bins.encode(history.rewards[first:])
    for pos in range(current):
        step = first + pos
        obs[layout.state_vars(pos)] = layout.split_state(history.states[step])
        obs[layout.action_vars(pos)] = layout.split_action(history.actions[step])
        obs[layout.reward_var(pos)] = rewards[pos]
    obs[layout.state_vars(current)] = layout.split_state(state_id)
    return DecisionContext(batch, current, layout)


def _admissible(layout: WindowLayout, excluded: Sequence[int], prefix: np.ndarray, dim: int) -> np.ndarray:
    """[B, card+1] mask of action-factor categories with an admissible completion; PAD never admissible"""
    card = layout.action_cards[dim]
    rows = prefix.shape[0]
    allowed = np.zeros((rows, card + 1), dtype=bool)
    if not excluded:
        allowed[:, :card] = True
        return allowed
    banned = set(int(a) for a in excluded)
    for action in range(layout.n_actions):
        if action in banned:
            continue
        factors = layout.split_action(action)
        match = np.all(prefix == np.asarray(factors[:dim])[None, :], axis=1) if dim else np.ones(rows, bool)
        allowed[match, factors[dim]] = True
    return allowed


def _action_prefix(batch: EvidenceBatch, layout: WindowLayout, pos: int, dim: int) -> np.ndarray:
    return batch.obs[:, layout.action_vars(pos)[:dim]]


# Values

def _value_terms(layout: WindowLayout, current: int, cfg: PlannerConfig, maps: ValueMaps):
    """Targets, value arrays and weights; the closing RTG term of an L-step lookahead is weighted γ^L"""
    if cfg.value_mode == SINGLE_STEP:
        return [layout.rtg_var(current)], [maps.rtg], [1.0]
    horizon = cfg.lookahead
    targets = [layout.reward_var(current + h) for h in range(horizon)] + [layout.rtg_var(current + horizon)]
    values = [maps.reward] * horizon + [maps.rtg]
    weights = [cfg.gamma ** h for h in range(horizon)] + [cfg.gamma ** horizon]
    return targets, values, weights


def _prepare(circuit: Circuit, batch: EvidenceBatch, layout: WindowLayout, current: int,
             cfg: PlannerConfig, rng: Optional[np.random.Generator]) -> EvidenceBatch:
    if cfg.value_mode != MULTI_STEP or cfg.future_actions != "sample":
        return batch
    if rng is None:
        raise PlannerError("sampling future actions needs a generator")
    pending = [v for pos in range(current + 1, current + cfg.lookahead + 1) for v in layout.action_vars(pos)
               if np.all(batch.obs[:, v] == UNOBSERVED)]
    return sample_variables(circuit, batch, pending, rng)


def expected_value(circuit: Circuit, batch: EvidenceBatch, layout: WindowLayout, current: int,
                   cfg: PlannerConfig, maps: ValueMaps, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """f_v per row: E[RTG_t], or Σ_h γ^h E[r_{t+h}] + γ^L E[RTG_{t+L}]

    Every posterior comes from one forward and one backward pass; rows with
    zero-probability evidence score -inf.
    """
    batch = _prepare(circuit, batch, layout, current, cfg, rng)
    targets, values, weights = _value_terms(layout, current, cfg, maps)
    post = posterior_marginals_batch(circuit, batch, targets)
    total = sum(w * (post.dists[t] @ v) for t, v, w in zip(targets, values, weights))
    dead = ~np.isfinite(post.log_evidence)
    if dead.any():
        logger.warning("%d candidates have zero-probability evidence", int(dead.sum()))
    return np.where(dead, -np.inf, total)


def multi_step_value(circuit: Circuit, batch: EvidenceBatch, layout: WindowLayout, current: int,
                     cfg: PlannerConfig, maps: ValueMaps, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Exact lookahead value with intermediate states marginalized"""
    if cfg.value_mode != MULTI_STEP:
        cfg = PlannerConfig.from_dict({**cfg.to_dict(), "value_mode": MULTI_STEP})
    return expected_value(circuit, batch, layout, current, cfg, maps, rng)


def value_distribution(circuit: Circuit, batch: EvidenceBatch, layout: WindowLayout, current: int,
                       cfg: PlannerConfig, maps: ValueMaps,
                       rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Distribution of the value variable per row, as (probs [B, M], values [M])

    Multi-step values sum the reward and RTG posteriors as if independent.
    """
    batch = _prepare(circuit, batch, layout, current, cfg, rng)
    targets, values, weights = _value_terms(layout, current, cfg, maps)
    post = posterior_marginals_batch(circuit, batch, targets)
    if len(targets) == 1:
        return post.dists[targets[0]], values[0]
    return convolve_sum_batch([post.dists[t] for t in targets], values, weights, out_bins=cfg.convolve_bins)


def multi_step_tail(circuit: Circuit, batch: EvidenceBatch, layout: WindowLayout, current: int,
                    cfg: PlannerConfig, maps: ValueMaps, v, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    probs, values = value_distribution(circuit, batch, layout, current, cfg, maps, rng)
    return dist_tail(probs, values, v)


def mc_value(circuit: Circuit, batch: EvidenceBatch, layout: WindowLayout, current: int, cfg: PlannerConfig,
             maps: ValueMaps, rng: np.random.Generator, samples: Optional[int] = None) -> np.ndarray:
    """Monte-Carlo lookahead value: sample s_{t+1..t+L}, then read rewards and RTG"""
    samples = samples or cfg.mc_samples
    if cfg.value_mode != MULTI_STEP:
        return expected_value(circuit, batch, layout, current, cfg, maps, rng)
    rollouts = batch.repeat(samples)
    for h in range(1, cfg.lookahead + 1):
        rollouts = sample_variables(circuit, rollouts, layout.state_vars(current + h), rng)
    exact = PlannerConfig.from_dict({**cfg.to_dict(), "future_actions": "marginalize"})
    values = expected_value(circuit, rollouts, layout, current, exact, maps)
    return values.reshape(batch.size, samples).mean(axis=1)


# Sampling

def single_step_sample(circuit: Circuit, prior, ctx: DecisionContext, cfg: PlannerConfig,
                       rng: np.random.Generator, maps: ValueMaps, n_samples: int = 1) -> EvidenceBatch:
    """Draw the current action factor by factor from prior × P(V ≥ v_δ | ·)

    v_δ is recomputed for every factor given the factors already drawn.
    Returns n_samples evidence rows with the drawn action observed.
    """
    layout, current = ctx.layout, ctx.current
    batch = ctx.batch.repeat(n_samples)
    for dim, var in enumerate(layout.action_vars(current)):
        admissible = _admissible(layout, cfg.excluded_actions, _action_prefix(batch, layout, current, dim), dim)
        if not admissible.any(axis=1).all():
            raise ConstraintError(f"constraint leaves no category for action factor {dim}")
        # under a constraint the threshold conditions on the admissible set
        scope = batch.restrict(var, admissible) if cfg.excluded_actions else batch
        probs, values = value_distribution(circuit, scope, layout, current, cfg, maps, rng)
        threshold = dist_quantile(probs, values, cfg.delta)
        weights = prior.next_token_dist(batch, var) * admissible
        candidates = np.flatnonzero(admissible.any(axis=0))
        trial = batch.repeat(len(candidates)).observe(var, np.tile(candidates, batch.size))
        t_probs, t_values = value_distribution(circuit, trial, layout, current, cfg, maps, rng)
        tails = dist_tail(t_probs, t_values, np.repeat(threshold, len(candidates)))
        weights[:, candidates] *= tails.reshape(batch.size, len(candidates))
        total = weights.sum(axis=1)
        if np.any(total <= 0):
            raise ConstraintError(f"no admissible category of action factor {dim} keeps positive weight")
        batch = batch.observe(var, sample_categorical(weights / total[:, None], rng))
    return batch


def prior_sample(prior, batch: EvidenceBatch, layout: WindowLayout, pos: int, cfg: PlannerConfig,
                 rng: np.random.Generator) -> EvidenceBatch:
    """Uncorrected draw of the action at window position pos, PAD and excluded actions removed"""
    for dim, var in enumerate(layout.action_vars(pos)):
        admissible = _admissible(layout, cfg.excluded_actions, _action_prefix(batch, layout, pos, dim), dim)
        weights = prior.next_token_dist(batch, var) * admissible
        total = weights.sum(axis=1, keepdims=True)
        if not admissible.any(axis=1).all():
            raise ConstraintError(f"constraint leaves no category for action factor {dim}")
        fallback = admissible / admissible.sum(axis=1, keepdims=True)
        weights = np.where(total > 0, weights / np.where(total > 0, total, 1.0), fallback)
        batch = batch.observe(var, sample_categorical(weights, rng))
    return batch


def _beam_rounds(prior, ctx: DecisionContext, beams: EvidenceBatch, cfg: PlannerConfig,
                 rng: np.random.Generator, score: Callable[[EvidenceBatch], np.ndarray]) -> PlanResult:
    layout, current = ctx.layout, ctx.current
    scores = None
    for h in range(1, cfg.horizon + 1):
        candidates = prior_sample(prior, beams.repeat(cfg.scaling_ratio), layout, current + h, cfg, rng)
        cand_scores = score(candidates)
        # score desc, candidate index asc
        order = np.lexsort((np.arange(len(cand_scores)), -cand_scores))[:cfg.beam_width]
        beams, scores = candidates.take(order), cand_scores[order]
    tokens = beams.obs[0, layout.action_vars(current)]
    return PlanResult(layout.join_action(tokens), float(scores[0]), BeamState(beams, scores))


def beam_search(circuit: Circuit, prior, ctx: DecisionContext, cfg: PlannerConfig, rng: np.random.Generator,
                maps: ValueMaps) -> PlanResult:
    """N corrected samples of a_t, then H rounds of ×λ prior extension and top-N rescoring"""
    beams = single_step_sample(circuit, prior, ctx, cfg, rng, maps, n_samples=cfg.beam_width)
    score = lambda b: expected_value(circuit, b, ctx.layout, ctx.current, cfg, maps, rng)
    return _beam_rounds(prior, ctx, beams, cfg, rng, score)


def baseline_sample(circuit: Circuit, prior, ctx: DecisionContext, cfg: PlannerConfig, rng: np.random.Generator,
                    maps: ValueMaps) -> PlanResult:
    """Same beam search from uncorrected prior samples, scored by Monte-Carlo values"""
    beams = prior_sample(prior, ctx.batch.repeat(cfg.beam_width), ctx.layout, ctx.current, cfg, rng)
    score = lambda b: mc_value(circuit, b, ctx.layout, ctx.current, cfg, maps, rng)
    return _beam_rounds(prior, ctx, beams, cfg, rng, score)


class TriflePlanner:
    """Episode-level driver: keeps the rolling history and picks environment actions

    policy: s-trifle (single-step values), m-trifle (multi-step values),
    tt-baseline (prior samples, Monte-Carlo values) or prior (one
    uncorrected prior sample, no search).
    """

    def __init__(self, circuit: Circuit, layout: WindowLayout, maps: ValueMaps, reward_bins: QuantityBins,
                 cfg: PlannerConfig, policy: str = "m-trifle", prior=None):
        if policy not in POLICIES:
            raise PlannerError(f"unknown policy '{policy}', expected one of {POLICIES}")
        mode = SINGLE_STEP if policy == "s-trifle" else MULTI_STEP
        self.cfg = PlannerConfig.from_dict({**cfg.to_dict(), "value_mode": mode})
        self.circuit = circuit
        self.layout = layout
        self.maps = maps
        self.reward_bins = reward_bins
        self.policy = policy
        self.prior = prior or CircuitPrior(circuit)
        self.history = RollingHistory()
        self.rng = make_rng(self.cfg.seed, stream=PLANNER_STREAM)
        self.last_context: Optional[DecisionContext] = None
        self.last_result: Optional[PlanResult] = None
        self._state: Optional[int] = None

    def reset(self, seed: int):
        self.history = RollingHistory()
        self.rng = make_rng(seed, stream=PLANNER_STREAM)
        self.last_context = self.last_result = None
        self._state = None

    def act(self, state_id: int) -> int:
        """Encode the observation into window evidence, plan, and decode the action"""
        ctx = encode_context(self.layout, self.reward_bins, self.history, state_id, self.cfg)
        if self.policy == "prior":
            batch = prior_sample(self.prior, ctx.batch, self.layout, ctx.current, self.cfg, self.rng)
            tokens = batch.obs[0, self.layout.action_vars(ctx.current)]
            result = PlanResult(self.layout.join_action(tokens), float("nan"), BeamState(batch, np.array([np.nan])))
        elif self.policy == "tt-baseline":
            result = baseline_sample(self.circuit, self.prior, ctx, self.cfg, self.rng, self.maps)
        else:
            result = beam_search(self.circuit, self.prior, ctx, self.cfg, self.rng, self.maps)
        if result.action in self.cfg.excluded_actions:
            raise ConstraintError(f"planner produced excluded action {result.action}")
        self.last_context, self.last_result, self._state = ctx, result, state_id
        return result.action

    def predicted_value(self) -> float:
        """f_v of the last chosen action with all later tokens marginalized"""
        ctx = self.last_context
        batch = ctx.batch.copy()
        batch.obs[0, self.layout.action_vars(ctx.current)] = self.layout.split_action(self.last_result.action)
        if self.policy == "tt-baseline":
            return float(mc_value(self.circuit, batch, self.layout, ctx.current, self.cfg, self.maps, self.rng)[0])
        return float(expected_value(self.circuit, batch, self.layout, ctx.current, self.cfg, self.maps, self.rng)[0])

    def observe(self, action: int, reward: float):
        if self._state is None:
            raise PlannerError("observe called before act")
        self.history.record(self._state, action, reward)
        self._state = None
