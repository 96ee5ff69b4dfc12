#!/usr/bin/env python3
"""
Trifle Command Line
Data collection, circuit training, evaluation episodes, diagnostics and the
exact-inference oracle suite
"""
import csv
import itertools
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import click
import colorlog
import numpy as np
from joblib import Parallel, delayed

from circuit_core import Circuit, load_circuit, partition_naive_bayes, random_circuit, save_circuit
from circuit_inference import (EvidenceBatch, backward_flows, conditional, convolve_sum, dist_cdf, expectation, forward,
                               forward_marginal, joint_scores, log_likelihood, posterior_marginal,
                               posterior_marginals_batch, tail_probability)
from circuit_learning import chow_liu, compile_hclt, init_params, learn_circuit
from models import CategoricalDist, EpisodeMetrics, EvidenceMask, RawTrajectory, RunReport, TrifleError, ValueMap
from settings_manager import SettingsManager
from stochastic_envs import (LakeEnv, TaxiEnv, collect_lake_dataset, collect_taxi_dataset, episode_seed,
                             evaluate_greedy, make_env, make_rng, q_learning)
from trajectory_data import (BinDictionary, WindowLayout, build_dataset, dataset_paths, label_rtg, load_dataset,
                             save_dataset)
from trifle_planner import PLANNER_STREAM, POLICIES, ConstraintError, PlannerConfig, TriflePlanner, ValueMaps

logger = logging.getLogger(__name__)

EVAL_POLICIES = POLICIES + ("random",)
LAKE_EPSILONS = ("0.3", "0.5", "0.7")
AGGREGATE_KEYS = ("mean_return", "mean_penalty", "mean_wall_hits", "mean_boundary_hits",
                  "success_rate", "failure_rate", "mean_steps")
QTABLE_FILE = "qtable.npz"
DATASET_PREFIX = "dataset"
CIRCUIT_FILE = "circuit.pc"
TRAIN_LOG = "train.csv"
ORACLE_RTOL = 1e-9


class ArtifactError(TrifleError):
    """Missing or unreadable pipeline artifact"""


class OracleError(TrifleError):
    """Exact-inference oracle suite reported mismatches"""


def setup_logging(verbosity: int = 0):
    """One colored stream handler on the root logger; -q, default, -v map to WARNING, INFO, DEBUG"""
    handler = colorlog.StreamHandler()
    handler.setFormatter(colorlog.ColoredFormatter("%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if verbosity < 0 else logging.INFO if verbosity == 0 else logging.DEBUG)


# Artifacts

def env_dir(out: str, env_name: str, lake_eps: Optional[str] = None) -> str:
    if env_name == "taxi":
        return os.path.join(out, "taxi")
    if lake_eps is None:
        raise ArtifactError("lake artifacts need a collection epsilon")
    return os.path.join(out, "lake", f"eps{lake_eps}")


@dataclass
class EvalArtifacts:
    """Everything an evaluation episode reads from disk"""
    circuit: Circuit
    layout: WindowLayout
    bins: BinDictionary
    gamma: float
    dataset_mean_return: float

    @property
    def maps(self) -> ValueMaps:
        return ValueMaps.from_maps(self.bins.reward.value_map(), self.bins.rtg.value_map())


def load_artifacts(run_dir: str) -> EvalArtifacts:
    prefix = os.path.join(run_dir, DATASET_PREFIX)
    circuit_path = os.path.join(run_dir, CIRCUIT_FILE)
    for path in dataset_paths(prefix) + (circuit_path,):
        if not os.path.exists(path):
            raise ArtifactError(f"missing artifact {path}; run collection and train-pc first")
    ds = load_dataset(prefix)
    circuit = load_circuit(circuit_path)
    if circuit.n_vars != ds.layout.n_vars:
        raise ArtifactError(f"{circuit_path} covers {circuit.n_vars} variables, the dataset window has "
                            f"{ds.layout.n_vars}")
    return EvalArtifacts(circuit, ds.layout, ds.bins, ds.gamma, ds.mean_return)


def write_config(out_dir: str, settings: SettingsManager, command: str, params: Dict[str, object], seed: int):
    """Effective settings plus the command parameters that reproduce the run"""
    os.makedirs(out_dir, exist_ok=True)
    snapshot = {"command": command, "seed": seed, "params": params, "settings": settings.snapshot()}
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True)


# Metrics

def realized_rtg(rewards: Sequence[float], gamma: float) -> List[float]:
    if not rewards:
        return []
    raw = RawTrajectory(list(range(len(rewards))), [0] * len(rewards), list(rewards))
    return list(label_rtg(raw, gamma).rtg)


def optimality_score(circuit: Circuit, evidence: EvidenceBatch, action_vars: Sequence[int],
                     action_tokens: Sequence[int], value_var: int, values: np.ndarray) -> float:
    """Quantile of R_t = E[V | s, a] within p(V | s); 0 under zero-probability evidence"""
    state_dist = posterior_marginals_batch(circuit, evidence, [value_var]).dists[value_var]
    with_action = evidence.copy()
    with_action.obs[:, list(action_vars)] = np.asarray(action_tokens)
    action_dist = posterior_marginals_batch(circuit, with_action, [value_var]).dists[value_var]
    r_t = float(action_dist[0] @ values)
    return float(dist_cdf(state_dist[:1], values, r_t)[0])


def decision_optimality(planner: TriflePlanner) -> float:
    ctx = planner.last_context
    layout = planner.layout
    return optimality_score(planner.circuit, ctx.batch, layout.action_vars(ctx.current),
                            layout.split_action(planner.last_result.action), layout.rtg_var(ctx.current),
                            planner.maps.rtg)


def aggregate(episodes: Sequence[EpisodeMetrics]) -> Dict[str, Optional[float]]:
    if not episodes:
        return {key: None for key in AGGREGATE_KEYS}
    return {
        "mean_return": float(np.mean([e.total_return for e in episodes])),
        "mean_penalty": float(np.mean([e.penalty_count for e in episodes])),
        "mean_wall_hits": float(np.mean([e.wall_hits for e in episodes])),
        "mean_boundary_hits": float(np.mean([e.boundary_hits for e in episodes])),
        "success_rate": float(np.mean([e.success for e in episodes])),
        "failure_rate": float(np.mean([not e.success for e in episodes])),
        "mean_steps": float(np.mean([e.steps for e in episodes])),
    }


def correlation_report(report: RunReport) -> Tuple[Optional[float], List[Dict[str, object]]]:
    """Pearson R over per-episode (mean predicted, mean realized) pairs; None when undefined"""
    pairs = [{"episode": e.episode, "predicted": e.mean_predicted, "realized": e.mean_realized}
             for e in report.episodes if e.mean_predicted is not None and e.mean_realized is not None]
    if len(pairs) < 3:
        return None, pairs
    x = np.array([p["predicted"] for p in pairs])
    y = np.array([p["realized"] for p in pairs])
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None, pairs
    return float(np.corrcoef(x, y)[0, 1]), pairs


# Episodes

def run_episode(artifacts: Optional[EvalArtifacts], env_name: str, env_cfg, policy: str, cfg: PlannerConfig,
                index: int, seed: int) -> EpisodeMetrics:
    ep_seed = episode_seed(seed, index)
    env = make_env(env_name, env_cfg)
    state = env.reset(ep_seed)
    metrics = EpisodeMetrics(episode=index, seed=ep_seed)
    if policy == "random":
        planner = None
        rng = make_rng(ep_seed, stream=PLANNER_STREAM)
        allowed = [a for a in range(env.n_actions) if a not in cfg.excluded_actions]
    else:
        planner = TriflePlanner(artifacts.circuit, artifacts.layout, artifacts.maps, artifacts.bins.reward, cfg,
                                policy=policy)
        planner.reset(ep_seed)
    rewards: List[float] = []
    done = False
    while not done:
        if planner is None:
            action = allowed[int(rng.integers(len(allowed)))]
        else:
            action = planner.act(state)
            metrics.predicted.append(planner.predicted_value())
            metrics.optimality.append(decision_optimality(planner))
        if action in cfg.excluded_actions:
            raise ConstraintError(f"episode {index} emitted excluded action {action}")
        state, reward, done = env.step(action)
        if planner is not None:
            planner.observe(action, reward)
        rewards.append(reward)
        metrics.penalty_count += env.event == "illegal"
        metrics.wall_hits += env.event == "wall"
        metrics.boundary_hits += env.event == "boundary"
    metrics.total_return = float(sum(rewards))
    metrics.steps = len(rewards)
    metrics.success = bool(env.success)
    if planner is not None:
        metrics.realized = realized_rtg(rewards, artifacts.gamma)
    return metrics


def run_eval(artifacts: Optional[EvalArtifacts], env_name: str, env_cfg, policy: str, cfg: PlannerConfig,
             n_episodes: int, seed: int, workers: int = 1, progress_every: int = 100) -> RunReport:
    """n seeded episodes, run in ordered chunks across workers; deterministic given seed"""
    if policy not in EVAL_POLICIES:
        raise ArtifactError(f"unknown policy '{policy}'")
    if n_episodes < 0:
        raise ArtifactError(f"episode count must be nonnegative, got {n_episodes}")
    if artifacts is None and policy != "random":
        raise ArtifactError(f"policy '{policy}' needs a trained circuit")
    episodes: List[EpisodeMetrics] = []
    step = max(1, progress_every)
    with Parallel(n_jobs=workers, backend="loky") as parallel:
        for start in range(0, n_episodes, step):
            stop = min(start + step, n_episodes)
            episodes.extend(parallel(delayed(run_episode)(artifacts, env_name, env_cfg, policy, cfg, i, seed)
                                     for i in range(start, stop)))
            logger.info("%s: %d/%d episodes, running mean return %.2f", policy, stop, n_episodes,
                        np.mean([e.total_return for e in episodes]))
    config = {"env": env_name, "env_config": env_cfg.to_dict(), "policy": policy, "episodes": n_episodes,
              "seed": seed, "planner": cfg.to_dict()}
    report = RunReport(config=config, episodes=episodes, aggregates=aggregate(episodes))
    report.correlation, _ = correlation_report(report)
    scores = [s for e in episodes for s in e.optimality]
    report.mean_optimality = float(np.mean(scores)) if scores else None
    return report


def _write_csv(path: str, rows: Sequence[Dict[str, object]], header: Sequence[str]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(header), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def write_report(report: RunReport, out_dir: str):
    """report.json, episodes.csv and pairs.csv"""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    rows = [e.to_row() for e in report.episodes]
    header = list(rows[0]) if rows else list(EpisodeMetrics(0, 0).to_row())
    _write_csv(os.path.join(out_dir, "episodes.csv"), rows, header)
    _, pairs = correlation_report(report)
    _write_csv(os.path.join(out_dir, "pairs.csv"), pairs, ["episode", "predicted", "realized"])


def score_rows(policy: str, report: RunReport) -> List[Dict[str, object]]:
    return [{"policy": policy, "episode": e.episode, "step": t, "score": s}
            for e in report.episodes for t, s in enumerate(e.optimality)]


# Oracle suite

@dataclass
class OracleResult:
    passed: int = 0
    failed: int = 0
    failures: List[str] = field(default_factory=list)

    def check(self, name: str, actual, expected):
        if np.allclose(actual, expected, rtol=ORACLE_RTOL, atol=1e-12):
            self.passed += 1
        else:
            self.failed += 1
            self.failures.append(f"{name}: got {actual!r}, expected {expected!r}")


def enumerate_joint(c: Circuit) -> Tuple[np.ndarray, np.ndarray]:
    """All assignments and their probabilities"""
    tokens = np.array(list(itertools.product(*[range(int(k)) for k in c.cards])), dtype=np.int64)
    return tokens, np.exp(log_likelihood(c, tokens))


def _check_circuit(c: Circuit, rng: np.random.Generator, tag: str, result: OracleResult):
    tokens, joint = enumerate_joint(c)
    result.check(f"{tag} normalization", joint.sum(), 1.0)
    n_observed = int(rng.integers(0, c.n_vars))
    observed = rng.choice(c.n_vars, size=n_observed, replace=False)
    evidence = EvidenceMask.of({int(v): int(rng.integers(c.cards[v])) for v in observed})
    match = np.ones(len(tokens), dtype=bool)
    for var, cat in evidence.observed.items():
        match &= tokens[:, var] == cat
    p_e = joint[match].sum()
    result.check(f"{tag} forward_marginal", np.exp(forward_marginal(c, evidence)), p_e)

    free = [v for v in range(c.n_vars) if evidence.is_unobserved(v)]
    target = int(rng.choice(free))
    card = int(c.cards[target])
    brute = np.bincount(tokens[match, target], weights=joint[match], minlength=card) / p_e
    result.check(f"{tag} posterior_marginal", posterior_marginal(c, evidence, target).as_array(), brute)
    fc = forward(c, EvidenceBatch.from_masks([evidence], c.cards))
    unnormalized = joint_scores(c, fc, backward_flows(c, fc), target)[0]
    result.check(f"{tag} flow total", unnormalized.sum(), p_e)
    category = int(np.argmax(brute))
    result.check(f"{tag} conditional", np.exp(conditional(c, EvidenceMask.of({target: category}), evidence)),
                 brute[category])

    values = rng.normal(size=card)
    vm = ValueMap.of(values)
    result.check(f"{tag} expectation", expectation(c, evidence, target, vm), brute @ values)
    v = float(values[int(rng.integers(card))])
    result.check(f"{tag} tail_probability", tail_probability(c, evidence, target, vm, v), brute[values >= v].sum())


def _check_convolution(rng: np.random.Generator, tag: str, result: OracleResult):
    dists = [CategoricalDist.of(rng.dirichlet(np.ones(4))) for _ in range(3)]
    maps = [ValueMap.of(rng.integers(-3, 4, size=4).astype(float)) for _ in range(3)]
    weights = [1.0, 0.9, 0.81]
    dist, support = convolve_sum(dists, maps, weights, out_bins=None)
    totals: Dict[float, float] = {}
    for i, j, k in itertools.product(range(4), repeat=3):
        s = weights[0] * maps[0](i) + weights[1] * maps[1](j) + weights[2] * maps[2](k)
        totals[s] = totals.get(s, 0.0) + dists[0].probs[i] * dists[1].probs[j] * dists[2].probs[k]
    values, probs = support.as_array(), dist.as_array()
    brute_mean = sum(s * p for s, p in totals.items())
    result.check(f"{tag} convolve mean", probs @ values, brute_mean)
    for s in sorted(totals):
        expected = sum(p for t, p in totals.items() if t >= s - 1e-12)
        result.check(f"{tag} convolve tail {s:.3f}", probs[values >= s - 1e-12].sum(), expected)


def oracle_fixtures(n_circuits: int, seed: int = 0) -> List[Tuple[str, Circuit]]:
    """Random smooth decomposable circuits on at most 12 binary variables, plus NB and HCLT fixtures"""
    rng = make_rng(seed)
    fixtures = [(f"random[{i}]", random_circuit(int(rng.integers(2, 13)), seed=seed + i, width=2, max_card=2))
                for i in range(n_circuits)]
    fixtures.append(("naive-bayes", partition_naive_bayes([1, 2, 3])))
    data = rng.integers(0, 2, size=(200, 8))
    tree = chow_liu(data, [2] * 8)
    fixtures.append(("hclt", init_params(compile_hclt(tree, 3, [2] * 8), seed)))
    return fixtures


def run_oracle_suite(n_circuits: int = 200, seed: int = 0) -> OracleResult:
    """Every exact query against full-joint enumeration"""
    result = OracleResult()
    rng = make_rng(seed, stream=4)
    for tag, circuit in oracle_fixtures(n_circuits, seed):
        _check_circuit(circuit, rng, tag, result)
        _check_convolution(rng, tag, result)
    logger.info("Oracle suite: %d passed, %d failed", result.passed, result.failed)
    return result


# Command line

def _parse_constraint(ctx, param, value) -> Tuple[int, ...]:
    if not value:
        return ()
    try:
        return tuple(sorted({int(tok) for tok in value.split(",") if tok.strip()}))
    except ValueError:
        raise click.BadParameter("expected a comma-separated list of action ids") from None


def common_options(f):
    f = click.option("--seed", type=int, default=0, show_default=True, help="Base seed")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="JSON settings override")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default="runs", show_default=True,
                     help="Artifact directory")(f)
    return f


def _settings(config_path: Optional[str]) -> SettingsManager:
    return SettingsManager(config_path)


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging")
@click.option("-q", "--quiet", count=True, help="Less logging")
def cli(verbose: int, quiet: int):
    """Trifle: tractable-inference planning on stochastic Taxi and FrozenLake"""
    setup_logging(verbose - quiet)


@cli.command("collect-taxi")
@common_options
def collect_taxi(seed: int, config_path: Optional[str], out: str):
    """Train the Q agent and collect the successful-episode Taxi dataset"""
    settings = _settings(config_path)
    env = TaxiEnv(settings.taxi_config())
    qtable = q_learning(env, settings.qlearning_config("taxi", seed))
    stats = evaluate_greedy(qtable, env, settings.get("collection", "greedy_episodes"), seed)
    if stats.success_rate < 0.95:
        click.echo(f"⚠️  Greedy success rate {stats.success_rate:.3f} is below 0.95")
    coll, data = settings.section("collection"), settings.section("data")
    n = coll["taxi_trajectories"]
    raws = collect_taxi_dataset(qtable, env, n=n, seed=seed, epsilon=coll["taxi_epsilon"],
                                max_rollouts=coll["max_rollouts_factor"] * n)
    ds = build_dataset(raws, data["gamma"], data["context"], env.state_cards, env.action_cards, data["n_bins"],
                       data["binning"]["taxi"], data["tail_pad"])
    run_dir = env_dir(out, "taxi")
    os.makedirs(run_dir, exist_ok=True)
    qtable.save(os.path.join(run_dir, QTABLE_FILE))
    save_dataset(ds, os.path.join(run_dir, DATASET_PREFIX))
    write_config(run_dir, settings, "collect-taxi", {}, seed)
    click.echo(f"📦 Taxi dataset: {len(ds)} trajectories, mean return {ds.mean_return:.2f} "
               f"(greedy success {stats.success_rate:.3f})")


@cli.command("collect-lake")
@common_options
@click.option("--lake-eps", "lake_eps", multiple=True, type=click.Choice(LAKE_EPSILONS),
              help="Collection epsilon (repeatable; default all)")
def collect_lake(seed: int, config_path: Optional[str], out: str, lake_eps: Tuple[str, ...]):
    """Train the Q agent and collect one FrozenLake dataset per epsilon"""
    settings = _settings(config_path)
    env = LakeEnv(settings.lake_config())
    qtable = q_learning(env, settings.qlearning_config("lake", seed))
    coll, data = settings.section("collection"), settings.section("data")
    for eps in lake_eps or tuple(f"{e:.1f}" for e in coll["lake_epsilons"]):
        raws = collect_lake_dataset(qtable, env, float(eps), coll["lake_trajectories"], seed)
        ds = build_dataset(raws, data["gamma"], data["context"], env.state_cards, env.action_cards, data["n_bins"],
                           data["binning"]["lake"], data["tail_pad"])
        run_dir = env_dir(out, "lake", eps)
        os.makedirs(run_dir, exist_ok=True)
        qtable.save(os.path.join(run_dir, QTABLE_FILE))
        save_dataset(ds, os.path.join(run_dir, DATASET_PREFIX))
        write_config(run_dir, settings, "collect-lake", {"lake_eps": eps}, seed)
        click.echo(f"📦 Lake dataset eps={eps}: {len(ds)} trajectories, mean return {ds.mean_return:.3f}")


@cli.command("train-pc")
@common_options
@click.option("--env", "env_name", type=click.Choice(["taxi", "lake"]), default="taxi", show_default=True)
@click.option("--lake-eps", "lake_eps", type=click.Choice(LAKE_EPSILONS), default=None)
@click.option("--workers", type=int, default=1, show_default=True)
def train_pc(seed: int, config_path: Optional[str], out: str, env_name: str, lake_eps: Optional[str], workers: int):
    """Learn an HCLT circuit on a collected dataset"""
    settings = _settings(config_path)
    run_dir = env_dir(out, env_name, lake_eps)
    prefix = os.path.join(run_dir, DATASET_PREFIX)
    if not all(os.path.exists(p) for p in dataset_paths(prefix)):
        raise ArtifactError(f"no dataset under {run_dir}; run collect-{env_name} first")
    report = learn_circuit(load_dataset(prefix), settings.em_config(seed, workers))
    save_circuit(report.circuit, os.path.join(run_dir, CIRCUIT_FILE))
    report.to_csv(os.path.join(run_dir, TRAIN_LOG))
    write_config(run_dir, settings, "train-pc", {"env": env_name, "lake_eps": lake_eps}, seed)
    heldout = f", held-out {report.heldout_avg_ll:.4f}" if report.heldout_avg_ll is not None else ""
    click.echo(f"✅ Circuit trained: {report.epochs_run} epochs, avg_ll {report.final_avg_ll:.4f}{heldout}")


def _env_config(settings: SettingsManager, env_name: str):
    return settings.taxi_config() if env_name == "taxi" else settings.lake_config()


def _planner_config(settings: SettingsManager, env_name: str, epsilon: Optional[float],
                    constraint: Tuple[int, ...], seed: int) -> PlannerConfig:
    n_actions = make_env(env_name, _env_config(settings, env_name)).n_actions
    bad = [a for a in constraint if not 0 <= a < n_actions]
    if bad:
        raise click.BadParameter(f"actions {bad} outside 0..{n_actions - 1}", param_hint="--constraint")
    if len(constraint) >= n_actions:
        raise click.BadParameter("the constraint excludes every action", param_hint="--constraint")
    return settings.planner_config(delta=epsilon, excluded_actions=constraint, seed=seed)


@cli.command("eval")
@common_options
@click.option("--env", "env_name", type=click.Choice(["taxi", "lake"]), default="taxi", show_default=True)
@click.option("--lake-eps", "lake_eps", type=click.Choice(LAKE_EPSILONS), default=None)
@click.option("--policy", type=click.Choice(EVAL_POLICIES), default="m-trifle", show_default=True)
@click.option("--episodes", type=click.IntRange(min=0), default=None, help="Episode count")
@click.option("--epsilon", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=None,
              help="Adaptive-threshold delta")
@click.option("--constraint", callback=_parse_constraint, default=None, help="Excluded actions, e.g. 2,3")
@click.option("--workers", type=int, default=None, help="Parallel episode workers")
def eval_command(seed: int, config_path: Optional[str], out: str, env_name: str, lake_eps: Optional[str],
                 policy: str, episodes: Optional[int], epsilon: Optional[float], constraint: Tuple[int, ...],
                 workers: Optional[int]):
    """Run seeded evaluation episodes and write the report files"""
    settings = _settings(config_path)
    cfg = _planner_config(settings, env_name, epsilon, constraint, seed)
    run_dir = env_dir(out, env_name, lake_eps)
    artifacts = load_artifacts(run_dir) if policy != "random" else None
    n = settings.get("eval", "episodes") if episodes is None else episodes
    report = run_eval(artifacts, env_name, _env_config(settings, env_name), policy, cfg, n, seed,
                      workers or settings.get("eval", "workers"), settings.get("eval", "progress_every"))
    tag = policy + ("-constrained" if constraint else "")
    out_dir = os.path.join(run_dir, "eval", tag)
    write_report(report, out_dir)
    write_config(out_dir, settings, "eval", {"env": env_name, "lake_eps": lake_eps, "policy": policy,
                                             "episodes": n, "epsilon": epsilon, "constraint": list(constraint)},
                 seed)
    agg = report.aggregates
    if agg["mean_return"] is None:
        click.echo(f"⚠️  No episodes run; report written to {out_dir}")
        return
    click.echo(f"✅ {policy}: mean return {agg['mean_return']:.2f}, #penalty {agg['mean_penalty']:.2f}, "
               f"failure rate {agg['failure_rate']:.3f} -> {out_dir}")


@cli.command("diagnose")
@common_options
@click.option("--env", "env_name", type=click.Choice(["taxi", "lake"]), default="taxi", show_default=True)
@click.option("--lake-eps", "lake_eps", type=click.Choice(LAKE_EPSILONS), default=None)
@click.option("--episodes", type=click.IntRange(min=0), default=None, help="Episode count per policy")
@click.option("--epsilon", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=None)
@click.option("--workers", type=int, default=None)
def diagnose(seed: int, config_path: Optional[str], out: str, env_name: str, lake_eps: Optional[str],
             episodes: Optional[int], epsilon: Optional[float], workers: Optional[int]):
    """Correlation and optimality-score diagnostics for s-Trifle, m-Trifle and the uncorrected prior"""
    settings = _settings(config_path)
    cfg = _planner_config(settings, env_name, epsilon, (), seed)
    run_dir = env_dir(out, env_name, lake_eps)
    artifacts = load_artifacts(run_dir)
    n = settings.get("eval", "diagnose_episodes") if episodes is None else episodes
    out_dir = os.path.join(run_dir, "diagnose")
    summary, scores = {}, []
    for policy in ("s-trifle", "m-trifle", "prior"):
        report = run_eval(artifacts, env_name, _env_config(settings, env_name), policy, cfg, n, seed,
                          workers or settings.get("eval", "workers"), settings.get("eval", "progress_every"))
        write_report(report, os.path.join(out_dir, policy))
        scores.extend(score_rows(policy, report))
        summary[policy] = {"correlation": report.correlation, "mean_optimality": report.mean_optimality,
                           "mean_return": report.aggregates["mean_return"]}
        click.echo(f"📊 {policy}: R={summary[policy]['correlation']}, "
                   f"optimality={summary[policy]['mean_optimality']}")
    _write_csv(os.path.join(out_dir, "scores.csv"), scores, ["policy", "episode", "step", "score"])
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    write_config(out_dir, settings, "diagnose", {"env": env_name, "lake_eps": lake_eps, "episodes": n,
                                                 "epsilon": epsilon}, seed)


@cli.command("oracle-check")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--circuits", type=click.IntRange(min=0), default=None, help="Random circuits to check")
def oracle_check(seed: int, config_path: Optional[str], circuits: Optional[int]):
    """Compare every exact query with brute-force enumeration"""
    settings = _settings(config_path)
    n = settings.get("eval", "oracle_circuits") if circuits is None else circuits
    result = run_oracle_suite(n, seed)
    click.echo(f"🔎 Oracle checks: {result.passed} passed, {result.failed} failed")
    for failure in result.failures[:20]:
        click.echo(f"   {failure}")
    if result.failed:
        raise OracleError(f"{result.failed} oracle checks failed")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Exit codes: 0 success, 1 usage error, 2 runtime error"""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="trifle", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("❌ Aborted", err=True)
        return 1
    except (TrifleError, OSError) as exc:
        logger.error("%s", exc)
        click.echo(f"❌ {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
