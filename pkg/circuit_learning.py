#!/usr/bin/env python3
"""
Trifle Circuit Learning
Chow-Liu structure, hidden Chow-Liu tree compilation and full-batch EM
"""
import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from joblib import Parallel, delayed
from scipy import sparse

from circuit_core import Circuit, NodeSpec, build_circuit
from circuit_inference import EvidenceBatch, backward_flows, forward, log_likelihood
from models import TrifleError

logger = logging.getLogger(__name__)


class LearningError(TrifleError):
    """Structure or parameter learning cannot proceed"""


@dataclass(frozen=True)
class EMConfig:
    epochs: int = 100
    pseudocount: float = 0.1
    seed: int = 0
    hidden_size: int = 16
    tol: float = 1e-6
    chunk_size: int = 1024
    workers: int = 1
    heldout_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise LearningError(f"epochs must be positive, got {self.epochs}")
        if self.pseudocount < 0:
            raise LearningError(f"pseudocount must be nonnegative, got {self.pseudocount}")
        if self.hidden_size < 1:
            raise LearningError(f"hidden_size must be positive, got {self.hidden_size}")
        if self.chunk_size < 1 or self.workers < 1:
            raise LearningError("chunk_size and workers must be positive")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise LearningError(f"heldout_fraction must lie in [0, 1), got {self.heldout_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class ChowLiuTree:
    """Maximum mutual-information spanning tree, oriented away from root"""
    n_vars: int
    edges: List[Tuple[int, int, float]]
    root: int
    parent: Tuple[int, ...]
    order: Tuple[int, ...]

    def children(self, var: int) -> List[int]:
        return [v for v in self.order if self.parent[v] == var]

    def edge_set(self) -> set:
        return {(min(u, v), max(u, v)) for u, v, _ in self.edges}


@dataclass
class TrainReport:
    avg_ll: List[float] = field(default_factory=list)
    avg_objective: List[float] = field(default_factory=list)
    circuit: Optional[Circuit] = None
    final_avg_ll: Optional[float] = None
    heldout_avg_ll: Optional[float] = None
    converged: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.avg_ll)

    def csv_text(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["epoch", "avg_ll", "avg_objective"])
        for epoch, (ll, obj) in enumerate(zip(self.avg_ll, self.avg_objective)):
            writer.writerow([epoch, repr(ll), repr(obj)])
        return buffer.getvalue()

    def to_csv(self, path: str):
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.csv_text())


def _as_tokens(data, cards: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Token matrix and cardinalities from a dataset object or a raw array"""
    if hasattr(data, "tokens") and hasattr(data, "layout"):
        tokens = data.tokens
        cards = data.layout.cards() if cards is None else cards
    else:
        tokens = np.asarray(data, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise LearningError("empty dataset")
    if cards is None:
        cards = np.maximum(tokens.max(axis=0) + 1, 2)
    return tokens, np.asarray(cards, dtype=np.int64)


def _check_range(tokens: np.ndarray, cards: np.ndarray):
    bad = (tokens < 0) | (tokens >= cards[None, :])
    if bad.any():
        row, var = np.argwhere(bad)[0]
        raise LearningError(f"sample {row} has category {tokens[row, var]} out of range for variable {var}")


def mutual_information(tokens: np.ndarray, cards: np.ndarray, pseudocount: float = 0.1) -> np.ndarray:
    """Pairwise MI matrix from pseudocount-smoothed joint counts"""
    n_vars = tokens.shape[1]
    mi = np.zeros((n_vars, n_vars))
    for i in range(n_vars):
        for j in range(i + 1, n_vars):
            joint = np.bincount(tokens[:, i] * cards[j] + tokens[:, j], minlength=cards[i] * cards[j])
            joint = joint.reshape(cards[i], cards[j]).astype(np.float64) + pseudocount
            joint /= joint.sum()
            outer = joint.sum(axis=1, keepdims=True) @ joint.sum(axis=0, keepdims=True)
            with np.errstate(divide="ignore", invalid="ignore"):
                terms = np.where(joint > 0, joint * np.log(joint / outer), 0.0)
            mi[i, j] = mi[j, i] = max(float(terms.sum()), 0.0)
    return mi


def chow_liu(data, cards: Optional[Sequence[int]] = None, pseudocount: float = 0.1,
             root: int = 0) -> ChowLiuTree:
    """Maximum spanning tree under empirical mutual information

    Equal weights resolve in lexicographic (lower index, lower index) edge order.
    """
    tokens, cards = _as_tokens(data, cards)
    _check_range(tokens, cards)
    n_vars = tokens.shape[1]
    if not 0 <= root < n_vars:
        raise LearningError(f"root {root} outside 0..{n_vars - 1}")
    mi = mutual_information(tokens, cards, pseudocount)

    graph = nx.Graph()
    graph.add_nodes_from(range(n_vars))
    for i in range(n_vars):
        for j in range(i + 1, n_vars):
            graph.add_edge(i, j, weight=mi[i, j])
    tree = nx.maximum_spanning_tree(graph, algorithm="kruskal")

    parent = [-1] * n_vars
    order = [root]
    for u, v in nx.bfs_edges(tree, root, sort_neighbors=sorted):
        parent[v] = u
        order.append(v)
    edges = sorted((min(u, v), max(u, v), float(mi[u, v])) for u, v in tree.edges())
    logger.info("Chow-Liu tree over %d variables, total MI %.4f nats", n_vars, sum(w for _, _, w in edges))
    return ChowLiuTree(n_vars, edges, root, tuple(parent), tuple(order))


def compile_hclt(tree: ChowLiuTree, M: int, cards: Sequence[int]) -> Circuit:
    """Hidden Chow-Liu tree circuit with uniform parameters

    Each variable v carries an M-state latent Z_v. For every latent state z,
    P[v, z] multiplies the input node I[v, z] with one mixture S[c, z] per
    tree child c, and S[c, z] mixes P[c, ·]. The root mixes P[root, ·].
    Single-child products and sums collapse to their child.
    """
    if M < 1:
        raise LearningError(f"hidden size must be positive, got {M}")
    if len(cards) != tree.n_vars:
        raise LearningError(f"tree has {tree.n_vars} variables, got {len(cards)} cardinalities")
    specs: List[NodeSpec] = []

    def add(spec: NodeSpec) -> int:
        specs.append(spec)
        return len(specs) - 1

    mixture: dict = {}
    top: List[int] = []
    for var in reversed(tree.order):
        leaves = [add(NodeSpec.input(var, np.full(cards[var], 1.0 / cards[var]))) for _ in range(M)]
        products = []
        for z in range(M):
            parts = [leaves[z]] + [mixture[child][z] for child in tree.children(var)]
            products.append(parts[0] if len(parts) == 1 else add(NodeSpec.product(parts)))
        if var == tree.root:
            top = products
        elif M == 1:
            mixture[var] = products
        else:
            mixture[var] = [add(NodeSpec.sum(products, np.full(M, 1.0 / M))) for _ in range(M)]
    if M > 1:
        add(NodeSpec.sum(top, np.full(M, 1.0 / M)))
    circuit = build_circuit(specs, variables=list(cards))
    logger.info("Compiled HCLT: %d nodes, %d parameters (M=%d)", circuit.n_nodes, circuit.parameter_count, M)
    return circuit


def init_params(c: Circuit, seed: int) -> Circuit:
    """Symmetric Dirichlet(1) draws for every sum node and input distribution"""
    rng = np.random.Generator(np.random.Philox(seed))
    weights = np.ones(c.n_edges)
    for node in c.sum_nodes:
        lo, hi = c.child_ptr[node], c.child_ptr[node + 1]
        weights[lo:hi] = rng.dirichlet(np.ones(hi - lo))
    tables = [rng.dirichlet(np.ones(t.shape[1]), size=t.shape[0]) if t.shape[0] else t for t in c.input_tables]
    return c.with_params(weights, tables)


@dataclass
class _Statistics:
    edge_totals: np.ndarray
    input_counts: List[np.ndarray]
    ll_sum: float
    dead_rows: int


def _chunk_statistics(c: Circuit, chunk: np.ndarray) -> _Statistics:
    fc = forward(c, EvidenceBatch.from_tokens(chunk))
    fl = backward_flows(c, fc, allow_zero=True, edge_totals=True)
    counts = []
    rows = np.arange(len(chunk))
    for var, nodes in enumerate(c.input_nodes):
        card = int(c.cards[var])
        if len(nodes) == 0:
            counts.append(np.zeros((0, card)))
            continue
        onehot = sparse.csr_matrix((np.ones(len(chunk)), (rows, chunk[:, var])), shape=(len(chunk), card))
        counts.append(np.asarray(onehot.T @ fl.flows[nodes].T).T)
    ll = fc.log_marginal
    alive = np.isfinite(ll)
    return _Statistics(fl.edge_totals, counts, float(ll[alive].sum()), int((~alive).sum()))


def expected_statistics(c: Circuit, tokens: np.ndarray, chunk_size: int = 1024, workers: int = 1) -> _Statistics:
    """E-step over fixed-size chunks, merged in chunk order"""
    chunks = [tokens[i:i + chunk_size] for i in range(0, len(tokens), chunk_size)]
    parts = Parallel(n_jobs=workers, backend="threading")(delayed(_chunk_statistics)(c, ch) for ch in chunks)
    total = parts[0]
    for part in parts[1:]:
        total = _Statistics(total.edge_totals + part.edge_totals,
                            [a + b for a, b in zip(total.input_counts, part.input_counts)],
                            total.ll_sum + part.ll_sum, total.dead_rows + part.dead_rows)
    return total


def _log_prior(c: Circuit, pseudocount: float) -> float:
    if pseudocount == 0:
        return 0.0
    with np.errstate(divide="ignore"):
        total = np.log(c.edge_weight[c.sum_edge_mask]).sum()
        total += sum(np.log(t).sum() for t in c.input_tables if t.size)
    return float(pseudocount * total)


def _maximize(c: Circuit, stats: _Statistics, pseudocount: float) -> Circuit:
    """Normalized (statistic + pseudocount); nodes without mass keep their parameters"""
    mask = c.sum_edge_mask
    stat = np.where(mask, stats.edge_totals + pseudocount, 0.0)
    node_total = np.bincount(c.edge_parent, weights=stat, minlength=c.n_nodes)
    denom = node_total[c.edge_parent]
    usable = mask & (denom > 0)
    weights = np.where(usable, stat / np.where(usable, denom, 1.0), c.edge_weight)

    tables = []
    for var, counts in enumerate(stats.input_counts):
        old = c.input_tables[var]
        if old.shape[0] == 0:
            tables.append(old)
            continue
        counts = counts + pseudocount
        row_total = counts.sum(axis=1, keepdims=True)
        tables.append(np.where(row_total > 0, counts / np.where(row_total > 0, row_total, 1.0), old))
    return c.with_params(weights, tables)


BLEND_STEPS = (1.0, 0.5, 0.25, 0.125, 0.0)


def _expected_terms(stat: np.ndarray, params: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(stat > 0, stat * np.log(params), 0.0)


def _select_blend(stat: np.ndarray, old: np.ndarray, smoothed: np.ndarray, plain: np.ndarray,
                  group_total, expand) -> np.ndarray:
    """Per parameter group, the most-smoothed blend whose expected complete-data
    log-likelihood is no worse than the current parameters'; else the current ones

    Blends of normalized groups stay normalized. At blend 0 this is the plain
    EM update, which maximizes the expected complete-data log-likelihood.
    """
    floor = group_total(_expected_terms(stat, old))
    chosen = old.copy()
    decided = np.zeros(floor.shape, dtype=bool)
    for beta in BLEND_STEPS:
        candidate = beta * smoothed + (1.0 - beta) * plain
        accept = ~decided & (group_total(_expected_terms(stat, candidate)) >= floor)
        take = expand(accept)
        chosen[take] = candidate[take]
        decided |= accept
    return chosen


def _guarded_maximize(c: Circuit, stats: _Statistics, pseudocount: float) -> Circuit:
    """M-step that never lowers the training log-likelihood

    Every group (a sum node's weights, an input node's table) only moves to
    parameters that do not lower its term of the expected complete-data
    log-likelihood, so the update is a generalized EM step.
    """
    smoothed = _maximize(c, stats, pseudocount)
    if pseudocount == 0:
        return smoothed
    plain = _maximize(c, stats, 0.0)
    edge_stat = np.where(c.sum_edge_mask, stats.edge_totals, 0.0)
    weights = _select_blend(edge_stat, c.edge_weight, smoothed.edge_weight, plain.edge_weight,
                            lambda terms: np.bincount(c.edge_parent, weights=terms, minlength=c.n_nodes),
                            lambda accept: accept[c.edge_parent])
    tables = []
    for var, counts in enumerate(stats.input_counts):
        old = c.input_tables[var]
        if old.shape[0] == 0:
            tables.append(old)
            continue
        tables.append(_select_blend(counts, old, smoothed.input_tables[var], plain.input_tables[var],
                                    lambda terms: terms.sum(axis=1), lambda accept: accept))
    return c.with_params(weights, tables)


def em_fit(c: Circuit, data, cfg: EMConfig) -> TrainReport:
    """Full-batch EM with a smoothed, likelihood-guarded M-step

    Each epoch records the average log-likelihood and the Dirichlet-penalized
    objective of the parameters entering that epoch. The M-step goes through
    _guarded_maximize, so the log-likelihood never decreases; with
    pseudocount 0 both traces coincide. Stops early when the log-likelihood
    improves by less than cfg.tol per sample.
    """
    tokens, _ = _as_tokens(data, c.cards)
    if tokens.shape[1] != c.n_vars:
        raise LearningError(f"data has {tokens.shape[1]} variables, circuit has {c.n_vars}")
    _check_range(tokens, c.cards)
    n = len(tokens)
    report = TrainReport()
    previous = None
    for epoch in range(cfg.epochs):
        stats = expected_statistics(c, tokens, cfg.chunk_size, cfg.workers)
        if stats.dead_rows:
            logger.warning("Epoch %d: %d samples have probability zero", epoch, stats.dead_rows)
        avg_ll = stats.ll_sum / n
        objective = (stats.ll_sum + _log_prior(c, cfg.pseudocount)) / n
        report.avg_ll.append(avg_ll)
        report.avg_objective.append(objective)
        logger.info("EM epoch %d/%d: avg_ll=%.6f objective=%.6f", epoch + 1, cfg.epochs, avg_ll, objective)
        if previous is not None and avg_ll - previous < cfg.tol:
            report.converged = True
            logger.info("EM converged after %d epochs", epoch + 1)
            break
        previous = avg_ll
        c = _guarded_maximize(c, stats, cfg.pseudocount)
    report.circuit = c
    report.final_avg_ll = report.avg_ll[-1] if report.converged else evaluate_ll(c, tokens, cfg.workers)
    return report


def train_heldout_split(tokens: np.ndarray, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(seed))
    perm = rng.permutation(len(tokens))
    n_held = min(int(round(len(tokens) * fraction)), len(tokens) - 1)
    return tokens[np.sort(perm[n_held:])], tokens[np.sort(perm[:n_held])]


def evaluate_ll(c: Circuit, tokens: np.ndarray, workers: int = 1) -> float:
    """Average full-evidence log-likelihood"""
    if len(tokens) == 0:
        raise LearningError("cannot evaluate likelihood on an empty set")
    return float(np.mean(log_likelihood(c, tokens, workers=workers)))


def learn_circuit(data, cfg: EMConfig) -> TrainReport:
    """Chow-Liu tree, HCLT compilation, random init and EM on a train split"""
    tokens, cards = _as_tokens(data)
    train, heldout = train_heldout_split(tokens, cfg.heldout_fraction, cfg.seed)
    tree = chow_liu(train, cards, pseudocount=cfg.pseudocount)
    circuit = init_params(compile_hclt(tree, cfg.hidden_size, cards), cfg.seed)
    report = em_fit(circuit, train, cfg)
    if len(heldout):
        report.heldout_avg_ll = evaluate_ll(report.circuit, heldout, cfg.workers)
        logger.info("Held-out avg_ll=%.6f over %d windows", report.heldout_avg_ll, len(heldout))
    return report
