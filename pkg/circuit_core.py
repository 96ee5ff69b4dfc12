#!/usr/bin/env python3
"""
Trifle Circuit Core
Probabilistic-circuit DAG: construction, structural checks, .pcirc files and fixture constructors
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from scipy import sparse

from models import NORMALIZATION_TOL, NodeKind, TrifleError, Variable

logger = logging.getLogger(__name__)

FORMAT_MAGIC = "PCIRC"
FORMAT_VERSION = 1

KIND_INPUT, KIND_SUM, KIND_PRODUCT = 0, 1, 2
_KIND_CODES = {NodeKind.INPUT: KIND_INPUT, NodeKind.SUM: KIND_SUM, NodeKind.PRODUCT: KIND_PRODUCT}
_CODE_KINDS = {code: kind for kind, code in _KIND_CODES.items()}


class CircuitError(TrifleError):
    """Invalid circuit structure or parameters"""


class CircuitFormatError(CircuitError):
    """Malformed .pcirc stream"""


class CircuitVersionError(CircuitError):
    """.pcirc stream written by an unsupported format version"""


@dataclass(frozen=True)
class NodeSpec:
    """Node descriptor consumed by build_circuit"""
    kind: NodeKind
    children: Tuple[int, ...] = ()
    weights: Optional[Tuple[float, ...]] = None
    var: Optional[int] = None
    dist: Optional[Tuple[float, ...]] = None

    @classmethod
    def input(cls, var: int, dist: Iterable[float]) -> "NodeSpec":
        return cls(NodeKind.INPUT, var=int(var), dist=tuple(float(p) for p in dist))

    @classmethod
    def sum(cls, children: Iterable[int], weights: Iterable[float]) -> "NodeSpec":
        return cls(NodeKind.SUM, children=tuple(int(c) for c in children),
                   weights=tuple(float(w) for w in weights))

    @classmethod
    def product(cls, children: Iterable[int]) -> "NodeSpec":
        return cls(NodeKind.PRODUCT, children=tuple(int(c) for c in children))


@dataclass(frozen=True)
class LayerBlock:
    """Same-depth inner nodes of one kind, evaluated in one vectorized step"""
    kind: int
    nodes: np.ndarray      # parent node ids, ascending
    counts: np.ndarray     # children per parent
    starts: np.ndarray     # segment offsets into edges
    edges: np.ndarray      # global edge ids
    children: np.ndarray   # child node per edge
    targets: np.ndarray    # unique children
    scatter: sparse.csr_matrix  # [len(targets), len(edges)] one-hot

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class StructureReport:
    smooth: bool
    decomposable: bool
    violations: List[Tuple[int, str]] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return self.smooth and self.decomposable


class Circuit:
    """Immutable probabilistic circuit stored as flat topologically ordered arrays

    Node ids run children-before-parents; the root is the last node. Edges are
    stored CSR style (child_ptr/child_idx); edge_weight holds sum-node weights
    and 1.0 on product edges. Input distributions are grouped per variable so
    that all input nodes of a variable form one [k, card] table.
    """

    def __init__(self, variables: Sequence[Variable], kinds: np.ndarray, var_of: np.ndarray,
                 child_ptr: np.ndarray, child_idx: np.ndarray, edge_weight: np.ndarray,
                 input_tables: Sequence[np.ndarray], scopes: Sequence[frozenset],
                 layers: Optional[List[List[LayerBlock]]] = None):
        self.variables = tuple(variables)
        self.kinds = _frozen(kinds, np.int8)
        self.var_of = _frozen(var_of, np.int64)
        self.child_ptr = _frozen(child_ptr, np.int64)
        self.child_idx = _frozen(child_idx, np.int64)
        self.edge_weight = _frozen(edge_weight, np.float64)
        self.input_tables = tuple(_frozen(t, np.float64) for t in input_tables)
        self.scopes = tuple(scopes)
        self.cards = _frozen([v.cardinality for v in self.variables], np.int64)

        self.input_nodes = tuple(_frozen(np.flatnonzero((self.kinds == KIND_INPUT) & (self.var_of == v)), np.int64)
                                 for v in range(len(self.variables)))
        input_row = np.full(len(self.kinds), -1, dtype=np.int64)
        for nodes in self.input_nodes:
            input_row[nodes] = np.arange(len(nodes))
        self.input_row = _frozen(input_row, np.int64)

        self.edge_parent = _frozen(np.repeat(np.arange(len(self.kinds)), np.diff(self.child_ptr)), np.int64)
        self.sum_edge_mask = _frozen(self.kinds[self.edge_parent] == KIND_SUM, bool)
        self._layers = layers if layers is not None else _plan_layers(self.kinds, self.child_ptr, self.child_idx)

    # Shape

    @property
    def n_nodes(self) -> int:
        return len(self.kinds)

    @property
    def n_edges(self) -> int:
        return len(self.child_idx)

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def root(self) -> int:
        return self.n_nodes - 1

    @property
    def layers(self) -> List[List[LayerBlock]]:
        """Inner-node blocks grouped by depth, shallowest first"""
        return self._layers

    @property
    def parameter_count(self) -> int:
        return int(self.sum_edge_mask.sum()) + sum(t.size for t in self.input_tables)

    # Per-node views

    def kind(self, node: int) -> NodeKind:
        return _CODE_KINDS[int(self.kinds[node])]

    def children(self, node: int) -> np.ndarray:
        return self.child_idx[self.child_ptr[node]:self.child_ptr[node + 1]]

    def weights(self, node: int) -> np.ndarray:
        if self.kinds[node] != KIND_SUM:
            raise CircuitError(f"node {node} is not a sum node")
        return self.edge_weight[self.child_ptr[node]:self.child_ptr[node + 1]]

    def dist(self, node: int) -> np.ndarray:
        if self.kinds[node] != KIND_INPUT:
            raise CircuitError(f"node {node} is not an input node")
        return self.input_tables[self.var_of[node]][self.input_row[node]]

    def to_specs(self) -> List[NodeSpec]:
        specs = []
        for n in range(self.n_nodes):
            code = self.kinds[n]
            if code == KIND_INPUT:
                specs.append(NodeSpec.input(int(self.var_of[n]), self.dist(n)))
            elif code == KIND_SUM:
                specs.append(NodeSpec.sum(self.children(n), self.weights(n)))
            else:
                specs.append(NodeSpec.product(self.children(n)))
        return specs

    # Parameters

    def with_params(self, edge_weight: np.ndarray, input_tables: Sequence[np.ndarray]) -> "Circuit":
        """Same structure, new parameters (validated, not renormalized)"""
        edge_weight = np.asarray(edge_weight, dtype=np.float64)
        if edge_weight.shape != self.edge_weight.shape:
            raise CircuitError(f"edge weights have shape {edge_weight.shape}, expected {self.edge_weight.shape}")
        if not np.all(edge_weight[~self.sum_edge_mask] == 1.0):
            raise CircuitError("product edges must carry weight 1")
        sum_totals = self.sum_node_totals(edge_weight)
        if np.any(edge_weight < 0) or not np.all(np.isfinite(edge_weight)) \
                or np.any(np.abs(sum_totals - 1.0) > NORMALIZATION_TOL):
            raise CircuitError("sum-node weights must be nonnegative and normalized")
        tables = []
        for v, table in enumerate(input_tables):
            table = np.asarray(table, dtype=np.float64)
            if table.shape != self.input_tables[v].shape:
                raise CircuitError(f"input table of variable {v} has shape {table.shape}, "
                                   f"expected {self.input_tables[v].shape}")
            if table.size and (np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > NORMALIZATION_TOL)):
                raise CircuitError(f"input distributions of variable {v} are not normalized")
            tables.append(table)
        return Circuit(self.variables, self.kinds, self.var_of, self.child_ptr, self.child_idx,
                       edge_weight, tables, self.scopes, layers=self._layers)

    @property
    def sum_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == KIND_SUM)

    def sum_node_totals(self, edge_values: np.ndarray) -> np.ndarray:
        """Per-sum-node totals of an edge-indexed array, in sum_nodes order"""
        totals = np.bincount(self.edge_parent, weights=np.asarray(edge_values, dtype=np.float64),
                             minlength=self.n_nodes)
        return totals[self.sum_nodes]

    def equals(self, other: "Circuit") -> bool:
        """Structural equality with bit-exact parameters"""
        return (self.variables == other.variables
                and np.array_equal(self.kinds, other.kinds)
                and np.array_equal(self.var_of, other.var_of)
                and np.array_equal(self.child_ptr, other.child_ptr)
                and np.array_equal(self.child_idx, other.child_idx)
                and np.array_equal(self.edge_weight, other.edge_weight)
                and all(np.array_equal(a, b) for a, b in zip(self.input_tables, other.input_tables)))

    def __repr__(self) -> str:
        return f"Circuit(nodes={self.n_nodes}, edges={self.n_edges}, vars={self.n_vars})"


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _plan_layers(kinds: np.ndarray, child_ptr: np.ndarray, child_idx: np.ndarray) -> List[List[LayerBlock]]:
    n = len(kinds)
    depth = np.zeros(n, dtype=np.int64)
    for node in range(n):
        if kinds[node] != KIND_INPUT:
            depth[node] = 1 + depth[child_idx[child_ptr[node]:child_ptr[node + 1]]].max()
    layers = []
    for d in range(1, int(depth.max()) + 1 if n else 1):
        at_depth = np.flatnonzero(depth == d)
        blocks = []
        for code in (KIND_SUM, KIND_PRODUCT):
            nodes = at_depth[kinds[at_depth] == code]
            if len(nodes) == 0:
                continue
            counts = child_ptr[nodes + 1] - child_ptr[nodes]
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
            total = int(counts.sum())
            edges = np.repeat(child_ptr[nodes] - starts, counts) + np.arange(total)
            children = child_idx[edges]
            targets, inverse = np.unique(children, return_inverse=True)
            scatter = sparse.csr_matrix((np.ones(total), (inverse, np.arange(total))),
                                        shape=(len(targets), total))
            blocks.append(LayerBlock(code, nodes, counts, starts, edges, children, targets, scatter))
        layers.append(blocks)
    return layers


def _check_prob_vector(values, what: str, renormalize: bool) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise CircuitError(f"{what} must be a non-empty vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise CircuitError(f"{what} has negative or non-finite entries")
    total = arr.sum()
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise CircuitError(f"{what} sums to {total!r}, not normalized")
    return arr / total if renormalize else arr


def build_circuit(node_specs: Sequence[NodeSpec],
                  variables: Optional[Sequence[Union[Variable, int]]] = None,
                  renormalize: bool = True) -> Circuit:
    """Validate node descriptors and lay them out children-first

    Children may be listed in any order as long as the graph is acyclic with a
    single root. Already topologically ordered specs keep their ids.
    variables: Variable objects or plain cardinalities; inferred from the
    input distributions when omitted.
    """
    specs = list(node_specs)
    if not specs:
        raise CircuitError("circuit needs at least one node")
    n = len(specs)

    graph = nx.DiGraph()
    graph.add_nodes_from(range(n))
    for i, spec in enumerate(specs):
        if spec.kind == NodeKind.INPUT:
            if spec.children:
                raise CircuitError(f"input node {i} cannot have children")
            if spec.var is None or spec.dist is None:
                raise CircuitError(f"input node {i} needs a variable and a distribution")
        else:
            if not spec.children:
                raise CircuitError(f"{spec.kind.value} node {i} has no children")
            if spec.kind == NodeKind.SUM and (spec.weights is None or len(spec.weights) != len(spec.children)):
                raise CircuitError(f"sum node {i} needs one weight per child")
            if spec.kind == NodeKind.PRODUCT and spec.weights is not None:
                raise CircuitError(f"product node {i} cannot carry weights")
            for child in spec.children:
                if not 0 <= child < n:
                    raise CircuitError(f"node {i} references unknown node {child}")
            graph.add_edges_from((i, c) for c in spec.children)

    if not nx.is_directed_acyclic_graph(graph):
        cycle = nx.find_cycle(graph)
        raise CircuitError(f"cycle detected through nodes {[u for u, _ in cycle]}")
    roots = [i for i in range(n) if graph.in_degree(i) == 0]
    if len(roots) != 1:
        raise CircuitError(f"circuit must have exactly one root, found {len(roots)}: {roots[:10]}")

    variables = _resolve_variables(specs, variables)
    cards = [v.cardinality for v in variables]

    order = list(nx.lexicographical_topological_sort(graph.reverse(copy=False)))
    new_id = {old: new for new, old in enumerate(order)}

    kinds = np.empty(n, dtype=np.int8)
    var_of = np.full(n, -1, dtype=np.int64)
    child_ptr = np.zeros(n + 1, dtype=np.int64)
    child_idx: List[int] = []
    edge_weight: List[float] = []
    rows: Dict[int, List[np.ndarray]] = {v: [] for v in range(len(variables))}
    scopes: List[frozenset] = []

    for new, old in enumerate(order):
        spec = specs[old]
        kinds[new] = _KIND_CODES[spec.kind]
        if spec.kind == NodeKind.INPUT:
            var = spec.var
            dist = _check_prob_vector(spec.dist, f"input distribution of node {old}", renormalize)
            if len(dist) != cards[var]:
                raise CircuitError(f"input node {old} has {len(dist)} categories, variable {var} has {cards[var]}")
            var_of[new] = var
            rows[var].append(dist)
            scopes.append(frozenset((var,)))
        else:
            kids = [new_id[c] for c in spec.children]
            child_idx.extend(kids)
            if spec.kind == NodeKind.SUM:
                edge_weight.extend(_check_prob_vector(spec.weights, f"weights of sum node {old}", renormalize))
            else:
                edge_weight.extend([1.0] * len(kids))
            scopes.append(frozenset().union(*(scopes[k] for k in kids)))
        child_ptr[new + 1] = len(child_idx)

    missing = set(range(len(variables))) - scopes[-1]
    if missing:
        raise CircuitError(f"root scope misses variables {sorted(missing)}")

    tables = [np.array(rows[v]) if rows[v] else np.zeros((0, cards[v])) for v in range(len(variables))]
    circuit = Circuit(variables, kinds, var_of, child_ptr, np.asarray(child_idx, dtype=np.int64),
                      np.asarray(edge_weight, dtype=np.float64), tables, scopes)
    logger.debug("Built %r", circuit)
    return circuit


def _resolve_variables(specs: Sequence[NodeSpec], variables) -> List[Variable]:
    inferred: Dict[int, int] = {}
    for i, spec in enumerate(specs):
        if spec.kind != NodeKind.INPUT:
            continue
        if spec.var < 0:
            raise CircuitError(f"input node {i} references negative variable {spec.var}")
        card = len(spec.dist)
        if inferred.setdefault(spec.var, card) != card:
            raise CircuitError(f"input nodes disagree on the cardinality of variable {spec.var}")
    if variables is None:
        n_vars = max(inferred) + 1 if inferred else 0
        gaps = sorted(set(range(n_vars)) - set(inferred))
        if gaps:
            raise CircuitError(f"variables {gaps} have no input node")
        return [Variable(v, inferred[v], f"X{v}") for v in range(n_vars)]
    resolved = [v if isinstance(v, Variable) else Variable(i, int(v), f"X{i}") for i, v in enumerate(variables)]
    for i, v in enumerate(resolved):
        if v.index != i:
            raise CircuitError(f"variable indices must be dense, position {i} holds index {v.index}")
    unknown = sorted(v for v in inferred if v >= len(resolved))
    if unknown:
        raise CircuitError(f"input nodes reference unknown variables {unknown}")
    return resolved


def check_structure(c: Circuit) -> StructureReport:
    """Report smoothness and decomposability violations per node"""
    violations: List[Tuple[int, str]] = []
    smooth = decomposable = True
    for node in range(c.n_nodes):
        code = c.kinds[node]
        if code == KIND_INPUT:
            continue
        child_scopes = [c.scopes[k] for k in c.children(node)]
        if code == KIND_PRODUCT:
            seen: set = set()
            overlap: set = set()
            for scope in child_scopes:
                overlap |= seen & scope
                seen |= scope
            if overlap:
                decomposable = False
                violations.append((node, f"decomposability: children overlap on variables {sorted(overlap)}"))
        elif any(scope != child_scopes[0] for scope in child_scopes):
            smooth = False
            violations.append((node, "smoothness: children scopes differ"))
    return StructureReport(smooth=smooth, decomposable=decomposable, violations=violations)


# .pcirc text format

def serialize(c: Circuit) -> bytes:
    """Line-oriented text with shortest round-trip decimals"""
    lines = [f"{FORMAT_MAGIC} v{FORMAT_VERSION}",
             f"variables {c.n_vars}",
             " ".join(str(v.cardinality) for v in c.variables),
             f"nodes {c.n_nodes}"]
    for node in range(c.n_nodes):
        code = c.kinds[node]
        if code == KIND_INPUT:
            params = " ".join(repr(float(p)) for p in c.dist(node))
            lines.append(f"{node} input {c.var_of[node]} {params}")
        else:
            kids = c.children(node)
            head = f"{node} {_CODE_KINDS[int(code)].value} {len(kids)} " + " ".join(str(k) for k in kids)
            if code == KIND_SUM:
                head += " " + " ".join(repr(float(w)) for w in c.weights(node))
            lines.append(head)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8")


def deserialize(data: bytes) -> Circuit:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CircuitFormatError(f"circuit stream is not UTF-8 text: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise CircuitFormatError("empty circuit stream")

    header = lines[0].split()
    if len(header) != 2 or header[0] != FORMAT_MAGIC or not header[1].startswith("v"):
        raise CircuitFormatError(f"bad magic line {lines[0]!r}")
    if header[1] != f"v{FORMAT_VERSION}":
        raise CircuitVersionError(f"unsupported circuit format {header[1]}, expected v{FORMAT_VERSION}")

    try:
        n_vars = _header_count(lines, 1, "variables")
        cards = [int(tok) for tok in lines[2].split()] if n_vars else []
        if len(cards) != n_vars:
            raise CircuitFormatError(f"variable table lists {len(cards)} cardinalities, header says {n_vars}")
        n_nodes = _header_count(lines, 3, "nodes")
        if len(lines) < 4 + n_nodes + 1:
            raise CircuitFormatError(f"truncated stream: expected {n_nodes} node lines and an end marker")
        specs = [_parse_node(lines[4 + i], i) for i in range(n_nodes)]
        if lines[4 + n_nodes].strip() != "end":
            raise CircuitFormatError("missing end marker")
    except (ValueError, IndexError) as exc:
        raise CircuitFormatError(f"malformed circuit stream: {exc}") from exc

    return build_circuit(specs, variables=cards, renormalize=False)


def _header_count(lines: List[str], index: int, keyword: str) -> int:
    parts = lines[index].split()
    if len(parts) != 2 or parts[0] != keyword:
        raise CircuitFormatError(f"expected '{keyword} <count>' on line {index + 1}")
    return int(parts[1])


def _parse_node(line: str, expected_id: int) -> NodeSpec:
    parts = line.split()
    if len(parts) < 3 or int(parts[0]) != expected_id:
        raise CircuitFormatError(f"bad node line for node {expected_id}: {line!r}")
    tag = parts[1]
    if tag == "input":
        return NodeSpec.input(int(parts[2]), [float(p) for p in parts[3:]])
    if tag in ("sum", "product"):
        k = int(parts[2])
        kids = [int(c) for c in parts[3:3 + k]]
        rest = parts[3 + k:]
        if len(kids) != k:
            raise CircuitFormatError(f"node {expected_id} lists fewer than {k} children")
        if tag == "product":
            if rest:
                raise CircuitFormatError(f"product node {expected_id} has trailing fields")
            return NodeSpec.product(kids)
        if len(rest) != k:
            raise CircuitFormatError(f"sum node {expected_id} needs {k} weights, found {len(rest)}")
        return NodeSpec.sum(kids, [float(w) for w in rest])
    raise CircuitFormatError(f"unknown node kind tag {tag!r} on node {expected_id}")


def save_circuit(c: Circuit, path: str):
    with open(path, "wb") as f:
        f.write(serialize(c))
    logger.info("Saved %r to %s", c, path)


def load_circuit(path: str) -> Circuit:
    with open(path, "rb") as f:
        return deserialize(f.read())


# Fixture constructors

def build_naive_bayes(class_prior: float, feature_params: Sequence[Tuple[float, float]]) -> Circuit:
    """p(y)·Πp(x_i|y) as a 2-component mixture

    Variable 0 is the class Y, variables 1..k the features; category 1 means True.
    feature_params[i] = (p(x_i=T | y=T), p(x_i=T | y=F)).
    """
    probs = [class_prior] + [p for pair in feature_params for p in pair]
    for p in probs:
        if not 0.0 <= p <= 1.0 or math.isnan(p):
            raise CircuitError(f"probability {p!r} out of range [0, 1]")
    specs = [NodeSpec.input(0, (0.0, 1.0)), NodeSpec.input(0, (1.0, 0.0))]
    true_branch, false_branch = [0], [1]
    for i, (p_true, p_false) in enumerate(feature_params, start=1):
        specs.append(NodeSpec.input(i, (1.0 - p_true, p_true)))
        true_branch.append(len(specs) - 1)
        specs.append(NodeSpec.input(i, (1.0 - p_false, p_false)))
        false_branch.append(len(specs) - 1)
    specs.append(NodeSpec.product(true_branch))
    specs.append(NodeSpec.product(false_branch))
    n = len(specs)
    specs.append(NodeSpec.sum((n - 2, n - 1), (class_prior, 1.0 - class_prior)))
    return build_circuit(specs)


def partition_naive_bayes(numbers: Sequence[int]) -> Circuit:
    """Naive Bayes whose class posterior encodes a signed sum of the given integers

    p(y=T | x) = sigmoid(sum of n_i over features observed False
                         - sum of n_i over features observed True)
    """
    params = []
    for n in numbers:
        if n <= 0:
            raise CircuitError(f"partition numbers must be positive, got {n}")
        p_true = (1.0 - math.exp(-n)) / (math.exp(n) - math.exp(-n))
        params.append((p_true, math.exp(n) * p_true))
    return build_naive_bayes(0.5, params)


def random_circuit(n_vars: int, seed: int, width: int = 2, max_card: int = 2) -> Circuit:
    """Random smooth decomposable DAG circuit with shared sub-circuits

    Every region of variables is represented by `width` nodes of equal scope;
    a split region mixes all pairings of its two halves' nodes, so product
    nodes share children.
    """
    if n_vars < 1:
        raise CircuitError("random circuit needs at least one variable")
    rng = np.random.Generator(np.random.Philox(seed))
    cards = [int(rng.integers(2, max_card + 1)) for _ in range(n_vars)]
    specs: List[NodeSpec] = []

    def add(spec: NodeSpec) -> int:
        specs.append(spec)
        return len(specs) - 1

    def region(scope: List[int]) -> List[int]:
        if len(scope) == 1:
            var = scope[0]
            leaves = [add(NodeSpec.input(var, rng.dirichlet(np.ones(cards[var])))) for _ in range(width)]
            if rng.random() < 0.5:
                return leaves
            return [add(NodeSpec.sum(leaves, rng.dirichlet(np.ones(width)))) for _ in range(width)]
        perm = [int(v) for v in rng.permutation(scope)]
        cut = int(rng.integers(1, len(perm)))
        left, right = region(sorted(perm[:cut])), region(sorted(perm[cut:]))
        products = [add(NodeSpec.product((a, b))) for a in left for b in right]
        return [add(NodeSpec.sum(products, rng.dirichlet(np.ones(len(products))))) for _ in range(width)]

    top = region(list(range(n_vars)))
    add(NodeSpec.sum(top, rng.dirichlet(np.ones(len(top)))))
    return build_circuit(specs, variables=cards)
