"""Shared fixtures and brute-force oracles"""
import itertools
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pytest

from circuit_core import Circuit, NodeSpec, build_circuit, build_naive_bayes, random_circuit
from models import NodeKind, RawTrajectory
from trajectory_data import WindowLayout
from trifle_planner import ValueMaps


def node_probability(c: Circuit, assignment: Sequence[int]) -> float:
    """Evaluate the circuit bottom-up on one full assignment, node by node"""
    values = np.zeros(c.n_nodes)
    for n in range(c.n_nodes):
        kind = c.kind(n)
        if kind is NodeKind.INPUT:
            values[n] = c.dist(n)[assignment[c.var_of[n]]]
        elif kind is NodeKind.SUM:
            values[n] = c.weights(n) @ values[c.children(n)]
        else:
            values[n] = np.prod(values[c.children(n)])
    return float(values[c.root])


def brute_joint(c: Circuit) -> Tuple[np.ndarray, np.ndarray]:
    tokens = np.array(list(itertools.product(*[range(int(k)) for k in c.cards])), dtype=np.int64)
    return tokens, np.array([node_probability(c, row) for row in tokens])


def brute_mask(tokens: np.ndarray, observed: Dict[int, int]) -> np.ndarray:
    match = np.ones(len(tokens), dtype=bool)
    for var, cat in observed.items():
        match &= tokens[:, var] == cat
    return match


def brute_posterior(tokens: np.ndarray, joint: np.ndarray, observed: Dict[int, int], target: int,
                    card: int) -> np.ndarray:
    match = brute_mask(tokens, observed)
    counts = np.bincount(tokens[match, target], weights=joint[match], minlength=card)
    return counts / counts.sum()


def mixture_circuit(cards: Sequence[int], components: List[Tuple[float, Dict[int, Sequence[float]]]]) -> Circuit:
    """Mixture of fully factorized components; unlisted variables are uniform"""
    specs: List[NodeSpec] = []
    products = []
    for _, dists in components:
        leaves = []
        for var, card in enumerate(cards):
            dist = dists.get(var, np.full(card, 1.0 / card))
            specs.append(NodeSpec.input(var, dist))
            leaves.append(len(specs) - 1)
        specs.append(NodeSpec.product(leaves))
        products.append(len(specs) - 1)
    specs.append(NodeSpec.sum(products, [w for w, _ in components]))
    return build_circuit(specs, variables=list(cards))


def onehot(card: int, index: int) -> np.ndarray:
    out = np.zeros(card)
    out[index] = 1.0
    return out


def mixture_posterior(components, observed: Dict[int, int]) -> np.ndarray:
    """Posterior over mixture components given observed categories"""
    weights = np.array([w * np.prod([d[v][c] if v in d else 1.0 for v, c in observed.items()])
                        for w, d in components])
    return weights / weights.sum()


def component_mean(dists: Dict[int, Sequence[float]], var: int, values: np.ndarray) -> float:
    dist = np.asarray(dists.get(var, np.full(len(values), 1.0 / len(values))))
    return float(dist @ values)


@pytest.fixture
def nb_circuit() -> Circuit:
    return build_naive_bayes(0.3, [(0.8, 0.1), (0.6, 0.3), (0.2, 0.7)])


@pytest.fixture
def random_circuits() -> List[Circuit]:
    return [random_circuit(n_vars, seed=seed, width=2, max_card=3)
            for seed, n_vars in enumerate([2, 3, 4, 5, 6])]


# Planner toys: two-step window, binary state/action, two reward bins, three RTG bins.
# Per step the variables are s, a, r, rtg; every variable carries PAD as its last category.

TOY_LAYOUT = WindowLayout(context=2, state_cards=(2,), action_cards=(2,), reward_card=2, rtg_card=3)
TOY_MAPS = ValueMaps(reward=np.array([0.0, 1.0, 0.0]), rtg=np.array([0.0, 1.0, 2.0, 0.0]))


@pytest.fixture
def toy_layout() -> WindowLayout:
    return TOY_LAYOUT


@pytest.fixture
def toy_maps() -> ValueMaps:
    return TOY_MAPS


def bandit_components(p_good: float = 0.1):
    """Action 0 always earns the top RTG bin, action 1 the bottom one"""
    s0, a0, rtg0 = TOY_LAYOUT.state_vars(0)[0], TOY_LAYOUT.action_vars(0)[0], TOY_LAYOUT.rtg_var(0)
    return [
        (p_good, {s0: onehot(3, 0), a0: onehot(3, 0), rtg0: onehot(4, 2)}),
        (1.0 - p_good, {s0: onehot(3, 0), a0: onehot(3, 1), rtg0: onehot(4, 0)}),
    ]


@pytest.fixture
def bandit_circuit() -> Circuit:
    return mixture_circuit(list(TOY_LAYOUT.cards()), bandit_components())


def chain_components():
    """Stochastic two-step chain: a_0 drives s_1, s_1 drives r_1 and RTG_1

    p(a_0=0)=0.5; s_1 = a_0 with probability 0.7; r_0 ~ (0.5, 0.5);
    s_1=0 pays r_1=0 and RTG_1 in bin 0, s_1=1 pays r_1=1 and RTG_1 in bin 2.
    """
    lay = TOY_LAYOUT
    s0, a0, r0 = lay.state_vars(0)[0], lay.action_vars(0)[0], lay.reward_var(0)
    s1, r1, rtg1 = lay.state_vars(1)[0], lay.reward_var(1), lay.rtg_var(1)
    components = []
    for a in (0, 1):
        for s in (0, 1):
            weight = 0.5 * (0.7 if s == a else 0.3)
            components.append((weight, {
                s0: onehot(3, 0), a0: onehot(3, a), r0: [0.5, 0.5, 0.0],
                s1: onehot(3, s), r1: onehot(3, s), rtg1: onehot(4, 2 * s),
            }))
    return components


@pytest.fixture
def chain_circuit() -> Circuit:
    return mixture_circuit(list(TOY_LAYOUT.cards()), chain_components())


@pytest.fixture
def tiny_trajectories() -> List[RawTrajectory]:
    return [
        RawTrajectory([0, 1, 2], [1, 0, 1], [-1.0, -1.0, 19.0]),
        RawTrajectory([3, 2], [0, 1], [-1.0, 19.0]),
        RawTrajectory([1, 1, 0, 2], [1, 1, 0, 0], [-1.0, -5.0, -1.0, 19.0]),
    ]
