#!/usr/bin/env python3
"""
Trifle Stochastic Environments
Seeded slippery Taxi and FrozenLake, tabular Q-learning and offline data collection
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from typing import Callable, Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from models import RawTrajectory, TrifleError

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

# Taxi actions
SOUTH, NORTH, EAST, WEST, PICKUP, DROPOFF = range(6)
TAXI_MOVES = {SOUTH: (1, 0), NORTH: (-1, 0), EAST: (0, 1), WEST: (0, -1)}

# FrozenLake actions
LEFT, DOWN, RIGHT, UP = range(4)
LAKE_MOVES = {LEFT: (0, -1), DOWN: (1, 0), RIGHT: (0, 1), UP: (-1, 0)}

CLASSIC_WALLS = (
    ((0, 1), (0, 2)), ((1, 1), (1, 2)),
    ((3, 0), (3, 1)), ((4, 0), (4, 1)),
    ((3, 2), (3, 3)), ((4, 2), (4, 3)),
)

LAKE_MAPS = {
    4: ("SFFF", "FHFH", "FFFH", "HFFG"),
    8: ("SFFFFFFF", "FFFFFFFF", "FFFHFFFF", "FFFFFHFF",
        "FFFHFFFF", "FHHFFFHF", "FHFFHFHF", "FFFHFFFG"),
}


class EnvError(TrifleError):
    """Invalid environment configuration or step"""


class CollectionError(EnvError):
    """Dataset collection ran out of rollout budget"""


def make_rng(seed: int, stream: Optional[int] = None) -> np.random.Generator:
    """Philox counter-based generator; `stream` selects an independent substream"""
    if stream is None:
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))


def episode_seed(base: int, index: int) -> int:
    return int(base) ^ int(index)


# Taxi

@dataclass(frozen=True)
class TaxiConfig:
    rows: int = 5
    cols: int = 5
    walls: Tuple[Tuple[Cell, Cell], ...] = CLASSIC_WALLS
    slip: float = 0.3
    max_steps: int = 300
    step_reward: float = -1.0
    delivery_reward: float = 20.0
    wall_penalty: float = -4.0
    boundary_penalty: float = -5.0
    illegal_penalty: float = -10.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise EnvError("taxi grid needs at least two cells")
        if not 0.0 <= self.slip < 1.0:
            raise EnvError(f"slip must lie in [0, 1), got {self.slip}")
        if self.max_steps < 1:
            raise EnvError("max_steps must be positive")
        rewards = (self.step_reward, self.delivery_reward, self.wall_penalty,
                   self.boundary_penalty, self.illegal_penalty)
        if not all(math.isfinite(r) for r in rewards):
            raise EnvError("taxi rewards must be finite")
        for a, b in self.walls:
            if not (self._inside(a) and self._inside(b)) or abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
                raise EnvError(f"wall {a}|{b} does not separate adjacent cells")

    def _inside(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.rows and 0 <= cell[1] < self.cols

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @cached_property
    def wall_set(self) -> FrozenSet[FrozenSet[Cell]]:
        return frozenset(frozenset((tuple(a), tuple(b))) for a, b in self.walls)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["walls"] = [[list(a), list(b)] for a, b in self.walls]
        return data

    @classmethod
    def from_dict(cls, data: dict):
        known = {f.name for f in fields(cls)}
        params = {k: v for k, v in data.items() if k in known}
        if "walls" in params:
            params["walls"] = tuple((tuple(a), tuple(b)) for a, b in params["walls"])
        return cls(**params)


@dataclass(frozen=True)
class TaxiState:
    """passenger None means the passenger rides in the taxi"""
    taxi: Cell
    passenger: Optional[Cell]
    destination: Cell
    steps: int = 0
    event: str = "reset"
    slipped: bool = False
    delivered: bool = False
    done: bool = False


def taxi_reset(cfg: TaxiConfig, seed) -> TaxiState:
    """Uniform taxi and passenger cells, destination uniform over the other cells"""
    rng = make_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    n = cfg.n_cells
    taxi = int(rng.integers(n))
    passenger = int(rng.integers(n))
    destination = int(rng.integers(n - 1))
    if destination >= passenger:
        destination += 1
    as_cell = lambda i: divmod(i, cfg.cols)
    return TaxiState(as_cell(taxi), as_cell(passenger), as_cell(destination))


def taxi_step(s: TaxiState, a: int, cfg: TaxiConfig, rng: np.random.Generator) -> Tuple[TaxiState, float, bool]:
    """One transition; every step pays step_reward plus at most one extra component"""
    if not 0 <= a < 6:
        raise EnvError(f"taxi action {a} out of range 0..5")
    if s.done:
        raise EnvError("taxi episode already finished")
    reward = cfg.step_reward
    taxi, passenger, delivered, slipped = s.taxi, s.passenger, False, False
    event = "move"
    if a in TAXI_MOVES:
        direction = a
        if cfg.slip > 0 and rng.random() < cfg.slip:
            others = [d for d in TAXI_MOVES if d != a]
            direction = others[int(rng.integers(len(others)))]
            slipped = True
        dr, dc = TAXI_MOVES[direction]
        target = (taxi[0] + dr, taxi[1] + dc)
        if not cfg._inside(target):
            event, reward = "boundary", reward + cfg.boundary_penalty
        elif frozenset((taxi, target)) in cfg.wall_set:
            event, reward = "wall", reward + cfg.wall_penalty
        else:
            taxi = target
    elif a == PICKUP:
        if passenger is not None and passenger == taxi:
            passenger, event = None, "pickup"
        else:
            event, reward = "illegal", reward + cfg.illegal_penalty
    else:
        if passenger is None and taxi == s.destination:
            delivered, event, reward = True, "delivery", reward + cfg.delivery_reward
        else:
            event, reward = "illegal", reward + cfg.illegal_penalty
    steps = s.steps + 1
    done = delivered or steps >= cfg.max_steps
    return TaxiState(taxi, passenger, s.destination, steps, event, slipped, delivered, done), reward, done


def encode_taxi(s: TaxiState, cfg: TaxiConfig) -> int:
    """(taxi cell, passenger location or InTaxi, destination) in mixed radix"""
    n = cfg.n_cells
    cell = lambda c: c[0] * cfg.cols + c[1]
    pass_loc = n if s.passenger is None else cell(s.passenger)
    return (cell(s.taxi) * (n + 1) + pass_loc) * n + cell(s.destination)


# FrozenLake

@dataclass(frozen=True)
class LakeConfig:
    grid: Tuple[str, ...] = LAKE_MAPS[4]
    p: float = 1.0 / 3.0
    max_steps: int = 100

    def __post_init__(self):
        if not self.grid or len({len(row) for row in self.grid}) != 1:
            raise EnvError("lake map must be a non-empty rectangle")
        tiles = "".join(self.grid)
        if set(tiles) - set("SFHG"):
            raise EnvError(f"lake map holds unknown tiles {sorted(set(tiles) - set('SFHG'))}")
        if tiles.count("S") != 1 or tiles.count("G") < 1:
            raise EnvError("lake map needs exactly one start and at least one goal")
        if not 0.0 < self.p <= 1.0:
            raise EnvError(f"p must lie in (0, 1], got {self.p}")
        if self.max_steps < 1:
            raise EnvError("max_steps must be positive")

    @property
    def rows(self) -> int:
        return len(self.grid)

    @property
    def cols(self) -> int:
        return len(self.grid[0])

    @property
    def start(self) -> Cell:
        flat = "".join(self.grid).index("S")
        return divmod(flat, self.cols)

    def tile(self, cell: Cell) -> str:
        return self.grid[cell[0]][cell[1]]

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "p": self.p, "max_steps": self.max_steps}

    @classmethod
    def from_dict(cls, data: dict):
        params = {k: data[k] for k in ("p", "max_steps") if k in data}
        if "grid" in data:
            params["grid"] = tuple(data["grid"])
        elif "size" in data:
            if int(data["size"]) not in LAKE_MAPS:
                raise EnvError(f"no built-in lake map of size {data['size']}")
            params["grid"] = LAKE_MAPS[int(data["size"])]
        return cls(**params)


@dataclass(frozen=True)
class LakeState:
    cell: Cell
    steps: int = 0
    event: str = "reset"
    slipped: bool = False
    done: bool = False


def lake_reset(cfg: LakeConfig) -> LakeState:
    return LakeState(cfg.start)


def lake_step(s: LakeState, a: int, cfg: LakeConfig, rng: np.random.Generator) -> Tuple[LakeState, float, bool]:
    """Intended move with probability p, each perpendicular with 0.5(1 − p)"""
    if not 0 <= a < 4:
        raise EnvError(f"lake action {a} out of range 0..3")
    if s.done:
        raise EnvError("lake episode already finished")
    u = rng.random()
    if u < cfg.p:
        direction = a
    elif u < cfg.p + 0.5 * (1.0 - cfg.p):
        direction = (a - 1) % 4
    else:
        direction = (a + 1) % 4
    dr, dc = LAKE_MOVES[direction]
    cell = (min(max(s.cell[0] + dr, 0), cfg.rows - 1), min(max(s.cell[1] + dc, 0), cfg.cols - 1))
    tile = cfg.tile(cell)
    event = {"G": "goal", "H": "hole"}.get(tile, "move")
    reward = 1.0 if tile == "G" else 0.0
    steps = s.steps + 1
    done = tile in "HG" or steps >= cfg.max_steps
    return LakeState(cell, steps, event, direction != a, done), reward, done


# Environment objects

class TaxiEnv:
    """Taxi with an owned generator and tabular state ids"""

    n_actions = 6

    def __init__(self, cfg: Optional[TaxiConfig] = None):
        self.cfg = cfg or TaxiConfig()
        self.state: Optional[TaxiState] = None
        self.rng: Optional[np.random.Generator] = None

    @property
    def n_states(self) -> int:
        n = self.cfg.n_cells
        return n * (n + 1) * n

    @property
    def state_cards(self) -> Tuple[int, ...]:
        n = self.cfg.n_cells
        return (n, n + 1, n)

    @property
    def action_cards(self) -> Tuple[int, ...]:
        return (self.n_actions,)

    def reset(self, seed: int) -> int:
        self.rng = make_rng(seed)
        self.state = taxi_reset(self.cfg, self.rng)
        return self.state_id

    def step(self, a: int) -> Tuple[int, float, bool]:
        if self.state is None:
            raise EnvError("reset the environment before stepping")
        self.state, reward, done = taxi_step(self.state, int(a), self.cfg, self.rng)
        return self.state_id, reward, done

    def encode_state(self, s: TaxiState) -> int:
        return encode_taxi(s, self.cfg)

    @property
    def state_id(self) -> int:
        return encode_taxi(self.state, self.cfg)

    @property
    def event(self) -> str:
        return self.state.event

    @property
    def success(self) -> bool:
        return self.state.delivered

    @property
    def terminated(self) -> bool:
        """Episode ended by delivery rather than by the step limit"""
        return self.state.delivered


class LakeEnv:
    """FrozenLake with an owned generator; state id is the flat cell index"""

    n_actions = 4

    def __init__(self, cfg: Optional[LakeConfig] = None):
        self.cfg = cfg or LakeConfig()
        self.state: Optional[LakeState] = None
        self.rng: Optional[np.random.Generator] = None

    @property
    def n_states(self) -> int:
        return self.cfg.rows * self.cfg.cols

    @property
    def state_cards(self) -> Tuple[int, ...]:
        return (self.n_states,)

    @property
    def action_cards(self) -> Tuple[int, ...]:
        return (self.n_actions,)

    def reset(self, seed: int) -> int:
        self.rng = make_rng(seed)
        self.state = lake_reset(self.cfg)
        return self.state_id

    def step(self, a: int) -> Tuple[int, float, bool]:
        if self.state is None:
            raise EnvError("reset the environment before stepping")
        self.state, reward, done = lake_step(self.state, int(a), self.cfg, self.rng)
        return self.state_id, reward, done

    def encode_state(self, s: LakeState) -> int:
        return s.cell[0] * self.cfg.cols + s.cell[1]

    @property
    def state_id(self) -> int:
        return self.encode_state(self.state)

    @property
    def event(self) -> str:
        return self.state.event

    @property
    def success(self) -> bool:
        return self.cfg.tile(self.state.cell) == "G"

    @property
    def terminated(self) -> bool:
        return self.cfg.tile(self.state.cell) in "HG"


def make_env(name: str, cfg=None):
    if name == "taxi":
        return TaxiEnv(cfg)
    if name == "lake":
        return LakeEnv(cfg)
    raise EnvError(f"unknown environment '{name}'")


# Q-learning

@dataclass(frozen=True)
class QLearningConfig:
    episodes: int = 20000
    alpha: float = 0.1
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    decay_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0:
            raise EnvError("episodes must be nonnegative")
        if not 0.0 < self.alpha <= 1.0:
            raise EnvError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise EnvError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not (0.0 <= self.epsilon_end <= 1.0 and 0.0 <= self.epsilon_start <= 1.0):
            raise EnvError("epsilon schedule must stay within [0, 1]")

    def epsilon(self, episode: int) -> float:
        """Linear decay over the first decay_fraction of the episodes"""
        horizon = max(self.decay_fraction * self.episodes, 1.0)
        frac = min(episode / horizon, 1.0)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class QTable:
    values: np.ndarray
    params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise EnvError("Q-table holds non-finite entries")

    def greedy(self, state: int) -> int:
        return int(np.argmax(self.values[state]))

    def save(self, path: str):
        with open(path, "wb") as f:
            np.savez(f, values=self.values, params=np.array(json.dumps(self.params, sort_keys=True)))

    @classmethod
    def load(cls, path: str) -> "QTable":
        with np.load(path) as data:
            return cls(data["values"], json.loads(str(data["params"])))


def q_learning(env, cfg: QLearningConfig) -> QTable:
    """One-step Q-learning with a linearly decaying ε-greedy behaviour policy

    Truncation at the step limit bootstraps; true termination does not.
    """
    rng = make_rng(cfg.seed, stream=1)
    q = np.zeros((env.n_states, env.n_actions))
    for ep in range(cfg.episodes):
        eps = cfg.epsilon(ep)
        state = env.reset(episode_seed(cfg.seed, ep))
        done = False
        while not done:
            if rng.random() < eps:
                action = int(rng.integers(env.n_actions))
            else:
                action = int(np.argmax(q[state]))
            nxt, reward, done = env.step(action)
            target = reward if env.terminated else reward + cfg.gamma * q[nxt].max()
            q[state, action] += cfg.alpha * (target - q[state, action])
            state = nxt
        if (ep + 1) % 10000 == 0:
            logger.info("Q-learning episode %d/%d (epsilon %.3f)", ep + 1, cfg.episodes, eps)
    return QTable(q, cfg.to_dict())


# Rollouts and collection

def rollout(env, policy: Callable[[int], int], seed: int) -> RawTrajectory:
    state = env.reset(seed)
    states, actions, rewards = [], [], []
    done = False
    while not done:
        action = int(policy(state))
        nxt, reward, done = env.step(action)
        states.append(state)
        actions.append(action)
        rewards.append(reward)
        state = nxt
    return RawTrajectory(states, actions, rewards, terminal=env.terminated)


def epsilon_greedy(qtable: QTable, epsilon: float, n_actions: int, rng: np.random.Generator) -> Callable[[int], int]:
    def policy(state: int) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(n_actions))
        return qtable.greedy(state)
    return policy


@dataclass
class GreedyStats:
    success_rate: float
    mean_return: float


def evaluate_greedy(qtable: QTable, env, episodes: int, seed: int) -> GreedyStats:
    successes, returns = 0, []
    for i in range(episodes):
        traj = rollout(env, qtable.greedy, episode_seed(seed, i))
        successes += int(env.success)
        returns.append(traj.total_return)
    if not episodes:
        return GreedyStats(0.0, 0.0)
    return GreedyStats(successes / episodes, float(np.mean(returns)))


def collect_taxi_dataset(qtable: QTable, env: TaxiEnv, n: int = 1000, seed: int = 0, epsilon: float = 0.1,
                         max_rollouts: Optional[int] = None) -> List[RawTrajectory]:
    """First n successful-delivery episodes of the ε-greedy Q policy"""
    rng = make_rng(seed, stream=2)
    policy = epsilon_greedy(qtable, epsilon, env.n_actions, rng)
    budget = max_rollouts if max_rollouts is not None else 20 * n
    kept: List[RawTrajectory] = []
    attempts = 0
    while len(kept) < n:
        if attempts >= budget:
            raise CollectionError(f"collected only {len(kept)} of {n} successful episodes in {budget} rollouts")
        traj = rollout(env, policy, episode_seed(seed, attempts))
        attempts += 1
        if env.success:
            kept.append(traj)
    logger.info("Kept %d successful taxi episodes out of %d rollouts (mean return %.2f)",
                len(kept), attempts, np.mean([t.total_return for t in kept]) if kept else float("nan"))
    return kept


def collect_lake_dataset(qtable: QTable, env: LakeEnv, epsilon: float, n: int, seed: int) -> List[RawTrajectory]:
    """n ε-greedy episodes, no success filtering"""
    rng = make_rng(seed, stream=2)
    policy = epsilon_greedy(qtable, epsilon, env.n_actions, rng)
    trajectories = [rollout(env, policy, episode_seed(seed, i)) for i in range(n)]
    logger.info("Collected %d lake episodes at epsilon %.2f (mean return %.3f)",
                n, epsilon, np.mean([t.total_return for t in trajectories]) if trajectories else float("nan"))
    return trajectories
