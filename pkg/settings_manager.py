#!/usr/bin/env python3
"""
Trifle Settings Manager (Simple JSON)
"""
import copy
import json
import logging
import os
from typing import Any, Dict, Optional

from models import TrifleError

logger = logging.getLogger(__name__)


class SettingsError(TrifleError):
    """Unreadable or invalid configuration file"""


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class SettingsManager:
    """Layered run configuration: built-in defaults plus an optional JSON override"""

    DEFAULTS = {
        "taxi": {
            "rows": 5,
            "cols": 5,
            "slip": 0.3,
            "max_steps": 300,
            "step_reward": -1.0,
            "delivery_reward": 20.0,
            "wall_penalty": -4.0,
            "boundary_penalty": -5.0,
            "illegal_penalty": -10.0,
        },
        "lake": {
            "size": 4,
            "p": 1.0 / 3.0,
            "max_steps": 100,
        },
        "qlearning": {
            "taxi": {"episodes": 40000, "alpha": 0.3, "gamma": 0.99,
                     "epsilon_start": 1.0, "epsilon_end": 0.05, "decay_fraction": 0.5},
            "lake": {"episodes": 20000, "alpha": 0.05, "gamma": 0.99,
                     "epsilon_start": 1.0, "epsilon_end": 0.05, "decay_fraction": 0.6},
        },
        "collection": {
            "taxi_trajectories": 1000,
            "taxi_epsilon": 0.5,
            "max_rollouts_factor": 20,
            "greedy_episodes": 1000,
            "lake_trajectories": 1000,
            "lake_epsilons": [0.3, 0.5, 0.7],
        },
        "data": {
            "gamma": 1.0,
            "context": 7,
            "n_bins": 100,
            "binning": {"taxi": "exact", "lake": "exact"},
            "tail_pad": 3,
        },
        "em": {
            "epochs": 100,
            "pseudocount": 0.1,
            "hidden_size": 16,
            "tol": 1e-6,
            "chunk_size": 2048,
            "heldout_fraction": 0.1,
        },
        "planner": {
            "beam_width": 8,
            "horizon": 3,
            "scaling_ratio": 2,
            "delta": 0.2,
            "lookahead": 2,
            "gamma": 1.0,
            "mc_samples": 1,
            "future_actions": "marginalize",
            "convolve_bins": 101,
        },
        "eval": {
            "episodes": 1000,
            "workers": 1,
            "progress_every": 100,
            "diagnose_episodes": 200,
            "oracle_circuits": 200,
        },
    }

    def __init__(self, path: Optional[str] = None):
        self.settings_path = path
        self.settings = copy.deepcopy(self.DEFAULTS)
        if path:
            self.load()

    def load(self):
        """Deep-merge the JSON file at settings_path over the defaults"""
        if not os.path.exists(self.settings_path):
            raise SettingsError(f"config file not found: {self.settings_path}")
        try:
            with open(self.settings_path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except json.JSONDecodeError as exc:
            raise SettingsError(f"config file {self.settings_path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise SettingsError(f"config file {self.settings_path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(self.DEFAULTS))
        if unknown:
            logger.warning("Ignoring unknown config sections: %s", ", ".join(unknown))
        self.settings = _deep_merge(self.settings, {k: v for k, v in loaded.items() if k in self.DEFAULTS})
        logger.info("Loaded config from %s", self.settings_path)

    def save(self, path: str):
        """Write the effective settings"""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.settings, f, indent=2, sort_keys=True)

    def get(self, section: str, key: str, default=None):
        return self.settings.get(section, {}).get(key, default)

    def set(self, section: str, key: str, value):
        self.settings.setdefault(section, {})[key] = value

    def section(self, name: str) -> Dict[str, Any]:
        if name not in self.settings:
            raise SettingsError(f"unknown config section '{name}'")
        return copy.deepcopy(self.settings[name])

    def snapshot(self) -> Dict[str, Any]:
        return copy.deepcopy(self.settings)

    # Typed views. Imports stay local so the config layer loads without the numeric stack.

    def taxi_config(self):
        from stochastic_envs import TaxiConfig
        return TaxiConfig.from_dict(self.section("taxi"))

    def lake_config(self):
        from stochastic_envs import LakeConfig
        return LakeConfig.from_dict(self.section("lake"))

    def qlearning_config(self, env_name: str, seed: int = 0):
        from stochastic_envs import QLearningConfig
        params = self.section("qlearning").get(env_name)
        if params is None:
            raise SettingsError(f"no qlearning settings for env '{env_name}'")
        return QLearningConfig.from_dict({**params, "seed": seed})

    def em_config(self, seed: int = 0, workers: int = 1):
        from circuit_learning import EMConfig
        return EMConfig.from_dict({**self.section("em"), "seed": seed, "workers": workers})

    def planner_config(self, **overrides):
        from trifle_planner import PlannerConfig
        params = self.section("planner")
        params["context"] = self.get("data", "context")
        params.update({k: v for k, v in overrides.items() if v is not None})
        return PlannerConfig.from_dict(params)
