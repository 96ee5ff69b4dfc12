import json

import pytest

from settings_manager import SettingsError, SettingsManager


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data) if not isinstance(data, str) else data, encoding="utf-8")
    return str(path)


class TestSettingsManager:

    def test_defaults(self):
        settings = SettingsManager()
        assert settings.get("taxi", "slip") == 0.3
        assert settings.get("data", "tail_pad") == 3
        assert settings.get("taxi", "missing", "fallback") == "fallback"

    def test_override_is_deep_merged(self, tmp_path):
        path = write_config(tmp_path, {"qlearning": {"lake": {"episodes": 10}}, "planner": {"beam_width": 2}})
        settings = SettingsManager(path)
        assert settings.get("qlearning", "lake")["episodes"] == 10
        assert settings.get("qlearning", "lake")["alpha"] == 0.05
        assert settings.get("qlearning", "taxi")["episodes"] == 40000
        assert settings.get("planner", "horizon") == 3

    def test_defaults_are_not_shared(self, tmp_path):
        SettingsManager(write_config(tmp_path, {"data": {"binning": {"taxi": "quantile"}}}))
        assert SettingsManager().get("data", "binning")["taxi"] == "exact"

    def test_unknown_section_ignored(self, tmp_path):
        settings = SettingsManager(write_config(tmp_path, {"gui": {"theme": "dark"}}))
        assert "gui" not in settings.snapshot()

    def test_missing_file(self, tmp_path):
        with pytest.raises(SettingsError, match="not found"):
            SettingsManager(str(tmp_path / "nothing.json"))

    def test_invalid_json(self, tmp_path):
        with pytest.raises(SettingsError, match="not valid JSON"):
            SettingsManager(write_config(tmp_path, "{oops"))
        with pytest.raises(SettingsError, match="JSON object"):
            SettingsManager(write_config(tmp_path, [1, 2], name="list.json"))

    def test_section_is_a_copy(self):
        settings = SettingsManager()
        settings.section("taxi")["slip"] = 0.9
        assert settings.get("taxi", "slip") == 0.3
        with pytest.raises(SettingsError, match="unknown config section"):
            settings.section("gui")

    def test_save_and_reload(self, tmp_path):
        settings = SettingsManager()
        settings.set("eval", "episodes", 5)
        path = str(tmp_path / "out" / "effective.json")
        settings.save(path)
        assert SettingsManager(path).get("eval", "episodes") == 5


class TestTypedViews:

    def test_env_configs(self, tmp_path):
        settings = SettingsManager(write_config(tmp_path, {"taxi": {"slip": 0.1}, "lake": {"size": 8}}))
        assert settings.taxi_config().slip == 0.1
        assert settings.lake_config().rows == 8

    def test_qlearning_config(self):
        cfg = SettingsManager().qlearning_config("lake", seed=9)
        assert cfg.seed == 9 and cfg.episodes == 20000
        with pytest.raises(SettingsError, match="qlearning"):
            SettingsManager().qlearning_config("cartpole")

    def test_em_config(self):
        cfg = SettingsManager().em_config(seed=4, workers=2)
        assert (cfg.seed, cfg.workers, cfg.hidden_size) == (4, 2, 16)

    def test_planner_config_overrides(self):
        cfg = SettingsManager().planner_config(delta=0.4, excluded_actions=(2,), seed=None)
        assert cfg.context == 7
        assert cfg.delta == 0.4 and cfg.excluded_actions == (2,)
        assert cfg.seed == 0
