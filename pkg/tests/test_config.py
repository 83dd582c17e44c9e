"""
Tests for settings loading.
"""
import json

import pytest

from app.core.config import DATA_DIR, Settings, load_settings
from app.core.exceptions import ConfigError


class TestSettings:
    """Test cases for Settings and load_settings."""

    def test_defaults(self):
        s = Settings()
        assert s.seed == 13
        assert s.nbest_size == 10
        assert s.smoothing == "witten_bell"
        assert s.robustness_scale == pytest.approx(0.08)

    def test_load_example_config(self):
        s = load_settings(DATA_DIR / "config.json")
        assert s.num_word_classes == 30
        assert s.channel_noise == 0.6

    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 5, "lm_weight": 2.0}))
        s = load_settings(path, seed=99, lm_weight=None)
        assert s.seed == 99
        assert s.lm_weight == 2.0

    def test_invalid_field_named(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"test_ratio": 1.5, "channel_noise": -1}))
        with pytest.raises(ConfigError) as exc:
            load_settings(path)
        assert "channel_noise" in str(exc.value)
        assert "test_ratio" in str(exc.value)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"num_classes": 3}))
        with pytest.raises(ConfigError, match="num_classes"):
            load_settings(path)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_settings(tmp_path / "missing.json")

    def test_non_object_config(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_settings(path)
