"""
Configuration settings for the context-dependent LM toolkit.
"""
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.exceptions import ConfigError

DATA_DIR = Path(__file__).resolve().parents[2] / "data"


class Settings(BaseSettings):
    """Application settings."""

    model_config = SettingsConfigDict(
        env_prefix="CTXLM_",
        env_file=".env",
        case_sensitive=False,
        extra="forbid",
    )

    # Application
    app_name: str = "Context-Dependent LM Toolkit"
    app_version: str = "1.0.0"
    debug: bool = False

    # API
    api_prefix: str = "/api/v1"
    host: str = "0.0.0.0"
    port: int = 8000
    max_sessions: int = Field(default=1000, ge=1)

    # Resources
    grammar_file: Path = DATA_DIR / "grammar.txt"
    confusion_file: Path = DATA_DIR / "confusions.tsv"
    timetable_file: Path = DATA_DIR / "timetable.tsv"
    models_dir: Path = Path("models")

    # Reproducibility
    seed: int = 13
    runs: int = Field(default=5, ge=1)

    # Corpus
    corpus_scale: float = Field(default=0.1, gt=0.0, le=10.0)
    test_ratio: float = Field(default=0.2, gt=0.0, lt=1.0)
    noise_token_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    min_count: int = Field(default=1, ge=1)

    # Word clustering
    num_word_classes: int = Field(default=30, ge=1)
    cluster_max_sweeps: int = Field(default=10, ge=0)
    cluster_per_model: bool = False

    # Class n-gram models
    smoothing: Literal["witten_bell", "none"] = "witten_bell"
    unk_floor: float = Field(default=1e-6, gt=0.0, lt=1.0)
    emission_prior_weight: float = Field(default=10.0, ge=0.0)
    trigram_word_level: bool = False
    share_trigram: bool = False

    # Robustness fallback, expressed at the reference (unscaled) distribution
    robustness_min_utterances: int = Field(default=300, ge=0)
    robustness_min_multiword: int = Field(default=250, ge=0)

    # Simulated recognizer
    nbest_size: int = Field(default=10, ge=1)
    channel_noise: float = Field(default=0.6, ge=0.0, le=1.0)
    channel_edit_rate: float = Field(default=0.5, ge=0.0, le=1.0)
    acoustic_jitter: float = Field(default=1.0, ge=0.0)
    lm_weight: float = Field(default=1.0, ge=0.0)

    # Dialogue policy
    many_trains_threshold: int = Field(default=3, ge=0)
    max_reprompts: int = Field(default=3, ge=0)
    max_turns: int = Field(default=20, ge=1)
    ask_date: bool = False
    implicit_time_confirmation: bool = True

    # Logging
    log_level: str = "INFO"
    log_json: bool = False

    @property
    def robustness_scale(self) -> float:
        """Factor mapping reference-scale thresholds onto the training split."""
        return self.corpus_scale * (1.0 - self.test_ratio)


def load_settings(path: Optional[Union[str, Path]] = None, **overrides) -> Settings:
    """
    Build settings from an optional JSON config file plus explicit overrides.

    Args:
        path: JSON file whose keys are Settings field names
        **overrides: values taking precedence over the file

    Returns:
        Validated settings

    Raises:
        ConfigError: unreadable file or invalid fields (named in the message)
    """
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must contain a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return Settings(**data)
    except ValidationError as e:
        fields = sorted({".".join(str(p) for p in err["loc"]) for err in e.errors()})
        raise ConfigError(f"invalid configuration fields: {', '.join(fields)}") from e


# Global settings instance
settings = Settings()
