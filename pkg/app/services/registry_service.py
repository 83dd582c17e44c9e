"""
Model pool loaded once at startup, and per-session selectors that switch
the active LM pair per dialogue turn without touching storage.
"""
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import pandas as pd
import structlog

from app.core.config import Settings
from app.core.exceptions import ModelFormatError, RegistryError
from app.models.schemas import SPECIFIC_CLASSES, DialogueContext, LMClassId
from app.services.classlm_service import ClassNGramModel, load_model, save_model
from app.services.contextmap_service import (
    ClassTrainingStats,
    RobustnessPolicy,
    classify_context,
    effective_lm,
)

logger = structlog.get_logger(__name__)

MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class LMPair:
    """First-pass bigram and rescoring trigram for one LM class."""
    bigram: ClassNGramModel
    trigram: ClassNGramModel


def policy_from_settings(settings: Settings) -> RobustnessPolicy:
    """Robustness thresholds scaled to the synthetic training split."""
    base = RobustnessPolicy(settings.robustness_min_utterances, settings.robustness_min_multiword)
    return base.scaled(settings.robustness_scale)


class ModelPool:
    """
    Immutable set of resident models shared by all sessions.

    Routes every LM class to the class whose pair is actually used: classes
    without a model or below the robustness policy go to the fallback.
    """

    def __init__(
        self,
        fallback: LMPair,
        pairs: Optional[Mapping[LMClassId, LMPair]] = None,
        stats: Optional[Mapping[LMClassId, ClassTrainingStats]] = None,
        policy: Optional[RobustnessPolicy] = None,
        warnings: Tuple[str, ...] = (),
        io_operations: int = 0,
        share_trigram: bool = False,
    ):
        if fallback is None:
            raise RegistryError("context-independent fallback pair is required")
        pairs = dict(pairs or {})
        if LMClassId.CONTEXT_INDEPENDENT in pairs:
            raise RegistryError("fallback must be passed separately from specific pairs")
        if share_trigram:
            pairs = {cls: replace(pair, trigram=fallback.trigram) for cls, pair in pairs.items()}
        self.fallback = fallback
        self.policy = policy or RobustnessPolicy()
        self.stats: Dict[LMClassId, ClassTrainingStats] = dict(stats) if stats is not None else {
            cls: ClassTrainingStats(p.bigram.meta.utterances, p.bigram.meta.multiword_utterances)
            for cls, p in pairs.items()
        }
        self.warnings = tuple(warnings)
        self.io_operations = io_operations
        self._pairs = pairs
        self._pairs[LMClassId.CONTEXT_INDEPENDENT] = fallback

        self.routes: Dict[LMClassId, LMClassId] = {LMClassId.CONTEXT_INDEPENDENT: LMClassId.CONTEXT_INDEPENDENT}
        for cls in SPECIFIC_CLASSES:
            if cls in pairs and cls in self.stats:
                self.routes[cls] = effective_lm(cls, self.stats, self.policy)
            else:
                self.routes[cls] = LMClassId.CONTEXT_INDEPENDENT

    @classmethod
    def fallback_only(cls, fallback: LMPair) -> "ModelPool":
        return cls(fallback)

    @property
    def specific_classes(self) -> List[LMClassId]:
        return [c for c in SPECIFIC_CLASSES if c in self._pairs]

    def route(self, lm_class: LMClassId) -> LMClassId:
        return self.routes[lm_class]

    def pair(self, lm_class: LMClassId) -> LMPair:
        """Pair used for lm_class after routing."""
        return self._pairs[self.routes[lm_class]]

    def model_pair(self, lm_class: LMClassId) -> Optional[LMPair]:
        """Pair trained for lm_class, ignoring routing."""
        return self._pairs.get(lm_class)

    def resolve(self, ctx: DialogueContext) -> LMClassId:
        return self.routes[classify_context(ctx)]


class LMRegistry:
    """Active-model selector over a shared pool; one per dialogue session."""

    def __init__(self, pool: ModelPool):
        self.pool = pool
        self._active = LMClassId.CONTEXT_INDEPENDENT
        self._memo: Dict[str, LMClassId] = {}

    @property
    def active(self) -> LMClassId:
        return self._active

    @property
    def active_pair(self) -> LMPair:
        return self.pool.pair(self._active)

    def switch(self, ctx: DialogueContext) -> LMClassId:
        """Activate the model for ctx; no storage access, no logging."""
        resolved = self._memo.get(ctx.key)
        if resolved is None:
            resolved = self._memo[ctx.key] = self.pool.resolve(ctx)
        self._active = resolved
        return resolved

    def reset(self) -> None:
        self._active = LMClassId.CONTEXT_INDEPENDENT

    def fork(self) -> "LMRegistry":
        """Independent selector over the same pool."""
        return LMRegistry(self.pool)


def _slug(lm_class: LMClassId) -> str:
    return re.sub(r"[^a-z0-9]+", "_", lm_class.value.lower()).strip("_")


def save_pool(pool: ModelPool, directory: Union[str, Path]) -> Path:
    """Write every resident pair plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for cls in [LMClassId.CONTEXT_INDEPENDENT] + pool.specific_classes:
        pair = pool.model_pair(cls)
        names = (f"{_slug(cls)}.bigram.lm", f"{_slug(cls)}.trigram.lm")
        save_model(directory / names[0], pair.bigram)
        save_model(directory / names[1], pair.trigram)
        rows.append({"label": cls.value, "bigram": names[0], "trigram": names[1]})
    manifest = directory / MANIFEST_NAME
    pd.DataFrame(rows, columns=["label", "bigram", "trigram"]).to_csv(
        manifest, sep="\t", index=False, header=False, lineterminator="\n")
    logger.info("model_pool_saved", directory=str(directory), pairs=len(rows))
    return manifest


def read_manifest(path: Union[str, Path]) -> Dict[LMClassId, Tuple[Path, Path]]:
    """
    Parse `label<TAB>bigram<TAB>trigram` rows; paths are relative to the manifest.

    Raises:
        RegistryError: unreadable manifest, unknown label or duplicate row
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, sep="\t", header=None, names=["label", "bigram", "trigram"],
                            dtype=str, keep_default_na=False, comment="#")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise RegistryError(f"cannot read manifest {path}: {e}") from e
    entries: Dict[LMClassId, Tuple[Path, Path]] = {}
    for row in frame.itertuples(index=False):
        try:
            cls = LMClassId(row.label)
        except ValueError as e:
            raise RegistryError(f"{path}: unknown LM class label {row.label!r}") from e
        if cls in entries:
            raise RegistryError(f"{path}: duplicate row for {row.label!r}")
        entries[cls] = (path.parent / row.bigram, path.parent / row.trigram)
    return entries


def load_all(
    manifest: Union[str, Path],
    policy: Optional[RobustnessPolicy] = None,
    share_trigram: bool = False,
) -> ModelPool:
    """
    Load every model listed in the manifest.

    Raises:
        RegistryError: manifest problems or a missing/corrupt fallback pair
    """
    entries = read_manifest(manifest)
    io_operations = 1
    if LMClassId.CONTEXT_INDEPENDENT not in entries:
        raise RegistryError(f"{manifest}: no {LMClassId.CONTEXT_INDEPENDENT.value} row")

    def load_pair(cls: LMClassId) -> LMPair:
        nonlocal io_operations
        bigram_path, trigram_path = entries[cls]
        io_operations += 2
        return LMPair(load_model(bigram_path), load_model(trigram_path))

    try:
        fallback = load_pair(LMClassId.CONTEXT_INDEPENDENT)
    except (OSError, ModelFormatError) as e:
        logger.error("fallback_load_failed", error=str(e))
        raise RegistryError(f"cannot load context-independent models: {e}") from e

    pairs: Dict[LMClassId, LMPair] = {}
    warnings: List[str] = []
    for cls in SPECIFIC_CLASSES:
        if cls not in entries:
            continue
        try:
            pairs[cls] = load_pair(cls)
        except (OSError, ModelFormatError) as e:
            logger.warning("model_load_failed", lm_class=cls.value, error=str(e))
            warnings.append(f"{cls.value}: {e}")

    pool = ModelPool(fallback, pairs, policy=policy, warnings=tuple(warnings),
                     io_operations=io_operations, share_trigram=share_trigram)
    logger.info("model_pool_loaded", pairs=len(pairs) + 1, degraded=len(warnings),
                routed_to_fallback=sum(1 for c in SPECIFIC_CLASSES
                                       if pool.route(c) is LMClassId.CONTEXT_INDEPENDENT))
    return pool


class RegistryService:
    """Loads the model pool described by settings."""

    def load(self, settings: Settings, models_dir: Optional[Path] = None) -> ModelPool:
        directory = Path(models_dir or settings.models_dir)
        return load_all(directory / MANIFEST_NAME, policy=policy_from_settings(settings),
                        share_trigram=settings.share_trigram)


# Global service instance
registry_service = RegistryService()
