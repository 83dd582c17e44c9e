"""
Tests for the model pool, per-session switching and the on-disk manifest.
"""
import struct
import time
from unittest.mock import patch

import pytest
from structlog.testing import capture_logs

from app.core.exceptions import RegistryError
from app.models.schemas import SPECIFIC_CLASSES, DialogueAct, DialogueContext, LMClassId, TaskParameter as P
from app.services.contextmap_service import (
    ClassTrainingStats,
    RobustnessPolicy,
    classify_context,
    effective_lm,
    enumerate_contexts,
)
from app.services.registry_service import (
    MANIFEST_NAME,
    LMPair,
    LMRegistry,
    ModelPool,
    load_all,
    policy_from_settings,
    read_manifest,
    registry_service,
    save_pool,
)

CI = LMClassId.CONTEXT_INDEPENDENT
POLICY = RobustnessPolicy(24, 20)


def repeat_first_word(data, vocab):
    """Model bytes with the second vocabulary entry overwritten by the first."""
    first, second = (struct.pack("<H", len(w.encode())) + w.encode() for w in vocab.tokens[3:5])
    return data.replace(second, first, 1)


@pytest.fixture
def stats():
    table = {cls: ClassTrainingStats(200, 150) for cls in SPECIFIC_CLASSES}
    table[LMClassId.VER_DEP_CITY] = ClassTrainingStats(40, 5)
    table[LMClassId.VER_ARR_CITY] = ClassTrainingStats(30, 4)
    return table


@pytest.fixture
def pool(toy_pair, stats):
    pairs = {cls: LMPair(toy_pair.bigram, toy_pair.trigram) for cls in SPECIFIC_CLASSES}
    return ModelPool(toy_pair, pairs, stats=stats, policy=POLICY)


class TestModelPool:

    def test_routes(self, pool):
        assert len(pool.routes) == 11
        assert pool.route(LMClassId.REQ_TIME) is LMClassId.REQ_TIME
        assert pool.route(LMClassId.VER_DEP_CITY) is CI
        assert pool.route(LMClassId.VER_ARR_CITY) is CI
        assert pool.pair(LMClassId.VER_DEP_CITY) is pool.fallback
        assert pool.model_pair(LMClassId.VER_DEP_CITY) is not pool.fallback

    def test_fallback_only(self, fallback_pool):
        registry = LMRegistry(fallback_pool)
        for ctx in enumerate_contexts(2):
            assert registry.switch(ctx) is CI
        assert fallback_pool.specific_classes == []

    def test_fallback_required(self):
        with pytest.raises(RegistryError):
            ModelPool(None)

    def test_stats_default_to_model_meta(self, toy_pair):
        """Routing statistics default to the sizes recorded in each model."""
        pool = ModelPool(toy_pair, {LMClassId.REQ_TIME: toy_pair})
        assert pool.stats[LMClassId.REQ_TIME] == ClassTrainingStats(10, 8)
        # default thresholds dwarf a ten-utterance model
        assert pool.route(LMClassId.REQ_TIME) is CI

    def test_share_trigram(self, toy_pair):
        other = LMPair(toy_pair.trigram, toy_pair.bigram)
        pool = ModelPool(toy_pair, {LMClassId.REQ_TIME: other}, policy=RobustnessPolicy.all_pass(),
                         share_trigram=True)
        assert pool.pair(LMClassId.REQ_TIME).bigram is toy_pair.trigram
        assert pool.pair(LMClassId.REQ_TIME).trigram is toy_pair.trigram

    def test_scaled_policy_from_settings(self, settings):
        assert policy_from_settings(settings) == RobustnessPolicy(24, 20)


class TestSwitch:

    def test_examples(self, pool):
        registry = LMRegistry(pool)
        assert registry.active is CI
        assert registry.switch(DialogueContext.of(DialogueAct.REQUEST, P.DEP_TIME)) is LMClassId.REQ_TIME
        assert registry.active is LMClassId.REQ_TIME
        assert registry.switch(DialogueContext.of(DialogueAct.VERIFY, P.DEP_CITY)) is CI
        assert registry.active_pair is pool.fallback

    def test_idempotent(self, pool):
        registry = LMRegistry(pool)
        ctx = DialogueContext.of(DialogueAct.VERIFY, P.DEP_CITY, P.ARR_CITY, P.PART_DAY)
        first = registry.switch(ctx)
        assert registry.switch(ctx) is first is registry.active

    def test_routing_equivalence(self, pool, stats):
        registry = LMRegistry(pool)
        for ctx in enumerate_contexts():
            assert registry.switch(ctx) is effective_lm(classify_context(ctx), stats, POLICY)

    def test_no_storage_access(self, pool):
        """Switching never touches the filesystem."""
        registry = LMRegistry(pool)
        contexts = enumerate_contexts(2)
        with patch("builtins.open", side_effect=AssertionError("storage touched")):
            for _ in range(20):
                for ctx in contexts:
                    registry.switch(ctx)

    def test_fork_and_reset(self, pool):
        """Sessions fork their own selector over the shared pool."""
        registry = LMRegistry(pool)
        registry.switch(DialogueContext.of(DialogueAct.REQUEST, P.DEP_DATE))
        other = registry.fork()
        assert other.active is CI
        assert other.pool is registry.pool
        assert registry.active is LMClassId.REQ_DATE
        registry.reset()
        assert registry.active is CI

    @pytest.mark.slow
    @pytest.mark.no_cover
    def test_million_switches_under_a_second(self, pool):
        registry = LMRegistry(pool)
        contexts = enumerate_contexts(2)
        sequence = [contexts[i % len(contexts)] for i in range(10 ** 6)]
        switch = registry.switch
        start = time.perf_counter()
        for ctx in sequence:
            switch(ctx)
        assert time.perf_counter() - start < 1.0


class TestPersistence:

    def test_save_and_load(self, pool, tmp_path):
        manifest = save_pool(pool, tmp_path)
        assert manifest.name == MANIFEST_NAME
        lines = manifest.read_text().splitlines()
        assert len(lines) == 11
        assert lines[0].split("\t") == [CI.value, "context_independent.bigram.lm",
                                        "context_independent.trigram.lm"]

        loaded = load_all(manifest, policy=RobustnessPolicy.all_pass())
        assert loaded.io_operations == 23
        assert loaded.specific_classes == list(SPECIFIC_CLASSES)
        assert all(loaded.route(cls) is cls for cls in SPECIFIC_CLASSES)
        assert loaded.warnings == ()
        tokens = ["from", "milano", "to", "roma"]
        assert (loaded.pair(LMClassId.REQ_TIME).trigram.sentence_logprob(tokens)
                == pool.pair(LMClassId.REQ_TIME).trigram.sentence_logprob(tokens))

    def test_corrupt_specific_model_degrades(self, pool, tmp_path):
        manifest = save_pool(pool, tmp_path)
        (tmp_path / "da_verify_time.bigram.lm").write_bytes(b"garbage")
        with capture_logs() as logs:
            loaded = load_all(manifest, policy=RobustnessPolicy.all_pass())
        assert loaded.route(LMClassId.VER_TIME) is CI
        assert loaded.route(LMClassId.VER_DATE) is LMClassId.VER_DATE
        assert len(loaded.warnings) == 1
        assert loaded.warnings[0].startswith(LMClassId.VER_TIME.value)
        assert any(e["event"] == "model_load_failed" and e["log_level"] == "warning" for e in logs)

    def test_duplicate_vocabulary_entry_degrades(self, pool, tmp_path):
        """A model file whose vocabulary repeats a word is corrupt, not fatal."""
        manifest = save_pool(pool, tmp_path)
        path = tmp_path / "da_verify_time.bigram.lm"
        path.write_bytes(repeat_first_word(path.read_bytes(), pool.fallback.bigram.vocab))
        with capture_logs() as logs:
            loaded = load_all(manifest, policy=RobustnessPolicy.all_pass())
        assert loaded.route(LMClassId.VER_TIME) is CI
        assert loaded.route(LMClassId.REQ_TIME) is LMClassId.REQ_TIME
        assert len(loaded.warnings) == 1
        assert loaded.warnings[0].startswith(f"{LMClassId.VER_TIME.value}: invalid vocabulary table")
        assert any(e["event"] == "model_load_failed" and e["log_level"] == "warning" for e in logs)

    def test_missing_specific_row(self, fallback_pool, tmp_path):
        loaded = load_all(save_pool(fallback_pool, tmp_path))
        assert loaded.io_operations == 3
        assert all(loaded.route(cls) is CI for cls in SPECIFIC_CLASSES)

    def test_missing_fallback_file(self, pool, tmp_path):
        manifest = save_pool(pool, tmp_path)
        (tmp_path / "context_independent.trigram.lm").unlink()
        with pytest.raises(RegistryError):
            load_all(manifest)

    def test_manifest_without_fallback(self, tmp_path):
        manifest = tmp_path / MANIFEST_NAME
        manifest.write_text("DA-REQUEST time\ta.lm\tb.lm\n")
        with pytest.raises(RegistryError, match=CI.value):
            load_all(manifest)

    @pytest.mark.parametrize("content", [
        "DA-REQUEST weather\ta.lm\tb.lm\n",
        "DA-REQUEST time\ta.lm\tb.lm\nDA-REQUEST time\tc.lm\td.lm\n",
    ])
    def test_bad_manifest(self, tmp_path, content):
        manifest = tmp_path / MANIFEST_NAME
        manifest.write_text(content)
        with pytest.raises(RegistryError):
            read_manifest(manifest)

    def test_paths_relative_to_manifest(self, tmp_path):
        """Manifest rows resolve against the manifest's directory."""
        manifest = tmp_path / MANIFEST_NAME
        manifest.write_text("CONTEXT_INDEPENDENT\tci.bi\tci.tri\n")
        assert read_manifest(manifest)[CI] == (tmp_path / "ci.bi", tmp_path / "ci.tri")

    def test_registry_service_applies_scaled_policy(self, pool, tmp_path, settings):
        save_pool(pool, tmp_path)
        loaded = registry_service.load(settings, models_dir=tmp_path)
        # ten training utterances fall below the scaled thresholds
        assert all(loaded.route(cls) is CI for cls in SPECIFIC_CLASSES)
