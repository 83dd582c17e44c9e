"""
Tests for the two-condition evaluation harness.
"""
import json
import math

import pytest
from structlog.testing import capture_logs

from app.core.config import Settings
from app.core.exceptions import EvaluationError
from app.models.schemas import SPECIFIC_CLASSES, ComparisonReport, DialogueAct, LMClassId, ReportRow
from app.services.evaluation_service import (
    CD_CONDITION,
    CI_CONDITION,
    METRICS,
    REDUCTION,
    _Tally,
    channel_seed,
    evaluation_service,
    group_of_utterance,
    reduction,
    report_frame,
    write_report,
)

CI = LMClassId.CONTEXT_INDEPENDENT


@pytest.fixture(scope="module")
def small_settings():
    return Settings(corpus_scale=0.03, nbest_size=3, num_word_classes=10, cluster_max_sweeps=2)


@pytest.fixture(scope="module")
def control_report(small_settings):
    return evaluation_service.compare(small_settings, control=True)


def make_report(rows, counts=(3, 2)):
    return ComparisonReport(
        seeds=[1],
        counts={"Requests": counts[0], "Confirms": counts[1], "Global": sum(counts)},
        tokens={"Requests": 10, "Confirms": 4, "Global": 14},
        rows=[ReportRow(metric=m, condition=c, requests=r, confirms=f, overall=o) for m, c, r, f, o in rows],
        routes={},
        config={},
    )


class TestReduction:

    def test_perplexity(self):
        assert reduction("PP", 100.0, 64.0) == pytest.approx(36.0)
        assert reduction("PP", 20.0, 25.0) == pytest.approx(-25.0)

    def test_error_rate(self):
        """WA and SU reductions are relative error-rate reductions."""
        assert reduction("WA", 73.2, 75.1) == pytest.approx((26.8 - 24.9) / 26.8 * 100)
        assert reduction("SU", 80.0, 90.0) == pytest.approx(50.0)

    def test_perfect_baseline(self):
        """No baseline error means no reduction to report."""
        assert reduction("SU", 100.0, 90.0) == 0.0

    def test_undefined_perplexity(self):
        assert math.isnan(reduction("PP", math.inf, 10.0))
        assert math.isnan(reduction("PP", 0.0, 0.0))


class TestTally:

    def test_pooled_perplexity(self):
        """Perplexity pools log-probabilities and tokens across groups."""
        tally = _Tally()
        tally.utterances["Requests"] = 1
        tally.utterances["Confirms"] = 1
        tally.logprob["Requests"] = -4.0
        tally.logprob["Confirms"] = -2.0
        tally.tokens["Requests"] = 2
        tally.tokens["Confirms"] = 4
        assert tally.value("PP", ("Requests",)) == pytest.approx(math.exp(2.0))
        assert tally.value("PP", ("Requests", "Confirms")) == pytest.approx(math.exp(1.0))

    def test_percentages(self):
        tally = _Tally()
        tally.utterances["Requests"] = 4
        tally.wa["Requests"] = 3.0
        tally.su["Requests"] = 1
        assert tally.value("WA", ("Requests",)) == 75.0
        assert tally.value("SU", ("Requests",)) == 25.0

    def test_empty_group(self):
        assert math.isnan(_Tally().value("WA", ("Confirms",)))

    def test_impossible_utterance(self):
        """One zero-probability utterance makes the group perplexity infinite."""
        tally = _Tally()
        tally.utterances["Requests"] = 1
        tally.logprob["Requests"] = -math.inf
        tally.tokens["Requests"] = 3
        assert tally.value("PP", ("Requests",)) == math.inf


class TestHelpers:

    def test_group_follows_act(self, make_utt):
        assert group_of_utterance(make_utt("from milano")) == "Requests"
        assert group_of_utterance(make_utt("yes", act=DialogueAct.VERIFY)) == "Confirms"

    def test_channel_seed(self):
        assert channel_seed(13, 0) == channel_seed(13, 0)
        assert len({channel_seed(13, i) for i in range(50)}) == 50
        assert channel_seed(13, 1) != channel_seed(14, 1)


class TestBuildModels:

    def test_default_routes(self, default_bundle):
        routed = {c for c in SPECIFIC_CLASSES if default_bundle.pool.route(c) is CI}
        assert routed == {LMClassId.VER_DEP_CITY, LMClassId.VER_ARR_CITY}

    def test_split_and_models(self, default_bundle):
        assert default_bundle.seed == 13
        assert len(default_bundle.split.test) > 0
        assert default_bundle.classmap.num_classes == 30
        assert set(default_bundle.pool.specific_classes) == set(SPECIFIC_CLASSES)
        fallback = default_bundle.pool.fallback
        assert fallback.bigram.label == CI.value
        assert fallback.trigram.order == 3

    def test_class_count_clamped(self, toy_corpus, settings):
        """K larger than the clusterable vocabulary is clamped with a warning."""
        from app.services.corpus_service import build_vocabulary

        vocab = build_vocabulary(toy_corpus)
        with capture_logs() as logs:
            classmap = evaluation_service.cluster(toy_corpus, vocab, settings, seed=1)
        assert classmap.num_classes == len(vocab.clusterable_ids)
        assert any(e["event"] == "num_word_classes_clamped" for e in logs)


class TestCompare:

    def test_control_run_has_zero_deltas(self, control_report):
        for metric in METRICS:
            ci = control_report.row(metric, CI_CONDITION)
            cd = control_report.row(metric, CD_CONDITION)
            assert (cd.requests, cd.confirms, cd.overall) == (ci.requests, ci.confirms, ci.overall)
            red = control_report.row(metric, REDUCTION)
            assert (red.requests, red.confirms, red.overall) == (0.0, 0.0, 0.0)

    def test_group_accounting(self, control_report):
        counts = control_report.counts
        assert counts["Requests"] + counts["Confirms"] == counts["Global"]
        assert counts["Requests"] > 0 and counts["Confirms"] > 0
        assert control_report.tokens["Global"] > counts["Global"]

    def test_report_contents(self, control_report, small_settings):
        assert control_report.seeds == [small_settings.seed]
        assert len(control_report.rows) == 9
        assert set(control_report.routes) == {c.value for c in SPECIFIC_CLASSES}
        assert control_report.config["corpus_scale"] == 0.03

    def test_metric_subset(self, small_settings):
        report = evaluation_service.compare(small_settings, metrics=("PP",))
        assert [r.metric for r in report.rows] == ["PP"] * 3

    def test_unknown_metric(self, small_settings):
        with pytest.raises(EvaluationError, match="BLEU"):
            evaluation_service.compare(small_settings, metrics=("PP", "BLEU"))

    def test_byte_identical_reports(self, small_settings, tmp_path):
        first = write_report(evaluation_service.compare(small_settings), tmp_path / "a")
        second = write_report(evaluation_service.compare(small_settings), tmp_path / "b")
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    @pytest.mark.slow
    def test_directional_reproduction(self):
        """Default settings over five seeds favour the context-dependent LMs on every metric."""
        settings = Settings()
        report = evaluation_service.compare(settings, seeds=range(settings.seed, settings.seed + settings.runs))
        pp_ci, pp_cd = report.row("PP", CI_CONDITION), report.row("PP", CD_CONDITION)
        assert pp_cd.overall < pp_ci.overall
        pp_red = report.row("PP", REDUCTION)
        assert pp_red.overall >= 10.0
        assert pp_red.requests > pp_red.confirms
        wa_ci, wa_cd = report.row("WA", CI_CONDITION), report.row("WA", CD_CONDITION)
        assert wa_cd.overall >= wa_ci.overall
        assert wa_cd.requests - wa_ci.requests >= 1.0
        assert report.row("SU", CD_CONDITION).overall >= report.row("SU", CI_CONDITION).overall


class TestReportFiles:

    def test_frame_layout(self):
        report = make_report([("PP", CI_CONDITION, 28.94, 20.0, 24.449)])
        frame = report_frame(report)
        assert list(frame.columns) == ["metric", "condition", "Requests", "Confirms", "Global"]
        assert frame.iloc[0].tolist() == ["PP", CI_CONDITION, "28.9", "20.0", "24.4"]
        assert frame.iloc[-1].tolist() == ["N", "utterances", "3", "2", "5"]

    def test_write_report(self, tmp_path):
        report = make_report([("SU", CD_CONDITION, 78.44, 80.0, 79.0)])
        tsv, js = write_report(report, tmp_path / "out", stem="eval_su")
        assert tsv.name == "eval_su.tsv"
        lines = tsv.read_text().splitlines()
        assert lines[0] == "metric\tcondition\tRequests\tConfirms\tGlobal"
        assert lines[1] == f"SU\t{CD_CONDITION}\t78.4\t80.0\t79.0"
        assert json.loads(js.read_text())["rows"][0]["requests"] == 78.44
