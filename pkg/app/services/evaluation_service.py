"""
Context-independent vs context-dependent evaluation harness.

Both conditions score one shared test set. Per-utterance channel seeds make
them see identical n-best lists, so every difference comes from the LMs.
"""
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog

from app.core.config import Settings
from app.core.exceptions import EvaluationError
from app.models.schemas import (
    SPECIFIC_CLASSES,
    ComparisonReport,
    DialogueAct,
    LMClassId,
    ReportRow,
    Utterance,
)
from app.services.classlm_service import class_lm_service
from app.services.corpus_service import (
    CorpusSplit,
    Vocabulary,
    build_vocabulary,
    corpus_service,
    group_by_class,
)
from app.services.recsim_service import RecognizerService, recognizer_service, rescore, word_accuracy
from app.services.registry_service import LMPair, LMRegistry, ModelPool, policy_from_settings
from app.services.semantics_service import parse, su_match
from app.services.wordclass_service import WordClassMap, cluster_words

logger = structlog.get_logger(__name__)

METRICS = ("PP", "WA", "SU")
GROUPS = ("Requests", "Confirms")
CI_CONDITION = "context-independent"
CD_CONDITION = "context-dependent"
REDUCTION = "reduction %"


@dataclass
class ModelBundle:
    """Everything trained for one seed."""
    seed: int
    split: CorpusSplit
    vocab: Vocabulary
    classmap: WordClassMap
    pool: ModelPool


def group_of_utterance(utt: Utterance) -> str:
    """Report group: the act kind of the context that elicited the utterance."""
    return GROUPS[0] if utt.context.act is DialogueAct.REQUEST else GROUPS[1]


def channel_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class _Tally:
    """Sums per group for one condition."""
    logprob: Dict[str, float] = field(default_factory=lambda: defaultdict(float))
    tokens: Dict[str, int] = field(default_factory=lambda: defaultdict(int))
    wa: Dict[str, float] = field(default_factory=lambda: defaultdict(float))
    su: Dict[str, int] = field(default_factory=lambda: defaultdict(int))
    utterances: Dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def value(self, metric: str, groups: Sequence[str]) -> float:
        n = sum(self.utterances[g] for g in groups)
        if n == 0:
            return math.nan
        if metric == "PP":
            total = sum(self.logprob[g] for g in groups)
            tokens = sum(self.tokens[g] for g in groups)
            return math.exp(-total / tokens) if math.isfinite(total) else math.inf
        if metric == "WA":
            return 100.0 * sum(self.wa[g] for g in groups) / n
        return 100.0 * sum(self.su[g] for g in groups) / n


def reduction(metric: str, ci: float, cd: float) -> float:
    """PP relative reduction; WA/SU relative error reduction; in percent."""
    if metric == "PP":
        if not (math.isfinite(ci) and math.isfinite(cd)) or ci == 0:
            return math.nan
        return (ci - cd) / ci * 100.0
    ci_err, cd_err = 100.0 - ci, 100.0 - cd
    if ci_err == 0:
        return 0.0
    return (ci_err - cd_err) / ci_err * 100.0


class EvaluationService:
    """Builds per-seed model pools and runs the two-condition comparison."""

    def __init__(self, recognizer: Optional[RecognizerService] = None):
        self.recognizer = recognizer or recognizer_service

    def cluster(self, corpus: Sequence[Utterance], vocab: Vocabulary, settings: Settings, seed: int) -> WordClassMap:
        clusterable = len(vocab.clusterable_ids)
        k = settings.num_word_classes
        if k > clusterable:
            logger.warning("num_word_classes_clamped", requested=k, clusterable=clusterable)
            k = clusterable
        return cluster_words(corpus, k, settings.cluster_max_sweeps, seed=seed, vocab=vocab)

    def train_pair(self, corpus, vocab, classmap, settings: Settings, label: str,
                   prior: Optional[np.ndarray] = None) -> LMPair:
        trigram_map = WordClassMap.identity(vocab) if settings.trigram_word_level else classmap
        return LMPair(
            bigram=class_lm_service.train_from_settings(corpus, vocab, classmap, 2, settings, label, prior),
            trigram=class_lm_service.train_from_settings(corpus, vocab, trigram_map, 3, settings, label, prior),
        )

    def build_models(self, settings: Settings, seed: Optional[int] = None) -> ModelBundle:
        """
        Generate, split, cluster and train the fallback plus every specific
        pair for one seed.
        """
        seed = settings.seed if seed is None else seed
        split = corpus_service.generate_split(settings, seed)
        train = list(split.train)
        vocab = build_vocabulary(train, settings.min_count)
        classmap = self.cluster(train, vocab, settings, seed)

        fallback = self.train_pair(train, vocab, classmap, settings, LMClassId.CONTEXT_INDEPENDENT.value)
        prior = np.bincount([i for u in train for i in vocab.encode(u.tokens)], minlength=len(vocab)).astype(float)

        pairs: Dict[LMClassId, LMPair] = {}
        groups = group_by_class(train)
        for lm_class in SPECIFIC_CLASSES:
            data = groups.get(lm_class, [])
            if not data:
                logger.warning("no_training_data", lm_class=lm_class.value)
                continue
            class_map = self.cluster(data, vocab, settings, seed) if settings.cluster_per_model else classmap
            pairs[lm_class] = self.train_pair(data, vocab, class_map, settings, lm_class.value, prior)

        pool = ModelPool(fallback, pairs, policy=policy_from_settings(settings),
                         share_trigram=settings.share_trigram)
        logger.info("models_built", seed=seed, train=len(train), test=len(split.test),
                    vocabulary=len(vocab), classes=classmap.num_classes,
                    routed_to_fallback=[c.value for c in SPECIFIC_CLASSES
                                        if pool.route(c) is LMClassId.CONTEXT_INDEPENDENT])
        return ModelBundle(seed, split, vocab, classmap, pool)

    def _score(self, bundle: ModelBundle, settings: Settings, control: bool,
               metrics: Sequence[str], tallies: Dict[str, _Tally]) -> None:
        conditions = {
            CI_CONDITION: LMRegistry(ModelPool.fallback_only(bundle.pool.fallback)),
            CD_CONDITION: LMRegistry(ModelPool.fallback_only(bundle.pool.fallback) if control else bundle.pool),
        }
        recognize = "WA" in metrics or "SU" in metrics
        for index, utt in enumerate(bundle.split.test):
            group = group_of_utterance(utt)
            nbest = self.recognizer.nbest(utt.tokens, settings, channel_seed(bundle.seed, index)) if recognize else None
            for name, registry in conditions.items():
                registry.switch(utt.context)
                pair = registry.active_pair
                tally = tallies[name]
                tally.utterances[group] += 1
                if "PP" in metrics:
                    tally.logprob[group] += pair.bigram.sentence_logprob(utt.tokens)
                    tally.tokens[group] += len(utt.tokens) + 1
                if recognize:
                    hyp = rescore(nbest, pair.bigram, pair.trigram, settings.lm_weight)
                    tally.wa[group] += word_accuracy(hyp.tokens, utt.tokens)
                    tally.su[group] += int(su_match(parse(hyp.tokens), utt.ref_frame))

    def compare(
        self,
        settings: Settings,
        seeds: Optional[Sequence[int]] = None,
        control: bool = False,
        metrics: Sequence[str] = METRICS,
    ) -> ComparisonReport:
        """
        Run both conditions over the given seeds and pool the results.

        Args:
            settings: configuration
            seeds: defaults to settings.seed
            control: point both conditions at the fallback pair
            metrics: subset of PP, WA, SU

        Raises:
            EvaluationError: unknown metric or empty test set
        """
        seeds = list(seeds) if seeds else [settings.seed]
        unknown = [m for m in metrics if m not in METRICS]
        if unknown:
            raise EvaluationError(f"unknown metrics {unknown}")
        tallies = {CI_CONDITION: _Tally(), CD_CONDITION: _Tally()}
        routes: Dict[str, str] = {}
        for seed in seeds:
            bundle = self.build_models(settings, seed)
            if not bundle.split.test:
                raise EvaluationError(f"empty test set for seed {seed}")
            self._score(bundle, settings, control, metrics, tallies)
            routes = {c.value: bundle.pool.route(c).value for c in SPECIFIC_CLASSES}

        rows: List[ReportRow] = []
        columns: Tuple[Tuple[str, ...], ...] = ((GROUPS[0],), (GROUPS[1],), GROUPS)
        for metric in [m for m in METRICS if m in metrics]:
            ci = [tallies[CI_CONDITION].value(metric, g) for g in columns]
            cd = [tallies[CD_CONDITION].value(metric, g) for g in columns]
            red = [reduction(metric, a, b) for a, b in zip(ci, cd)]
            for condition, values in ((CI_CONDITION, ci), (CD_CONDITION, cd), (REDUCTION, red)):
                rows.append(ReportRow(metric=metric, condition=condition,
                                      requests=values[0], confirms=values[1], overall=values[2]))

        ci_tally = tallies[CI_CONDITION]
        counts = {g: ci_tally.utterances[g] for g in GROUPS}
        counts["Global"] = sum(counts[g] for g in GROUPS)
        tokens = {g: ci_tally.tokens[g] for g in GROUPS}
        tokens["Global"] = sum(tokens[g] for g in GROUPS)
        report = ComparisonReport(seeds=seeds, counts=counts, tokens=tokens, rows=rows, routes=routes,
                                  config=settings.model_dump(mode="json"))
        logger.info("comparison_finished", seeds=seeds, control=control, utterances=counts["Global"])
        return report


def report_frame(report: ComparisonReport) -> pd.DataFrame:
    """Report table with 1-decimal strings, group counts last."""
    records = [
        {"metric": r.metric, "condition": r.condition, "Requests": f"{r.requests:.1f}",
         "Confirms": f"{r.confirms:.1f}", "Global": f"{r.overall:.1f}"}
        for r in report.rows
    ]
    records.append({"metric": "N", "condition": "utterances", "Requests": str(report.counts["Requests"]),
                    "Confirms": str(report.counts["Confirms"]), "Global": str(report.counts["Global"])})
    return pd.DataFrame(records, columns=["metric", "condition", "Requests", "Confirms", "Global"])


def write_report(report: ComparisonReport, out_dir: Union[str, Path], stem: str = "report") -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv, js = out_dir / f"{stem}.tsv", out_dir / f"{stem}.json"
    report_frame(report).to_csv(tsv, sep="\t", index=False, lineterminator="\n")
    js.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return [tsv, js]


# Global service instance
evaluation_service = EvaluationService()
