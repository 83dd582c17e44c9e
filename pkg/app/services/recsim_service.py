"""
Simulated noisy-channel recognizer.

Corrupts a reference token sequence with phrase confusions, deletions and
insertions drawn from a confusion table, scores each hypothesis with its
negative edit cost plus seeded acoustic jitter, and rescores the n-best list
with an LM pair.
"""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from rapidfuzz.distance import Levenshtein

from app.core.config import Settings
from app.core.exceptions import ConfigError, EvaluationError
from app.models.schemas import Utterance

logger = structlog.get_logger(__name__)

Phrase = Tuple[str, ...]

DELETE_MARK = "-"
DEFAULT_DELETION_KEY = "<del>"
INSERTION_KEY = "<ins>"


class SentenceScorer(Protocol):
    def sentence_logprob(self, tokens: Sequence[str]) -> float: ...


@dataclass(frozen=True)
class EditOption:
    consumed: int
    replacement: Phrase
    cost: float


@dataclass(frozen=True)
class ConfusionTable:
    """Phrase confusions with costs; lower cost means more confusable."""
    substitutions: Dict[Phrase, Tuple[Tuple[Phrase, float], ...]] = field(default_factory=dict)
    deletion_costs: Dict[str, float] = field(default_factory=dict)
    default_deletion_cost: float = 3.0
    insertions: Tuple[Tuple[str, float], ...] = ()

    @property
    def max_phrase(self) -> int:
        return max((len(p) for p in self.substitutions), default=1)

    def options_at(self, tokens: Sequence[str], i: int) -> List[EditOption]:
        """Every edit applicable at position i, longest source phrases first."""
        options = []
        for length in range(min(self.max_phrase, len(tokens) - i), 0, -1):
            for alternative, cost in self.substitutions.get(tuple(tokens[i:i + length]), ()):
                options.append(EditOption(length, alternative, cost))
        options.append(EditOption(1, (), self.deletion_costs.get(tokens[i], self.default_deletion_cost)))
        for filler, cost in self.insertions:
            options.append(EditOption(1, (filler, tokens[i]), cost))
        return options


def load_confusion_table(path: Union[str, Path]) -> ConfusionTable:
    """
    Read `source<TAB>alternative<TAB>cost` rows.

    Raises:
        ConfigError: unreadable file or an invalid cost
    """
    try:
        frame = pd.read_csv(path, sep="\t", header=None, names=["source", "alternative", "cost"],
                            comment="#", dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read confusion table {path}: {e}") from e

    substitutions: Dict[Phrase, List[Tuple[Phrase, float]]] = {}
    deletions: Dict[str, float] = {}
    insertions: List[Tuple[str, float]] = []
    default_deletion = 3.0
    for row in frame.itertuples(index=False):
        try:
            cost = float(row.cost)
        except ValueError as e:
            raise ConfigError(f"{path}: bad cost {row.cost!r} for {row.source!r}") from e
        if not math.isfinite(cost) or cost < 0:
            raise ConfigError(f"{path}: cost must be finite and non-negative, got {row.cost!r}")
        source = tuple(row.source.split())
        if row.source == DEFAULT_DELETION_KEY:
            default_deletion = cost
        elif row.source == INSERTION_KEY:
            insertions.append((row.alternative, cost))
        elif row.alternative == DELETE_MARK:
            if len(source) != 1:
                raise ConfigError(f"{path}: deletion cost needs a single-token source, got {row.source!r}")
            deletions[source[0]] = cost
        else:
            substitutions.setdefault(source, []).append((tuple(row.alternative.split()), cost))
    table = ConfusionTable(
        substitutions={k: tuple(v) for k, v in substitutions.items()},
        deletion_costs=deletions,
        default_deletion_cost=default_deletion,
        insertions=tuple(insertions),
    )
    logger.debug("confusion_table_loaded", path=str(path), sources=len(substitutions))
    return table


@dataclass(frozen=True)
class Hypothesis:
    tokens: Phrase
    acoustic_score: float
    cost: float = 0.0


@dataclass(frozen=True)
class NBestList:
    reference: Phrase
    hypotheses: Tuple[Hypothesis, ...]

    def __len__(self) -> int:
        return len(self.hypotheses)

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def _corrupt(tokens: Phrase, table: ConfusionTable, p_edit: float, rng: np.random.Generator):
    out: List[str] = []
    cost = 0.0
    i = 0
    while i < len(tokens):
        if rng.random() < p_edit:
            options = table.options_at(tokens, i)
            weights = np.exp(-np.array([o.cost for o in options]))
            choice = options[int(rng.choice(len(options), p=weights / weights.sum()))]
            out.extend(choice.replacement)
            cost += choice.cost
            i += choice.consumed
        else:
            out.append(tokens[i])
            i += 1
    return tuple(out), cost


def generate_nbest(
    ref: Union[Utterance, Sequence[str]],
    table: ConfusionTable,
    n: int,
    noise: float,
    seed: int,
    edit_rate: float = 0.5,
    jitter: float = 1.0,
) -> NBestList:
    """
    n-best list of edit neighbours of the reference.

    Each of 4n corruption attempts edits every token with probability
    noise * edit_rate. The reference is always a zero-cost candidate. A
    hypothesis scores -cost + jitter * noise * N(0, 1); the list keeps the n
    best in stable order. Pure function of its arguments.

    Raises:
        EvaluationError: n < 1 or noise outside [0, 1]
    """
    if n < 1:
        raise EvaluationError(f"n-best size must be at least 1, got {n}")
    if not 0.0 <= noise <= 1.0:
        raise EvaluationError(f"noise must be in [0, 1], got {noise}")
    tokens = tuple(ref.tokens if isinstance(ref, Utterance) else ref)
    rng = np.random.default_rng(seed)

    candidates: Dict[Phrase, float] = {tokens: 0.0}
    p_edit = noise * edit_rate
    if p_edit > 0 and tokens:
        for _ in range(4 * n):
            hyp, cost = _corrupt(tokens, table, p_edit, rng)
            if cost < candidates.get(hyp, math.inf):
                candidates[hyp] = cost

    items = list(candidates.items())
    perturbation = jitter * noise * rng.standard_normal(len(items))
    scored = [Hypothesis(hyp, -cost + float(d), cost) for (hyp, cost), d in zip(items, perturbation)]
    scored.sort(key=lambda h: -h.acoustic_score)
    return NBestList(tokens, tuple(scored[:n]))


def rescore(
    nbest: NBestList,
    lm_bigram: SentenceScorer,
    lm_trigram: SentenceScorer,
    weight: float = 1.0,
) -> Hypothesis:
    """
    Pick argmax of acoustic_score + weight * trigram logprob.

    Ties go to the higher bigram logprob, then to the earlier hypothesis.
    """
    if weight < 0:
        raise EvaluationError(f"LM weight must be non-negative, got {weight}")
    if len(nbest) == 1:
        return nbest.best

    def key(item):
        index, hyp = item
        combined = hyp.acoustic_score
        if weight > 0:
            combined += weight * lm_trigram.sentence_logprob(hyp.tokens)
        return combined, lm_bigram.sentence_logprob(hyp.tokens), -index

    _, best = max(enumerate(nbest.hypotheses), key=key)
    return best


@dataclass(frozen=True)
class AlignmentCounts:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def alignment_counts(hyp: Sequence[str], ref: Sequence[str]) -> AlignmentCounts:
    """Minimum unit-cost edit alignment of hyp against ref."""
    ops = Levenshtein.editops(list(ref), list(hyp))
    tags = [op.tag for op in ops]
    return AlignmentCounts(
        substitutions=tags.count("replace"),
        deletions=tags.count("delete"),
        insertions=tags.count("insert"),
        reference_length=len(ref),
    )


def word_accuracy(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """
    WA = (N - S - D - I) / N; negative when insertions dominate.

    Raises:
        EvaluationError: empty reference
    """
    if not ref:
        raise EvaluationError("word accuracy needs a non-empty reference")
    counts = alignment_counts(hyp, ref)
    return (counts.reference_length - counts.errors) / counts.reference_length


def format_nbest(nbest: NBestList) -> str:
    """`rank<TAB>score<TAB>tokens` per hypothesis."""
    return "\n".join(
        f"{rank}\t{hyp.acoustic_score:.4f}\t{' '.join(hyp.tokens)}"
        for rank, hyp in enumerate(nbest.hypotheses, 1)
    )


class RecognizerService:
    """Channel plus rescoring, configured from settings."""

    def __init__(self, table: Optional[ConfusionTable] = None):
        self._table = table
        self._tables: Dict[Path, ConfusionTable] = {}

    def table(self, settings: Settings) -> ConfusionTable:
        """The fixed table if one was given, else the table at settings.confusion_file."""
        if self._table is not None:
            return self._table
        path = Path(settings.confusion_file).resolve()
        if path not in self._tables:
            self._tables[path] = load_confusion_table(path)
        return self._tables[path]

    def nbest(self, tokens: Sequence[str], settings: Settings, seed: int) -> NBestList:
        return generate_nbest(
            tokens, self.table(settings), settings.nbest_size, settings.channel_noise, seed,
            edit_rate=settings.channel_edit_rate, jitter=settings.acoustic_jitter,
        )

    def recognize(self, tokens: Sequence[str], pair, settings: Settings, seed: int) -> Hypothesis:
        """Decode a spoken reference with the given LM pair."""
        return rescore(self.nbest(tokens, settings, seed), pair.bigram, pair.trigram, settings.lm_weight)


# Global service instance
recognizer_service = RecognizerService()
