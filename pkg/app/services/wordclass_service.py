"""
Maximum-likelihood word clustering with the exchange algorithm.

Objective (natural log, constants dropped):

    LL = sum N(c1,c2) ln N(c1,c2) - 2 sum N(c) ln N(c) + sum N(w) ln N(w)

Counts include the sentence boundary tokens; <s> and </s> live in reserved
singleton classes K and K+1 and are never moved.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from app.core.exceptions import ClusteringError
from app.models.schemas import Utterance
from app.services.corpus_service import Vocabulary, build_vocabulary

logger = structlog.get_logger(__name__)

MOVE_TOLERANCE = 1e-9


def xlogx(x: np.ndarray) -> np.ndarray:
    """Elementwise x ln x with 0 ln 0 = 0."""
    x = np.asarray(x, dtype=float)
    return x * np.log(np.where(x > 0, x, 1.0))


@dataclass(frozen=True, eq=False)
class WordClassMap:
    """Total assignment of vocabulary indices to classes 0..K+1."""
    assignment: np.ndarray
    num_classes: int

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=np.int32)
        assignment.setflags(write=False)
        object.__setattr__(self, "assignment", assignment)

    @property
    def bos_class(self) -> int:
        return self.num_classes

    @property
    def eos_class(self) -> int:
        return self.num_classes + 1

    @property
    def total_classes(self) -> int:
        return self.num_classes + 2

    def class_of(self, word_id: int) -> int:
        return int(self.assignment[word_id])

    def members(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cls)

    def __len__(self) -> int:
        return len(self.assignment)

    def __eq__(self, other) -> bool:
        return (isinstance(other, WordClassMap)
                and self.num_classes == other.num_classes
                and np.array_equal(self.assignment, other.assignment))

    @classmethod
    def from_classes(cls, vocab: Vocabulary, classes: Dict[int, int], num_classes: int) -> "WordClassMap":
        """Build from word-index -> class for every clusterable word."""
        assignment = np.full(len(vocab), -1, dtype=np.int32)
        for word_id, c in classes.items():
            assignment[word_id] = c
        assignment[vocab.bos_id] = num_classes
        assignment[vocab.eos_id] = num_classes + 1
        words = vocab.clusterable_ids
        if (assignment < 0).any() or (assignment[words] >= num_classes).any():
            raise ClusteringError("class map must assign every word to a class in 0..K-1")
        return cls(assignment, num_classes)

    @classmethod
    def identity(cls, vocab: Vocabulary) -> "WordClassMap":
        """One class per clusterable word (word-level model)."""
        words = vocab.clusterable_ids
        return cls.from_classes(vocab, {w: i for i, w in enumerate(words)}, len(words))

    @classmethod
    def single(cls, vocab: Vocabulary) -> "WordClassMap":
        return cls.from_classes(vocab, {w: 0 for w in vocab.clusterable_ids}, 1)


@dataclass(frozen=True, eq=False)
class WordCounts:
    """Word bigram matrix and unigram counts over boundary-padded sentences."""
    bigram: np.ndarray
    unigram: np.ndarray
    sentences: int

    @property
    def total(self) -> int:
        return int(self.unigram.sum())


def count_words(corpus: Sequence[Utterance], vocab: Vocabulary) -> WordCounts:
    size = len(vocab)
    bigram = np.zeros((size, size), dtype=float)
    unigram = np.zeros(size, dtype=float)
    for utt in corpus:
        ids = np.array([vocab.bos_id] + vocab.encode(utt.tokens) + [vocab.eos_id])
        np.add.at(bigram, (ids[:-1], ids[1:]), 1.0)
        np.add.at(unigram, ids, 1.0)
    return WordCounts(bigram, unigram, len(corpus))


@dataclass(frozen=True, eq=False)
class ClusterStats:
    """Class bigram, class and word counts for one clustering."""
    class_bigram: np.ndarray
    class_counts: np.ndarray
    word_counts: np.ndarray
    total: int
    sentences: int


def compute_cluster_stats(counts: WordCounts, classmap: WordClassMap) -> ClusterStats:
    c = classmap.total_classes
    assign = classmap.assignment
    rows, cols = np.nonzero(counts.bigram)
    class_bigram = np.zeros((c, c), dtype=float)
    np.add.at(class_bigram, (assign[rows], assign[cols]), counts.bigram[rows, cols])
    class_counts = np.bincount(assign, weights=counts.unigram, minlength=c).astype(float)
    return ClusterStats(class_bigram, class_counts, counts.unigram.copy(), counts.total, counts.sentences)


def class_log_likelihood(stats: ClusterStats) -> float:
    """
    Class-bigram training log-likelihood, natural log.

    Raises:
        ClusteringError: counts do not add up
    """
    n = stats.total
    if not np.isclose(stats.word_counts.sum(), n) or not np.isclose(stats.class_counts.sum(), n):
        raise ClusteringError("word and class counts must both sum to the token total")
    if not np.isclose(stats.class_bigram.sum(), n - stats.sentences):
        raise ClusteringError("class bigram counts must sum to tokens minus sentences")
    if (stats.class_bigram < 0).any() or (stats.class_counts < 0).any():
        raise ClusteringError("negative counts")
    return float(
        xlogx(stats.class_bigram).sum()
        - 2.0 * xlogx(stats.class_counts).sum()
        + xlogx(stats.word_counts).sum()
    )


@dataclass(frozen=True, eq=False)
class ClusterResult:
    classmap: WordClassMap
    log_likelihood: float
    ll_trace: List[float] = field(default_factory=list)
    sweeps: int = 0
    moves: int = 0


class ExchangeClusterer:
    """Greedy exchange over a fixed word-count table."""

    def __init__(self, counts: WordCounts, vocab: Vocabulary):
        self.counts = counts
        self.vocab = vocab

    def initial_order(self, seed: Optional[int]) -> List[int]:
        """Clusterable words by descending count; a seed shuffles equal counts."""
        unigram = self.counts.unigram
        order = sorted(self.vocab.clusterable_ids, key=lambda w: (-unigram[w], w))
        if seed is None:
            return order
        rng = np.random.default_rng(seed)
        shuffled: List[int] = []
        start = 0
        while start < len(order):
            end = start
            while end < len(order) and unigram[order[end]] == unigram[order[start]]:
                end += 1
            block = order[start:end]
            shuffled.extend(block[int(i)] for i in rng.permutation(len(block)))
            start = end
        return shuffled

    def _gains(self, cm, nc, r, l, s, n):
        rowg = (xlogx(cm + r[None, :]) - xlogx(cm)).sum(axis=1)
        colg = (xlogx(cm + l[:, None]) - xlogx(cm)).sum(axis=0)
        d = np.diag(cm)
        diag = xlogx(d + r + l + s) - xlogx(d + r) - xlogx(d + l) + xlogx(d)
        return rowg + colg + diag - 2.0 * (xlogx(nc + n) - xlogx(nc))

    def run(self, num_classes: int, max_sweeps: int, seed: Optional[int] = None) -> ClusterResult:
        vocab = self.vocab
        words = self.initial_order(seed)
        k = num_classes
        classes = {w: min(rank, k - 1) for rank, w in enumerate(words)}
        classmap = WordClassMap.from_classes(vocab, classes, k)
        assign = classmap.assignment.copy()

        stats = compute_cluster_stats(self.counts, classmap)
        cm = stats.class_bigram.copy()
        nc = stats.class_counts.copy()
        sizes = np.bincount(assign[vocab.clusterable_ids], minlength=classmap.total_classes)
        ll = class_log_likelihood(stats)
        trace = [ll]
        w_bigram = self.counts.bigram
        w_unigram = self.counts.unigram
        total_classes = classmap.total_classes

        sweeps = moves = 0
        for _ in range(max_sweeps):
            sweeps += 1
            moved = 0
            for w in words:
                a = int(assign[w])
                n = w_unigram[w]
                if n == 0 or sizes[a] == 1:
                    continue
                r = np.bincount(assign, weights=w_bigram[w], minlength=total_classes)
                l = np.bincount(assign, weights=w_bigram[:, w], minlength=total_classes)
                s = w_bigram[w, w]
                cm[a, :] -= r
                cm[:, a] -= l
                cm[a, a] += s
                nc[a] -= n
                r[a] -= s
                l[a] -= s

                gains = self._gains(cm, nc, r, l, s, n)
                gains[k:] = -np.inf
                best = int(np.argmax(gains))
                target = best if gains[best] - gains[a] > MOVE_TOLERANCE else a

                cm[target, :] += r
                cm[:, target] += l
                cm[target, target] += s
                nc[target] += n
                if target != a:
                    ll += float(gains[target] - gains[a])
                    trace.append(ll)
                    assign[w] = target
                    sizes[a] -= 1
                    sizes[target] += 1
                    moved += 1
            moves += moved
            if moved == 0:
                break

        final = WordClassMap(assign, k)
        final_ll = class_log_likelihood(compute_cluster_stats(self.counts, final))
        logger.info("words_clustered", classes=k, sweeps=sweeps, moves=moves, log_likelihood=round(final_ll, 4))
        return ClusterResult(final, final_ll, trace, sweeps, moves)


def exchange_cluster(
    corpus: Sequence[Utterance],
    num_classes: int,
    max_sweeps: int = 10,
    seed: Optional[int] = None,
    vocab: Optional[Vocabulary] = None,
) -> ClusterResult:
    """
    Cluster vocabulary words into num_classes classes.

    Args:
        corpus: training utterances
        num_classes: K, between 1 and the number of clusterable words
        max_sweeps: bound on full passes over the words
        seed: shuffles equal-count words in the initial order; None keeps
            vocabulary order
        vocab: vocabulary, built from corpus when omitted

    Returns:
        Clustering with its log-likelihood and the trace over accepted moves

    Raises:
        ClusteringError: empty corpus or K out of range
    """
    if not corpus:
        raise ClusteringError("cannot cluster an empty corpus")
    vocab = vocab or build_vocabulary(corpus)
    clusterable = len(vocab.clusterable_ids)
    if not 1 <= num_classes <= clusterable:
        raise ClusteringError(f"number of classes must be in 1..{clusterable}, got {num_classes}")
    if max_sweeps < 0:
        raise ClusteringError("max_sweeps must be non-negative")
    return ExchangeClusterer(count_words(corpus, vocab), vocab).run(num_classes, max_sweeps, seed)


def cluster_words(
    corpus: Sequence[Utterance],
    num_classes: int,
    max_sweeps: int = 10,
    seed: Optional[int] = None,
    vocab: Optional[Vocabulary] = None,
) -> WordClassMap:
    return exchange_cluster(corpus, num_classes, max_sweeps, seed, vocab).classmap


def write_class_map(path: Union[str, Path], classmap: WordClassMap, vocab: Vocabulary) -> None:
    """Header `K=<int>`, then `word<TAB>class` sorted by word."""
    rows = sorted((vocab.token(i), classmap.class_of(i)) for i in range(len(vocab)))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"K={classmap.num_classes}\n")
        for word, cls in rows:
            f.write(f"{word}\t{cls}\n")


def read_class_map(path: Union[str, Path], vocab: Vocabulary) -> WordClassMap:
    """
    Read a class map written by write_class_map.

    Raises:
        ClusteringError: malformed file or a vocabulary word without a class
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ClusteringError(f"cannot read class map {path}: {e}") from e
    if not lines or not lines[0].startswith("K="):
        raise ClusteringError(f"{path}: missing K=<int> header")
    try:
        k = int(lines[0][2:])
        entries: Dict[str, int] = {}
        for line in lines[1:]:
            if line:
                word, cls = line.split("\t")
                entries[word] = int(cls)
    except ValueError as e:
        raise ClusteringError(f"{path}: malformed class map line: {e}") from e
    missing = [w for w in vocab if w not in entries]
    if missing:
        raise ClusteringError(f"{path}: no class for {missing[0]!r}")
    return WordClassMap.from_classes(vocab, {vocab.lookup(w): entries[w] for w in vocab.tokens
                                             if vocab.lookup(w) in vocab.clusterable_ids}, k)
