"""
Tests for exchange word clustering.
"""
import itertools
import math

import numpy as np
import pytest

from app.core.exceptions import ClusteringError
from app.services.corpus_service import build_vocabulary
from app.services.wordclass_service import (
    ClusterStats,
    WordClassMap,
    class_log_likelihood,
    cluster_words,
    compute_cluster_stats,
    count_words,
    exchange_cluster,
    read_class_map,
    write_class_map,
)


@pytest.fixture
def alternating(make_utt):
    return [make_utt("x a y b x a y b")]


class TestCounts:

    def test_boundaries_are_counted(self, make_utt):
        """Sentence boundaries take part in the class-bigram counts."""
        corpus = [make_utt("a b"), make_utt("a")]
        vocab = build_vocabulary(corpus)
        counts = count_words(corpus, vocab)
        assert counts.total == 7
        assert counts.bigram.sum() == counts.total - counts.sentences
        assert counts.bigram[vocab.bos_id, vocab.lookup("a")] == 2

    def test_single_class_formula(self, make_utt):
        corpus = [make_utt("a b a b")]
        vocab = build_vocabulary(corpus)
        stats = compute_cluster_stats(count_words(corpus, vocab), WordClassMap.single(vocab))
        expected = 3 * math.log(3) - 8 * math.log(4) + 4 * math.log(2)
        assert class_log_likelihood(stats) == pytest.approx(expected)

    def test_inconsistent_stats(self):
        stats = ClusterStats(
            class_bigram=np.array([[2.0]]),
            class_counts=np.array([3.0]),
            word_counts=np.array([2.0]),
            total=3,
            sentences=1,
        )
        with pytest.raises(ClusteringError):
            class_log_likelihood(stats)


class TestExchange:

    def test_hand_worked_case(self, alternating):
        vocab = build_vocabulary(alternating)
        result = exchange_cluster(alternating, 2, vocab=vocab)
        initial = 8 * math.log(2) + 3 * math.log(3) - 12 * math.log(6)
        final = -12 * math.log(4) + 3 * math.log(3) + 8 * math.log(2)
        assert result.ll_trace[0] == pytest.approx(initial)
        assert result.log_likelihood == pytest.approx(final)
        assert result.ll_trace[-1] == pytest.approx(final)
        assert result.sweeps == 2

        cls = {w: result.classmap.class_of(vocab.lookup(w)) for w in ("a", "b", "x", "y", "<unk>")}
        assert cls["a"] == cls["b"]
        assert cls["x"] == cls["y"] == cls["<unk>"]
        assert cls["a"] != cls["x"]

    def test_trace_never_decreases(self, toy_corpus):
        result = exchange_cluster(toy_corpus, 5, seed=3)
        assert all(b >= a - 1e-9 for a, b in zip(result.ll_trace, result.ll_trace[1:]))
        assert result.log_likelihood == pytest.approx(result.ll_trace[-1])

    def test_single_class_matches_formula(self, make_utt):
        corpus = [make_utt("a b a b")]
        result = exchange_cluster(corpus, 1)
        assert result.moves == 0
        assert result.log_likelihood == pytest.approx(3 * math.log(3) - 8 * math.log(4) + 4 * math.log(2))

    def test_boundary_classes_reserved(self, toy_corpus):
        vocab = build_vocabulary(toy_corpus)
        classmap = cluster_words(toy_corpus, 4, seed=1, vocab=vocab)
        assert classmap.class_of(vocab.bos_id) == 4
        assert classmap.class_of(vocab.eos_id) == 5
        assert all(classmap.class_of(w) < 4 for w in vocab.clusterable_ids)

    def test_deterministic_per_seed(self, toy_corpus):
        assert cluster_words(toy_corpus, 4, seed=9) == cluster_words(toy_corpus, 4, seed=9)

    def test_zero_sweeps_keeps_initial_assignment(self, alternating):
        """With no sweeps the frequency-ranked initial classes are returned."""
        result = exchange_cluster(alternating, 2, max_sweeps=0)
        assert result.sweeps == 0
        assert result.log_likelihood == pytest.approx(result.ll_trace[0])

    @pytest.mark.parametrize("k", [0, 6])
    def test_class_count_out_of_range(self, alternating, k):
        # five clusterable words: a b x y <unk>
        with pytest.raises(ClusteringError):
            exchange_cluster(alternating, k)

    def test_empty_corpus(self):
        with pytest.raises(ClusteringError):
            exchange_cluster([], 2)

    def test_identity_map(self, alternating):
        vocab = build_vocabulary(alternating)
        identity = WordClassMap.identity(vocab)
        assert identity.num_classes == len(vocab) - 2
        assert len(set(identity.assignment.tolist())) == len(vocab)

    def test_incomplete_assignment_rejected(self, alternating):
        vocab = build_vocabulary(alternating)
        with pytest.raises(ClusteringError):
            WordClassMap.from_classes(vocab, {vocab.lookup("a"): 0}, 2)


class TestClassMapFile:

    def test_round_trip(self, toy_corpus, tmp_path):
        vocab = build_vocabulary(toy_corpus)
        classmap = cluster_words(toy_corpus, 4, seed=2, vocab=vocab)
        path = tmp_path / "classes.txt"
        write_class_map(path, classmap, vocab)
        lines = path.read_text().splitlines()
        assert lines[0] == "K=4"
        assert len(lines) == len(vocab) + 1
        assert read_class_map(path, vocab) == classmap

    def test_missing_header(self, toy_corpus, tmp_path):
        path = tmp_path / "classes.txt"
        path.write_text("a\t0\n")
        with pytest.raises(ClusteringError):
            read_class_map(path, build_vocabulary(toy_corpus))

    def test_missing_word(self, alternating, tmp_path):
        vocab = build_vocabulary(alternating)
        path = tmp_path / "classes.txt"
        path.write_text("K=1\na\t0\n")
        with pytest.raises(ClusteringError, match="no class"):
            read_class_map(path, vocab)


def brute_force_best(corpus, vocab, k):
    counts = count_words(corpus, vocab)
    words = vocab.clusterable_ids
    best = -math.inf
    for labels in itertools.product(range(k), repeat=len(words)):
        classmap = WordClassMap.from_classes(vocab, dict(zip(words, labels)), k)
        best = max(best, class_log_likelihood(compute_cluster_stats(counts, classmap)))
    return best


def random_corpus(rng, make_utt, alphabet="abcde"):
    return [make_utt(" ".join(alphabet[int(i)] for i in rng.integers(len(alphabet), size=int(rng.integers(1, 7)))))
            for _ in range(int(rng.integers(1, 6)))]


class TestExhaustiveOracle:

    @pytest.mark.parametrize("k", [2, 4])
    def test_alternating_corpus_reaches_optimum(self, alternating, k):
        vocab = build_vocabulary(alternating)
        result = exchange_cluster(alternating, k, vocab=vocab)
        assert result.log_likelihood == pytest.approx(brute_force_best(alternating, vocab, k))

    def test_never_beats_oracle(self, make_utt):
        """Greedy likelihood never exceeds the exhaustive optimum on tiny vocabularies."""
        rng = np.random.default_rng(21)
        for _ in range(20):
            corpus = random_corpus(rng, make_utt)
            vocab = build_vocabulary(corpus)
            k = min(3, len(vocab.clusterable_ids))
            result = exchange_cluster(corpus, k, vocab=vocab)
            assert result.ll_trace[0] - 1e-9 <= result.log_likelihood <= brute_force_best(corpus, vocab, k) + 1e-9

    def test_monotone_on_random_corpora(self, make_utt):
        rng = np.random.default_rng(4)
        for i in range(100):
            corpus = random_corpus(rng, make_utt)
            k = int(rng.integers(1, len(build_vocabulary(corpus).clusterable_ids) + 1))
            trace = exchange_cluster(corpus, k, seed=i).ll_trace
            assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))

    def test_unused_class_leaves_likelihood(self, alternating):
        """An empty class contributes nothing to the likelihood."""
        vocab = build_vocabulary(alternating)
        counts = count_words(alternating, vocab)
        classes = {w: i % 2 for i, w in enumerate(vocab.clusterable_ids)}
        two = class_log_likelihood(compute_cluster_stats(counts, WordClassMap.from_classes(vocab, classes, 2)))
        three = class_log_likelihood(compute_cluster_stats(counts, WordClassMap.from_classes(vocab, classes, 3)))
        assert three == pytest.approx(two)
