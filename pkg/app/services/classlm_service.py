"""
Word-class n-gram language models.

P(w_i | history) = P(w_i | c_i) * P(c_i | class history). Transitions use
Witten-Bell interpolation stored back-off style: every seen n-gram keeps its
interpolated probability and every seen history keeps T/(N+T).
"""
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from app.core.config import Settings
from app.core.exceptions import CorpusError, EvaluationError, ModelFormatError, ModelTrainingError
from app.models.schemas import Utterance
from app.services.corpus_service import Vocabulary, is_multiword
from app.services.wordclass_service import WordClassMap

logger = structlog.get_logger(__name__)

MAGIC = b"CTXLM1"
FORMAT_VERSION = 1
SMOOTHING_TAGS = {"none": 0, "witten_bell": 1}
_TAG_NAMES = {v: k for k, v in SMOOTHING_TAGS.items()}

History = Tuple[int, ...]


@dataclass(frozen=True)
class PerplexityReport:
    pp: float
    token_count: int
    total_logprob: float
    oov_count: int


@dataclass(frozen=True)
class ModelMeta:
    utterances: int = 0
    multiword_utterances: int = 0
    tokens: int = 0


@dataclass(eq=False)
class ClassNGramModel:
    """
    Immutable once trained; scoring is reentrant.

    `unigram` is indexed by class (K+2 entries, zero for <s>). `histories[n]`
    maps an (n-1)-class history to its back-off weight and `ngrams[n]` maps an
    n-class tuple to its probability, for n in 2..order.
    """
    order: int
    vocab: Vocabulary
    classmap: WordClassMap
    emission: np.ndarray
    unigram: np.ndarray
    histories: Dict[int, Dict[History, float]]
    ngrams: Dict[int, Dict[History, float]]
    smoothing: str = "witten_bell"
    unk_floor: float = 1e-6
    label: str = ""
    meta: ModelMeta = field(default_factory=ModelMeta)

    @classmethod
    def uniform(cls, vocab: Vocabulary) -> "ClassNGramModel":
        """Every clusterable word and </s> equiprobable."""
        classmap = WordClassMap.identity(vocab)
        k = classmap.num_classes
        unigram = np.full(k + 2, 1.0 / (k + 1))
        unigram[classmap.bos_class] = 0.0
        return cls(2, vocab, classmap, np.ones(len(vocab)), unigram, {2: {}}, {2: {}},
                   smoothing="none", label="uniform")

    def class_prob(self, cls: int, history: History) -> float:
        """P(cls | history) with back-off through shorter histories."""
        while history:
            n = len(history) + 1
            p = self.ngrams[n].get(history + (cls,))
            if p is not None:
                return p
            bow = self.histories[n].get(history)
            history = history[1:]
            if bow is not None:
                return bow * self.class_prob(cls, history)
        return float(self.unigram[cls])

    def sentence_logprob(self, tokens: Sequence[str]) -> float:
        """Natural-log probability of <s> tokens </s>; -inf when some factor is 0."""
        ids = self.vocab.encode(tokens)
        assign = self.classmap.assignment
        classes = [self.classmap.bos_class] + [int(assign[i]) for i in ids] + [self.classmap.eos_class]
        total = 0.0
        for i in range(1, len(classes)):
            p = self.class_prob(classes[i], tuple(classes[max(0, i - self.order + 1):i]))
            if i <= len(ids):
                p *= float(self.emission[ids[i - 1]])
            if p <= 0.0:
                return -math.inf
            total += math.log(p)
        return total

    def predicted_classes(self) -> List[int]:
        return [c for c in range(self.classmap.total_classes) if self.unigram[c] > 0.0]


def _class_sequences(corpus: Sequence[Utterance], vocab: Vocabulary, classmap: WordClassMap):
    assign = classmap.assignment
    for utt in corpus:
        ids = vocab.encode(utt.tokens)
        yield ids, [classmap.bos_class] + [int(assign[i]) for i in ids] + [classmap.eos_class]


def train(
    corpus: Sequence[Utterance],
    vocab: Vocabulary,
    classmap: WordClassMap,
    order: int = 2,
    smoothing: str = "witten_bell",
    unk_floor: float = 1e-6,
    prior: Optional[np.ndarray] = None,
    prior_weight: float = 0.0,
    label: str = "",
) -> ClassNGramModel:
    """
    Train a class n-gram model.

    Args:
        corpus: training utterances
        vocab: vocabulary the class map indexes
        classmap: word classes
        order: 2 for first-pass scoring, 3 for rescoring
        smoothing: "witten_bell" or "none"
        unk_floor: emission pseudo-count for words the corpus never shows
        prior: optional word-count vector tying emissions to a larger corpus
        prior_weight: Dirichlet weight of the prior
        label: LM class label recorded in the model

    Raises:
        ModelTrainingError: empty corpus or inconsistent arguments
    """
    if not corpus:
        raise ModelTrainingError(f"insufficient data to train a reliable LM {label!r}: empty corpus")
    if order not in (2, 3):
        raise ModelTrainingError(f"order must be 2 or 3, got {order}")
    if smoothing not in SMOOTHING_TAGS:
        raise ModelTrainingError(f"unknown smoothing {smoothing!r}")
    if len(classmap) != len(vocab):
        raise ModelTrainingError("class map does not cover the vocabulary")
    if unk_floor <= 0:
        raise ModelTrainingError("unk_floor must be positive")

    size = len(vocab)
    word_counts = np.zeros(size)
    counts: Dict[int, Counter] = {n: Counter() for n in range(1, order + 1)}
    tokens = 0
    for ids, seq in _class_sequences(corpus, vocab, classmap):
        np.add.at(word_counts, ids, 1.0)
        tokens += len(ids) + 1
        for i in range(1, len(seq)):
            for n in range(1, order + 1):
                if i - n + 1 >= 0:
                    counts[n][tuple(seq[i - n + 1:i + 1])] += 1

    emission = _emissions(vocab, classmap, word_counts, unk_floor, prior, prior_weight)

    k = classmap.num_classes
    words = np.array(vocab.clusterable_ids)
    members = np.bincount(classmap.assignment[words], minlength=k)
    predicted = [c for c in range(k) if members[c] > 0] + [classmap.eos_class]

    unigram = np.zeros(classmap.total_classes)
    uni_total = sum(counts[1].values())
    if smoothing == "witten_bell":
        distinct = len(counts[1])
        uniform = 1.0 / len(predicted)
        for c in predicted:
            unigram[c] = (counts[1].get((c,), 0) + distinct * uniform) / (uni_total + distinct)
    else:
        for (c,), n in counts[1].items():
            unigram[c] = n / uni_total

    model = ClassNGramModel(
        order, vocab, classmap, emission, unigram, {}, {},
        smoothing=smoothing, unk_floor=unk_floor, label=label,
        meta=ModelMeta(len(corpus), sum(1 for u in corpus if is_multiword(u)), tokens),
    )
    for n in range(2, order + 1):
        history_total: Dict[History, int] = defaultdict(int)
        followers: Dict[History, int] = defaultdict(int)
        for gram, c in counts[n].items():
            history_total[gram[:-1]] += c
            followers[gram[:-1]] += 1
        bows: Dict[History, float] = {}
        probs: Dict[History, float] = {}
        for h in sorted(history_total):
            total, distinct = history_total[h], followers[h]
            bows[h] = distinct / (total + distinct) if smoothing == "witten_bell" else 0.0
        for gram in sorted(counts[n]):
            h = gram[:-1]
            if smoothing == "witten_bell":
                lower = model.class_prob(gram[-1], h[1:])
                probs[gram] = (counts[n][gram] + followers[h] * lower) / (history_total[h] + followers[h])
            else:
                probs[gram] = counts[n][gram] / history_total[h]
        model.histories[n] = bows
        model.ngrams[n] = probs

    logger.debug("class_lm_trained", label=label, order=order, utterances=len(corpus),
                 ngrams=sum(len(t) for t in model.ngrams.values()))
    return model


def _emissions(vocab, classmap, word_counts, eps, prior, prior_weight) -> np.ndarray:
    """P(w|c); eps is a pseudo-count given only to words with no count."""
    words = np.array(vocab.clusterable_ids)
    cls = classmap.assignment[words]
    k = classmap.num_classes
    emission = np.ones(len(vocab))
    if prior is not None and prior_weight > 0:
        prior = np.asarray(prior, dtype=float)
        if prior.shape != (len(vocab),):
            raise ModelTrainingError("emission prior must have one entry per vocabulary word")
        base = _floored(prior[words], eps)
        base = base / np.bincount(cls, weights=base, minlength=k)[cls]
        counts = word_counts[words] + prior_weight * base
    else:
        counts = _floored(word_counts[words], eps)
    emission[words] = counts / np.bincount(cls, weights=counts, minlength=k)[cls]
    return emission


def _floored(counts: np.ndarray, eps: float) -> np.ndarray:
    return np.where(counts > 0, counts, eps)


def sentence_logprob(model: ClassNGramModel, tokens: Sequence[str]) -> float:
    return model.sentence_logprob(tokens)


def perplexity(model: ClassNGramModel, testset: Sequence[Utterance]) -> PerplexityReport:
    """
    Perplexity over a test set; </s> counts as a token, <s> does not.

    Raises:
        EvaluationError: empty test set
    """
    if not testset:
        raise EvaluationError("perplexity of an empty test set")
    total = 0.0
    n = oov = 0
    for utt in testset:
        total += model.sentence_logprob(utt.tokens)
        n += len(utt.tokens) + 1
        oov += sum(1 for t in utt.tokens if model.vocab.lookup(t) == model.vocab.unk_id)
    pp = math.exp(-total / n) if math.isfinite(total) else math.inf
    return PerplexityReport(pp=pp, token_count=n, total_logprob=total, oov_count=oov)


# Serialization

def serialize(model: ClassNGramModel) -> bytes:
    """Little-endian binary encoding; see load_model for the layout."""
    out = bytearray(MAGIC)
    k, size = model.classmap.num_classes, len(model.vocab)
    out += struct.pack("<HBIIBBd", FORMAT_VERSION, model.order, k, size,
                       SMOOTHING_TAGS[model.smoothing], 0, model.unk_floor)
    _pack_str(out, model.label)
    out += struct.pack("<III", model.meta.utterances, model.meta.multiword_utterances, model.meta.tokens)
    for tok in model.vocab.tokens[len(Vocabulary.SPECIALS):]:
        _pack_str(out, tok)
    out += struct.pack("<III", model.vocab.unk_id, model.vocab.bos_id, model.vocab.eos_id)
    out += model.classmap.assignment.astype("<i4").tobytes()
    out += np.asarray(model.emission, dtype="<f8").tobytes()
    out += np.asarray(model.unigram, dtype="<f8").tobytes()
    for n in range(2, model.order + 1):
        for table, width in ((model.histories[n], n - 1), (model.ngrams[n], n)):
            keys = sorted(table)
            out += struct.pack("<I", len(keys))
            out += np.array(keys, dtype="<i4").reshape(len(keys), width).tobytes()
            out += np.array([table[key] for key in keys], dtype="<f8").tobytes()
    return bytes(out)


def _pack_str(out: bytearray, text: str) -> None:
    data = text.encode("utf-8")
    out += struct.pack("<H", len(data)) + data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ModelFormatError(f"truncated model: need {n} bytes", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        start = self.offset
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ModelFormatError(f"invalid UTF-8 string: {e.reason}", start) from e

    def array(self, dtype: str, count: int) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype).copy()


def deserialize(data: bytes) -> ClassNGramModel:
    """
    Inverse of serialize.

    Raises:
        ModelFormatError: bad magic, unsupported version, truncation or
            inconsistent tables, with the byte offset where decoding failed
    """
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise ModelFormatError("bad magic bytes", 0)
    header_at = r.offset
    version, order, k, size, tag, quant, eps = r.unpack("<HBIIBBd")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}", header_at)
    if order not in (2, 3) or tag not in _TAG_NAMES or quant != 0:
        raise ModelFormatError("invalid header fields", header_at)
    label = r.string()
    meta = ModelMeta(*r.unpack("<III"))
    words_at = r.offset
    words = [r.string() for _ in range(size - len(Vocabulary.SPECIALS))]
    specials_at = r.offset
    if r.unpack("<III") != (0, 1, 2):
        raise ModelFormatError("unexpected special token ids", specials_at)
    try:
        vocab = Vocabulary(words)
    except CorpusError as e:
        raise ModelFormatError(f"invalid vocabulary table: {e}", words_at) from e
    assign_at = r.offset
    assignment = r.array("<i4", size).astype(np.int32)
    if assignment.min(initial=0) < 0 or assignment.max(initial=0) > k + 1:
        raise ModelFormatError("class id out of range", assign_at)
    classmap = WordClassMap(assignment, k)
    emission = r.array("<f8", size)
    unigram = r.array("<f8", k + 2)
    histories: Dict[int, Dict[History, float]] = {}
    ngrams: Dict[int, Dict[History, float]] = {}
    for n in range(2, order + 1):
        tables = []
        for width in (n - 1, n):
            (count,) = r.unpack("<I")
            keys = r.array("<i4", count * width).reshape(count, width)
            values = r.array("<f8", count)
            tables.append({tuple(int(x) for x in key): float(v) for key, v in zip(keys, values)})
        histories[n], ngrams[n] = tables
    if r.offset != len(data):
        raise ModelFormatError("trailing bytes after model", r.offset)
    return ClassNGramModel(order, vocab, classmap, emission, unigram, histories, ngrams,
                           smoothing=_TAG_NAMES[tag], unk_floor=eps, label=label, meta=meta)


def save_model(path: Union[str, Path], model: ClassNGramModel) -> int:
    data = serialize(model)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path: Union[str, Path]) -> ClassNGramModel:
    with open(path, "rb") as f:
        return deserialize(f.read())


class ClassLMService:
    """Trains models with the smoothing configuration from settings."""

    def train_from_settings(
        self,
        corpus: Sequence[Utterance],
        vocab: Vocabulary,
        classmap: WordClassMap,
        order: int,
        settings: Settings,
        label: str = "",
        prior: Optional[np.ndarray] = None,
    ) -> ClassNGramModel:
        return train(
            corpus, vocab, classmap, order=order,
            smoothing=settings.smoothing,
            unk_floor=settings.unk_floor,
            prior=prior,
            prior_weight=settings.emission_prior_weight if prior is not None else 0.0,
            label=label,
        )


# Global service instance
class_lm_service = ClassLMService()
