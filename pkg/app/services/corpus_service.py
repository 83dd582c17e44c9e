"""
Corpus data model, tokenization, vocabulary, stratified splitting and the
grammar-based synthetic corpus generator.
"""
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog

from app.core.config import Settings
from app.core.exceptions import CorpusError, GrammarError
from app.models.schemas import (
    SPECIFIC_CLASSES,
    CaseFrame,
    DialogueAct,
    DialogueContext,
    LMClassId,
    TaskParameter,
    Utterance,
)
from app.services.contextmap_service import ClassTrainingStats, classify_context
from app.services.semantics_service import (
    CLOCK_HOUR_WORDS,
    DEFAULT_LEXICON,
    RELATIVE_DAYS,
    WEEK_DAYS,
    SemanticLexicon,
    parse,
)

logger = structlog.get_logger(__name__)

NOISE_TOKEN = "<noise>"

# Training material per LM class in the field corpus: (utterances, words)
REFERENCE_DISTRIBUTION: Dict[LMClassId, Tuple[int, int]] = {
    LMClassId.REQ_DEP_CITY: (375, 873),
    LMClassId.REQ_CITIES: (1808, 6954),
    LMClassId.REQ_ARR_CITY: (374, 846),
    LMClassId.REQ_TIME: (1291, 3945),
    LMClassId.REQ_DATE: (1797, 4943),
    LMClassId.VER_DEP_CITY: (506, 914),
    LMClassId.VER_CITIES: (1804, 3508),
    LMClassId.VER_ARR_CITY: (398, 655),
    LMClassId.VER_TIME: (1386, 2056),
    LMClassId.VER_DATE: (1565, 2317),
}

_R, _V = DialogueAct.REQUEST, DialogueAct.VERIFY
_P = TaskParameter

# Raw dialogue contexts grouped under each LM class
CONTEXT_INVENTORY: Dict[LMClassId, Tuple[DialogueContext, ...]] = {
    LMClassId.REQ_DEP_CITY: (DialogueContext.of(_R, _P.DEP_CITY),),
    LMClassId.REQ_CITIES: (
        DialogueContext.of(_R, _P.DEP_CITY, _P.ARR_CITY),
        DialogueContext.of(_R, _P.ARR_CITY, _P.DEP_CITY),
    ),
    LMClassId.REQ_ARR_CITY: (DialogueContext.of(_R, _P.ARR_CITY),),
    LMClassId.REQ_TIME: (
        DialogueContext.of(_R, _P.DEP_TIME),
        DialogueContext.of(_R, _P.HOUR),
        DialogueContext.of(_R, _P.PART_DAY),
    ),
    LMClassId.REQ_DATE: (
        DialogueContext.of(_R, _P.DEP_DATE),
        DialogueContext.of(_R, _P.WEEK_DAY),
        DialogueContext.of(_R, _P.RELATIVE_DAY),
    ),
    LMClassId.VER_DEP_CITY: (DialogueContext.of(_V, _P.DEP_CITY),),
    LMClassId.VER_CITIES: (
        DialogueContext.of(_V, _P.DEP_CITY, _P.ARR_CITY),
        DialogueContext.of(_V, _P.DEP_CITY, _P.ARR_CITY, _P.PART_DAY),
        DialogueContext.of(_V, _P.DEP_CITY, _P.ARR_CITY, _P.HOUR),
        DialogueContext.of(_V, _P.DEP_CITY, _P.ARR_CITY, _P.DEP_DATE),
        DialogueContext.of(_V, _P.ARR_CITY, _P.DEP_CITY),
    ),
    LMClassId.VER_ARR_CITY: (DialogueContext.of(_V, _P.ARR_CITY),),
    LMClassId.VER_TIME: (
        DialogueContext.of(_V, _P.DEP_TIME),
        DialogueContext.of(_V, _P.HOUR),
        DialogueContext.of(_V, _P.PART_DAY),
        DialogueContext.of(_V, _P.HOUR, _P.PART_DAY),
    ),
    LMClassId.VER_DATE: (
        DialogueContext.of(_V, _P.DEP_DATE),
        DialogueContext.of(_V, _P.WEEK_DAY),
        DialogueContext.of(_V, _P.RELATIVE_DAY),
    ),
}

PLACEHOLDERS = ("dep_city", "arr_city", "hour", "part_day", "date", "week_day", "relative_day")

_TOKEN_RE = re.compile(r"<[a-z]+>|\w+(?:'\w+)*")


def tokenize(text: str, multiword_names: Optional[Iterable[Sequence[str]]] = None) -> List[str]:
    """
    Normalize raw text into tokens.

    Lowercases, strips punctuation, keeps `<markup>` tokens and collapses known
    multiword names (longest match first) into underscore-joined tokens.

    Args:
        text: raw text
        multiword_names: names as word sequences; defaults to the lexicon's stations

    Returns:
        Token list, empty for empty input
    """
    raw = _TOKEN_RE.findall(text.lower())
    if multiword_names is None:
        multiword_names = DEFAULT_LEXICON.multiword_names
    names = {tuple(n) for n in multiword_names if len(n) > 1}
    if not names:
        return raw
    longest = max(len(n) for n in names)
    tokens: List[str] = []
    i = 0
    while i < len(raw):
        for n in range(min(longest, len(raw) - i), 1, -1):
            if tuple(raw[i:i + n]) in names:
                tokens.append("_".join(raw[i:i + n]))
                i += n
                break
        else:
            tokens.append(raw[i])
            i += 1
    return tokens


class Vocabulary:
    """Dense token index with reserved unknown and boundary markers."""

    UNK = "<unk>"
    BOS = "<s>"
    EOS = "</s>"
    SPECIALS = (UNK, BOS, EOS)

    def __init__(self, words: Sequence[str]):
        tokens = list(self.SPECIALS) + list(words)
        self._index = {tok: i for i, tok in enumerate(tokens)}
        if len(self._index) != len(tokens):
            raise CorpusError("vocabulary entries must be distinct")
        self._tokens = tokens
        self.unk_id = 0
        self.bos_id = 1
        self.eos_id = 2

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __iter__(self):
        return iter(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    @property
    def clusterable_ids(self) -> List[int]:
        """Every index except the boundary markers."""
        return [i for i in range(len(self._tokens)) if i not in (self.bos_id, self.eos_id)]

    def token(self, index: int) -> str:
        return self._tokens[index]

    def lookup(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self._index.get(t, self.unk_id) for t in tokens]


def build_vocabulary(corpus: Sequence[Utterance], min_count: int = 1) -> Vocabulary:
    """
    Collect every token seen at least min_count times.

    Raises:
        CorpusError: empty corpus or min_count < 1
    """
    if not corpus:
        raise CorpusError("empty corpus")
    if min_count < 1:
        raise CorpusError("min_count must be at least 1")
    counts = Counter(tok for utt in corpus for tok in utt.tokens)
    words = sorted(
        (w for w, c in counts.items() if c >= min_count and w not in Vocabulary.SPECIALS),
        key=lambda w: (-counts[w], w),
    )
    logger.debug("vocabulary_built", size=len(words) + 3, min_count=min_count)
    return Vocabulary(words)


@dataclass(frozen=True)
class Template:
    weight: float
    text: str
    placeholders: Tuple[str, ...]


@dataclass(frozen=True)
class Grammar:
    """Weighted templates per LM class."""
    templates: Mapping[LMClassId, Tuple[Template, ...]]

    def templates_for(self, lm_class: LMClassId) -> Tuple[Template, ...]:
        return tuple(self.templates.get(lm_class, ()))


_HEADER_RE = re.compile(r"^\[CLASS (.+)\]$")


def parse_grammar(text: str) -> Grammar:
    """
    Parse `[CLASS <label>]` sections of `weight | template` lines.

    Raises:
        GrammarError: unknown class label, template outside a section,
            bad weight or unknown placeholder
    """
    templates: Dict[LMClassId, List[Template]] = {}
    current: Optional[LMClassId] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        header = _HEADER_RE.match(line)
        if header:
            try:
                current = LMClassId(header.group(1).strip())
            except ValueError:
                raise GrammarError(f"line {lineno}: unknown class {header.group(1)!r}")
            if current is LMClassId.CONTEXT_INDEPENDENT:
                raise GrammarError(f"line {lineno}: no templates allowed for {current.value}")
            templates.setdefault(current, [])
            continue
        if current is None:
            raise GrammarError(f"line {lineno}: template outside a [CLASS ...] section")
        weight_text, sep, body = line.partition("|")
        body = body.strip()
        try:
            weight = float(weight_text)
        except ValueError:
            raise GrammarError(f"line {lineno}: bad weight {weight_text.strip()!r}")
        if not sep or not body or weight <= 0:
            raise GrammarError(f"line {lineno}: expected 'weight | template'")
        names = tuple(name for _, name, _, _ in string.Formatter().parse(body) if name)
        unknown = [n for n in names if n not in PLACEHOLDERS]
        if unknown:
            raise GrammarError(f"line {lineno}: unknown placeholder {unknown[0]!r}")
        templates[current].append(Template(weight, body, names))
    return Grammar({cls: tuple(ts) for cls, ts in templates.items()})


def load_grammar(path: Union[str, Path]) -> Grammar:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        logger.error("grammar_read_failed", path=str(path), error=str(e))
        raise GrammarError(f"cannot read grammar {path}: {e}") from e
    return parse_grammar(text)


def largest_remainder(weights: Sequence[float], total: int) -> List[int]:
    """Integer quotas proportional to weights summing exactly to total."""
    w = np.asarray(weights, dtype=float)
    shares = w / w.sum() * total
    quotas = np.floor(shares).astype(int)
    order = sorted(range(len(w)), key=lambda i: (-(shares[i] - quotas[i]), i))
    for i in order[: total - int(quotas.sum())]:
        quotas[i] += 1
    return [int(q) for q in quotas]


def scaled_class_counts(scale: float) -> Dict[LMClassId, int]:
    """Per-class utterance counts of the reference distribution times scale."""
    if scale < 0:
        raise CorpusError("corpus scale must be non-negative")
    return {cls: int(round(utts * scale)) for cls, (utts, _) in REFERENCE_DISTRIBUTION.items()}


def _realize(template: Template, rng: np.random.Generator, lex: SemanticLexicon):
    stations = sorted(lex.stations)
    hours = [w for w in CLOCK_HOUR_WORDS if w in lex.hour_words]
    part_days = sorted(w for w, p in lex.part_day_words.items() if w == p.value.lower())
    week_days = [w for w in WEEK_DAYS if w in lex.date_words]
    relative_days = [w for w in RELATIVE_DAYS if w in lex.date_words]

    surface: Dict[str, str] = {}
    frame: Dict[str, object] = {}
    names = template.placeholders
    if "dep_city" in names or "arr_city" in names:
        dep_i, arr_i = rng.choice(len(stations), size=2, replace=False)
        surface["dep_city"] = stations[int(dep_i)]
        surface["arr_city"] = stations[int(arr_i)]
        if "dep_city" in names:
            frame["dep_city"] = lex.station_value(surface["dep_city"])
        if "arr_city" in names:
            frame["arr_city"] = lex.station_value(surface["arr_city"])
    if "hour" in names:
        surface["hour"] = hours[int(rng.integers(len(hours)))]
        frame["hour"] = lex.hour_words[surface["hour"]]
    if "part_day" in names:
        surface["part_day"] = part_days[int(rng.integers(len(part_days)))]
        frame["part_day"] = lex.part_day_words[surface["part_day"]]
    for name, pool in (("date", week_days + relative_days),
                       ("week_day", week_days),
                       ("relative_day", relative_days)):
        if name in names:
            surface[name] = pool[int(rng.integers(len(pool)))]
            frame["dep_date"] = lex.date_words[surface[name]]

    tokens = tuple(tokenize(template.text.format(**surface), lex.multiword_names))
    confirm = next((lex.confirm_words[t] for t in tokens if t in lex.confirm_words), None)
    return tokens, CaseFrame(confirm=confirm, **frame)


def generate_synthetic_corpus(
    grammar: Grammar,
    class_counts: Mapping[LMClassId, int],
    seed: int,
    lexicon: Optional[SemanticLexicon] = None,
    noise_rate: float = 0.0,
) -> List[Utterance]:
    """
    Generate utterances per LM class from weighted templates.

    Template usage follows largest-remainder quotas of the weights, so class
    composition is exact; slot fillers, raw contexts and order are drawn from
    a generator seeded with seed.

    Args:
        grammar: templates per class
        class_counts: utterances to generate per class
        seed: random seed
        lexicon: slot vocabulary, defaults to the built-in lexicon
        noise_rate: probability of a leading `<noise>` token

    Returns:
        Utterances in class-table order

    Raises:
        CorpusError: negative count
        GrammarError: class without templates, or a template whose parse
            disagrees with its bindings
    """
    lex = lexicon or DEFAULT_LEXICON
    rng = np.random.default_rng(seed)
    corpus: List[Utterance] = []
    for lm_class in SPECIFIC_CLASSES:
        count = int(class_counts.get(lm_class, 0))
        if count < 0:
            raise CorpusError(f"negative count for class {lm_class.value!r}")
        if count == 0:
            continue
        templates = grammar.templates_for(lm_class)
        if not templates:
            raise GrammarError(f"class {lm_class.value!r} has {count} utterances but no templates")
        quotas = largest_remainder([t.weight for t in templates], count)
        plan = [t for t, q in zip(templates, quotas) for _ in range(q)]
        contexts = CONTEXT_INVENTORY[lm_class]
        for j in rng.permutation(len(plan)):
            template = plan[int(j)]
            context = contexts[int(rng.integers(len(contexts)))]
            tokens, frame = _realize(template, rng, lex)
            parsed = parse(tokens, lex)
            if parsed != frame:
                raise GrammarError(
                    f"template {template.text!r} of class {lm_class.value!r} parses to "
                    f"{parsed.to_text()!r}, expected {frame.to_text()!r}"
                )
            if noise_rate > 0 and rng.random() < noise_rate:
                tokens = (NOISE_TOKEN,) + tokens
            corpus.append(Utterance(f"syn-{seed}-{len(corpus):05d}", tokens, context, frame))
    logger.info("synthetic_corpus_generated", utterances=len(corpus), seed=seed)
    return corpus


@dataclass(frozen=True)
class CorpusSplit:
    train: Tuple[Utterance, ...]
    test: Tuple[Utterance, ...]
    seed: int


def group_by_class(corpus: Iterable[Utterance]) -> Dict[LMClassId, List[Utterance]]:
    """Utterances per LM class, classes in table order, corpus order inside."""
    groups: Dict[LMClassId, List[Utterance]] = {}
    for utt in corpus:
        groups.setdefault(classify_context(utt.context), []).append(utt)
    order = {cls: i for i, cls in enumerate(LMClassId)}
    return dict(sorted(groups.items(), key=lambda kv: order[kv[0]]))


def split_corpus(corpus: Sequence[Utterance], test_ratio: float, seed: int) -> CorpusSplit:
    """
    Deterministic train/test split stratified by LM class.

    Args:
        corpus: utterances
        test_ratio: held-out fraction, strictly between 0 and 1
        seed: random seed

    Returns:
        Split with round(test_ratio * len(corpus)) test utterances

    Raises:
        CorpusError: ratio outside (0, 1) or fewer than two utterances
    """
    if not 0.0 < test_ratio < 1.0:
        raise CorpusError(f"test ratio must be in (0, 1), got {test_ratio}")
    if len(corpus) < 2:
        raise CorpusError("splitting needs at least 2 utterances")

    by_class: Dict[LMClassId, List[int]] = {}
    for i, utt in enumerate(corpus):
        by_class.setdefault(classify_context(utt.context), []).append(i)
    rank = {cls: i for i, cls in enumerate(LMClassId)}
    groups = sorted(by_class.items(), key=lambda kv: rank[kv[0]])
    sizes = [len(members) for _, members in groups]
    n_test = int(round(test_ratio * len(corpus)))

    shares = [s * test_ratio for s in sizes]
    alloc = [min(int(np.floor(sh)), max(s - 1, 0)) for sh, s in zip(shares, sizes)]
    order = sorted(range(len(groups)), key=lambda i: (-(shares[i] - np.floor(shares[i])), i))
    remaining = n_test - sum(alloc)
    for caps in ([max(s - 1, 0) for s in sizes], sizes):
        while remaining > 0:
            progress = False
            for i in order:
                if remaining == 0:
                    break
                if alloc[i] < caps[i]:
                    alloc[i] += 1
                    remaining -= 1
                    progress = True
            if not progress:
                break

    rng = np.random.default_rng(seed)
    test_ids = set()
    for (lm_class, members), k, size in zip(groups, alloc, sizes):
        perm = rng.permutation(size)
        test_ids.update(members[int(p)] for p in perm[:k])
        if k == size:
            logger.warning("stratification_emptied_class", lm_class=lm_class.value, utterances=size)

    train = tuple(u for i, u in enumerate(corpus) if i not in test_ids)
    test = tuple(u for i, u in enumerate(corpus) if i in test_ids)
    return CorpusSplit(train=train, test=test, seed=seed)


def is_multiword(utt: Utterance) -> bool:
    """More than one token once noise markers are ignored."""
    return sum(1 for t in utt.tokens if t != NOISE_TOKEN) > 1


def training_stats(corpus: Iterable[Utterance]) -> ClassTrainingStats:
    utts = list(corpus)
    return ClassTrainingStats(
        utterances=len(utts),
        multiword_utterances=sum(1 for u in utts if is_multiword(u)),
    )


def corpus_distribution(corpus: Sequence[Utterance]) -> pd.DataFrame:
    """Utterances and words per LM class, in class-table order."""
    groups = group_by_class(corpus)
    rows = []
    for lm_class in SPECIFIC_CLASSES:
        members = groups.get(lm_class, [])
        rows.append({
            "class": lm_class.value,
            "utterances": len(members),
            "words": sum(len(u.tokens) for u in members),
            "multiword": sum(1 for u in members if is_multiword(u)),
        })
    return pd.DataFrame(rows, columns=["class", "utterances", "words", "multiword"])


def write_corpus(path: Union[str, Path], corpus: Iterable[Utterance]) -> None:
    """Write `id<TAB>act<TAB>params<TAB>frame<TAB>text` lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for utt in corpus:
            params = ",".join(p.value for p in utt.context.params)
            f.write(f"{utt.id}\t{utt.context.act.value}\t{params}\t{utt.ref_frame.to_text()}\t{utt.text}\n")


def read_corpus(path: Union[str, Path]) -> List[Utterance]:
    """
    Read a corpus file written by write_corpus.

    Raises:
        CorpusError: unreadable file or malformed line
    """
    corpus = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise CorpusError(f"cannot read corpus {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise CorpusError(f"{path}:{lineno}: expected 5 tab-separated fields")
        utt_id, act, params, frame, text = fields
        try:
            context = DialogueContext(DialogueAct(act), tuple(TaskParameter(p) for p in params.split(",")))
            ref = CaseFrame.from_text(frame)
        except (ValueError, CorpusError) as e:
            raise CorpusError(f"{path}:{lineno}: {e}") from e
        tokens = tuple(text.split())
        if not tokens:
            raise CorpusError(f"{path}:{lineno}: empty utterance")
        corpus.append(Utterance(utt_id, tokens, context, ref))
    return corpus


class CorpusService:
    """Builds corpora from settings."""

    def __init__(self, lexicon: Optional[SemanticLexicon] = None):
        self.lexicon = lexicon or DEFAULT_LEXICON

    def generate(self, settings: Settings, seed: Optional[int] = None) -> List[Utterance]:
        """Synthetic corpus at settings.corpus_scale."""
        grammar = load_grammar(settings.grammar_file)
        return generate_synthetic_corpus(
            grammar,
            scaled_class_counts(settings.corpus_scale),
            settings.seed if seed is None else seed,
            lexicon=self.lexicon,
            noise_rate=settings.noise_token_rate,
        )

    def generate_split(self, settings: Settings, seed: Optional[int] = None) -> CorpusSplit:
        seed = settings.seed if seed is None else seed
        return split_corpus(self.generate(settings, seed), settings.test_ratio, seed)


# Global service instance
corpus_service = CorpusService()
