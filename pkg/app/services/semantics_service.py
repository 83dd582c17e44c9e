"""
Robust partial parser from recognized tokens to task case frames, and the
sentence-understanding metric.
"""
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import structlog

from app.core.exceptions import EvaluationError
from app.models.schemas import CaseFrame, Confirm, PartDay

logger = structlog.get_logger(__name__)

STATIONS: Tuple[str, ...] = (
    "alessandria", "ancona", "ascoli_piceno", "bari", "bergamo", "bologna",
    "brescia", "cagliari", "catania", "como", "firenze", "genova",
    "la_spezia", "lecce", "livorno", "messina", "milano", "modena",
    "napoli", "padova", "palermo", "parma", "perugia", "pescara", "pisa",
    "reggio_calabria", "roma", "salerno", "siena", "torino", "trento",
    "trieste", "udine", "venezia", "verona",
)

HOUR_WORDS: Dict[str, int] = {
    "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6,
    "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11,
    "twelve": 12, "noon": 12, "midnight": 0,
}

PART_DAY_WORDS: Dict[str, PartDay] = {
    "morning": PartDay.MORNING,
    "afternoon": PartDay.AFTERNOON,
    "evening": PartDay.EVENING,
    "tonight": PartDay.EVENING,
}

WEEK_DAYS: Tuple[str, ...] = (
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
)
RELATIVE_DAYS: Tuple[str, ...] = ("today", "tomorrow")

# Hour words usable with "o'clock"
CLOCK_HOUR_WORDS: Tuple[str, ...] = tuple(w for w, h in HOUR_WORDS.items() if 1 <= h <= 12 and w != "noon")

CONFIRM_WORDS: Dict[str, Confirm] = {
    "yes": Confirm.YES,
    "correct": Confirm.YES,
    "no": Confirm.NO,
    "wrong": Confirm.NO,
}


@dataclass(frozen=True)
class SemanticLexicon:
    """Word categories the parser spots; a station always wins over other readings."""
    stations: FrozenSet[str]
    hour_words: Dict[str, int]
    part_day_words: Dict[str, PartDay]
    date_words: Dict[str, str]
    confirm_words: Dict[str, Confirm]
    dep_markers: FrozenSet[str] = frozenset({"from"})
    arr_markers: FrozenSet[str] = frozenset({"to"})
    ambiguous: FrozenSet[str] = field(init=False, default=frozenset())

    def __post_init__(self):
        seen: Dict[str, int] = {}
        for group in (self.stations, self.hour_words, self.part_day_words,
                      self.date_words, self.confirm_words):
            for word in group:
                seen[word] = seen.get(word, 0) + 1
        object.__setattr__(
            self, "ambiguous", frozenset(w for w, n in seen.items() if n > 1)
        )

    @classmethod
    def default(cls) -> "SemanticLexicon":
        dates = {w: w.upper() for w in WEEK_DAYS + RELATIVE_DAYS}
        return cls(
            stations=frozenset(STATIONS),
            hour_words=dict(HOUR_WORDS),
            part_day_words=dict(PART_DAY_WORDS),
            date_words=dates,
            confirm_words=dict(CONFIRM_WORDS),
        )

    @property
    def multiword_names(self) -> List[Tuple[str, ...]]:
        """Station names spelled with more than one word, as token tuples."""
        return sorted(tuple(s.split("_")) for s in self.stations if "_" in s)

    def station_value(self, token: str) -> str:
        return token.upper()


DEFAULT_LEXICON = SemanticLexicon.default()


def parse(tokens: Sequence[str], lex: Optional[SemanticLexicon] = None) -> CaseFrame:
    """
    Map a token sequence to a case frame.

    Confirmations and slot values are spotted first (first occurrence wins);
    city roles come from a preceding from/to marker, and unmarked cities then
    fill departure before arrival. Unknown tokens are skipped.

    Args:
        tokens: recognized tokens
        lex: lexicon, defaults to the built-in one

    Returns:
        Case frame, possibly empty
    """
    lex = lex or DEFAULT_LEXICON
    confirm = hour = part_day = dep_date = None
    mentions: List[Tuple[Optional[str], str]] = []

    for i, tok in enumerate(tokens):
        if tok in lex.stations:
            prev = tokens[i - 1] if i > 0 else None
            if prev in lex.dep_markers:
                role = "dep"
            elif prev in lex.arr_markers:
                role = "arr"
            else:
                role = None
            mentions.append((role, lex.station_value(tok)))
        elif tok in lex.confirm_words:
            if confirm is None:
                confirm = lex.confirm_words[tok]
        elif tok in lex.hour_words:
            if hour is None:
                hour = lex.hour_words[tok]
        elif tok in lex.part_day_words:
            if part_day is None:
                part_day = lex.part_day_words[tok]
        elif tok in lex.date_words:
            if dep_date is None:
                dep_date = lex.date_words[tok]

    dep = arr = None
    for role, city in mentions:
        if role == "dep" and dep is None and city != arr:
            dep = city
        elif role == "arr" and arr is None and city != dep:
            arr = city
    for role, city in mentions:
        if role is not None or city in (dep, arr):
            continue
        if dep is None:
            dep = city
        elif arr is None:
            arr = city

    return CaseFrame(
        confirm=confirm,
        dep_city=dep,
        arr_city=arr,
        dep_date=dep_date,
        part_day=part_day,
        hour=hour,
    )


def su_match(hyp_frame: CaseFrame, ref_frame: CaseFrame) -> bool:
    """Exact match on every slot, absent slots included."""
    return hyp_frame == ref_frame


def su_rate(pairs: Iterable[Tuple[CaseFrame, CaseFrame]]) -> float:
    """
    Fraction of (hypothesis, reference) frame pairs that match exactly.

    Raises:
        EvaluationError: no pairs
    """
    pairs = list(pairs)
    if not pairs:
        raise EvaluationError("sentence understanding rate needs at least one pair")
    hits = sum(1 for hyp, ref in pairs if su_match(hyp, ref))
    return hits / len(pairs)
