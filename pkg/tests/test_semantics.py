"""
Tests for the case-frame parser and the understanding metric.
"""
import numpy as np
import pytest

from app.core.exceptions import EvaluationError
from app.models.schemas import CaseFrame, Confirm, PartDay
from app.services.corpus_service import tokenize
from app.services.semantics_service import DEFAULT_LEXICON, SemanticLexicon, parse, su_match, su_rate


def frame_of(text):
    return parse(tokenize(text))


class TestParse:

    def test_marked_cities(self):
        assert frame_of("from milano to roma") == CaseFrame(dep_city="MILANO", arr_city="ROMA")
        assert frame_of("to roma from milano") == CaseFrame(dep_city="MILANO", arr_city="ROMA")

    def test_unmarked_cities_fill_departure_first(self):
        assert frame_of("milano roma") == CaseFrame(dep_city="MILANO", arr_city="ROMA")
        assert frame_of("to roma milano") == CaseFrame(dep_city="MILANO", arr_city="ROMA")

    def test_confirmation_with_correction(self):
        assert frame_of("no from milano") == CaseFrame(confirm=Confirm.NO, dep_city="MILANO")

    def test_first_confirmation_wins(self):
        """The first confirmation word decides the confirm slot."""
        assert frame_of("yes no").confirm is Confirm.YES

    def test_time_and_date(self):
        assert frame_of("at eight in the evening") == CaseFrame(hour=8, part_day=PartDay.EVENING)
        assert frame_of("tomorrow").dep_date == "TOMORROW"
        assert frame_of("tonight").part_day is PartDay.EVENING

    def test_multiword_station(self):
        assert frame_of("from reggio calabria to la spezia") == CaseFrame(
            dep_city="REGGIO_CALABRIA", arr_city="LA_SPEZIA")

    def test_same_city_never_fills_both_roles(self):
        frame = frame_of("from milano to milano")
        assert frame.dep_city == "MILANO"
        assert frame.arr_city is None

    def test_unknown_tokens_skipped(self):
        assert frame_of("<noise> uh well yes please") == CaseFrame(confirm=Confirm.YES)

    def test_empty(self):
        assert parse([]).is_empty()
        assert frame_of("hello there").is_empty()

    def test_frame_text_round_trip(self):
        frame = frame_of("no from milano to roma tomorrow at eight in the morning")
        assert frame.to_text() == "confirm=NO;dep-city=MILANO;arr-city=ROMA;dep-date=TOMORROW;part-day=MORNING;hour=8"
        assert CaseFrame.from_text(frame.to_text()) == frame

    def test_noisy_negated_city_answer(self):
        """A hesitation, a stray negation and a repeated city still give one consistent frame."""
        frame = parse(("<noise>", "no", "milano", "evening", "from", "milano", "roma"))
        assert frame.to_text() == "confirm=NO;dep-city=MILANO;arr-city=ROMA;part-day=EVENING"

    def test_random_tokens_only_yield_lexicon_values(self):
        lex = DEFAULT_LEXICON
        words = sorted(lex.stations | set(lex.hour_words) | set(lex.part_day_words) | set(lex.date_words)
                       | set(lex.confirm_words) | lex.dep_markers | lex.arr_markers)
        words += ["<noise>", "<unk>", "the", "in", "at", "o'clock", "uh", "zanzibar", ""]
        stations = {lex.station_value(s) for s in lex.stations}
        rng = np.random.default_rng(11)
        for _ in range(2000):
            tokens = [words[int(i)] for i in rng.integers(len(words), size=int(rng.integers(0, 13)))]
            frame = parse(tokens)
            assert frame.dep_city in stations | {None}
            assert frame.arr_city in stations | {None}
            assert frame.dep_city is None or frame.dep_city != frame.arr_city
            assert frame.hour in set(lex.hour_words.values()) | {None}
            assert frame.part_day in set(lex.part_day_words.values()) | {None}
            assert frame.dep_date in set(lex.date_words.values()) | {None}
            assert frame.confirm in set(lex.confirm_words.values()) | {None}


class TestLexicon:

    def test_multiword_names(self):
        assert ("reggio", "calabria") in DEFAULT_LEXICON.multiword_names
        assert all(len(n) > 1 for n in DEFAULT_LEXICON.multiword_names)

    def test_ambiguous_words_detected(self):
        """A word listed in two categories is reported as ambiguous."""
        lex = SemanticLexicon(
            stations=frozenset({"nove"}),
            hour_words={"nove": 9},
            part_day_words={},
            date_words={},
            confirm_words={},
        )
        assert lex.ambiguous == frozenset({"nove"})
        # a station reading wins
        assert parse(["nove"], lex) == CaseFrame(dep_city="NOVE")

    def test_default_has_no_ambiguity(self):
        assert not DEFAULT_LEXICON.ambiguous


class TestUnderstanding:

    def test_match_requires_every_slot(self):
        ref = CaseFrame(confirm=Confirm.NO, dep_city="MILANO")
        assert su_match(ref, ref)
        assert not su_match(CaseFrame(dep_city="MILANO"), ref)

    def test_rate(self):
        a, b = CaseFrame(hour=8), CaseFrame(hour=9)
        assert su_rate([(a, a), (a, b), (b, b), (b, a)]) == 0.5

    def test_rate_needs_pairs(self):
        with pytest.raises(EvaluationError):
            su_rate([])
