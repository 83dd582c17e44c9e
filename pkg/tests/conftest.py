"""
Shared fixtures.
"""
import pytest

from app.core.config import DATA_DIR, Settings
from app.models.schemas import DialogueAct, DialogueContext, TaskParameter, Utterance
from app.services.classlm_service import train
from app.services.corpus_service import build_vocabulary, tokenize
from app.services.dialog_service import load_timetable
from app.services.registry_service import LMPair, ModelPool
from app.services.semantics_service import parse
from app.services.wordclass_service import WordClassMap

CITIES = (TaskParameter.DEP_CITY, TaskParameter.ARR_CITY)

TOY_TEXTS = (
    "from milano to roma",
    "from torino to milano in the evening",
    "to roma please",
    "yes",
    "no from milano",
    "at eight in the evening",
    "tomorrow",
    "yes from bologna to firenze",
    "i want to leave from napoli",
    "in the morning",
)


def _make_utt(text, act=DialogueAct.REQUEST, params=CITIES, uid=None):
    tokens = tuple(tokenize(text))
    return Utterance(uid or f"t-{text}", tokens, DialogueContext(act, tuple(params)), parse(tokens))


@pytest.fixture
def make_utt():
    """Factory: utterance from text with a parsed reference frame."""
    return _make_utt


@pytest.fixture
def settings():
    return Settings()


@pytest.fixture
def toy_corpus():
    return [_make_utt(t, uid=f"toy-{i}") for i, t in enumerate(TOY_TEXTS)]


@pytest.fixture
def toy_pair(toy_corpus):
    """Word-level bigram/trigram pair on the toy corpus."""
    vocab = build_vocabulary(toy_corpus)
    classmap = WordClassMap.identity(vocab)
    return LMPair(train(toy_corpus, vocab, classmap, 2, label="CONTEXT_INDEPENDENT"),
                  train(toy_corpus, vocab, classmap, 3, label="CONTEXT_INDEPENDENT"))


@pytest.fixture
def fallback_pool(toy_pair):
    return ModelPool.fallback_only(toy_pair)


@pytest.fixture(scope="session")
def timetable():
    return load_timetable(DATA_DIR / "timetable.tsv")


@pytest.fixture(scope="session")
def default_bundle():
    """Models for seed 13 under default settings."""
    from app.services.evaluation_service import evaluation_service

    return evaluation_service.build_models(Settings(), 13)
