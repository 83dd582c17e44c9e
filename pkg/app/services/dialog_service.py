"""
Mixed-initiative dialogue manager for the train timetable task.

The policy picks the next system act from the accumulated slots, `integrate`
merges a parsed user frame coherently with the dialogue history, and every
system act is sent to the LM registry before the next user turn.
"""
import re
import threading
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog

from app.core.config import Settings
from app.core.exceptions import ConfigError, DialogueError, SessionNotFoundError
from app.models.schemas import (
    CaseFrame,
    Confirm,
    DialogueAct,
    DialogueContext,
    LMClassId,
    PartDay,
    Phase,
    SystemActKind,
    TaskParameter,
    VALUE_SLOTS,
)
from app.services.corpus_service import tokenize
from app.services.registry_service import LMRegistry, ModelPool
from app.services.semantics_service import DEFAULT_LEXICON, SemanticLexicon, parse

logger = structlog.get_logger(__name__)

P = TaskParameter

SLOT_PARAMS: Dict[str, TaskParameter] = {
    "dep_city": P.DEP_CITY,
    "arr_city": P.ARR_CITY,
    "dep_date": P.DEP_DATE,
    "part_day": P.PART_DAY,
    "hour": P.HOUR,
}
TIME_SLOTS = ("part_day", "hour")

# [start, end) in minutes after midnight
PART_DAY_WINDOWS: Dict[PartDay, Tuple[int, int]] = {
    PartDay.MORNING: (5 * 60, 12 * 60),
    PartDay.AFTERNOON: (12 * 60, 17 * 60),
    PartDay.EVENING: (17 * 60, 24 * 60),
}
PART_DAY_TEXT = {
    PartDay.MORNING: "in the morning",
    PartDay.AFTERNOON: "in the afternoon",
    PartDay.EVENING: "in the evening",
}


# Timetable

@dataclass(frozen=True)
class Train:
    train_id: str
    dep: str
    arr: str
    dep_time: int
    arr_time: int


def _minutes(text: str) -> int:
    match = re.fullmatch(r"(\d{1,2}):(\d{2})", text.strip())
    if not match or int(match.group(1)) > 23 or int(match.group(2)) > 59:
        raise ValueError(f"invalid time {text!r}")
    return int(match.group(1)) * 60 + int(match.group(2))


class Timetable:
    """Daily trains indexed by route, each route sorted by departure."""

    def __init__(self, trains: Iterable[Train] = ()):
        self.trains: Tuple[Train, ...] = tuple(trains)
        ids = [t.train_id for t in self.trains]
        if len(set(ids)) != len(ids):
            raise ConfigError("timetable train ids must be unique")
        self._routes: Dict[Tuple[str, str], List[Train]] = {}
        for train in sorted(self.trains, key=lambda t: (t.dep_time, t.train_id)):
            self._routes.setdefault((train.dep, train.arr), []).append(train)

    def __len__(self) -> int:
        return len(self.trains)

    def route(self, dep: str, arr: str) -> List[Train]:
        return list(self._routes.get((dep.upper(), arr.upper()), ()))

    def matching(self, dep: str, arr: str, part_day: Optional[PartDay] = None,
                 earliest: Optional[int] = None) -> List[Train]:
        """Trains on the route inside the part-day window and not before `earliest`."""
        trains = self.route(dep, arr)
        if earliest is not None:
            return [t for t in trains if t.dep_time >= earliest]
        if part_day is not None:
            start, end = PART_DAY_WINDOWS[part_day]
            return [t for t in trains if start <= t.dep_time < end]
        return trains


def load_timetable(path: Union[str, Path]) -> Timetable:
    """
    Read `train_id dep arr dep_time arr_time` TSV with a header row.

    Raises:
        ConfigError: unreadable file, missing columns or invalid times
    """
    try:
        frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read timetable {path}: {e}") from e
    missing = {"train_id", "dep", "arr", "dep_time", "arr_time"} - set(frame.columns)
    if missing:
        raise ConfigError(f"{path}: missing timetable columns {sorted(missing)}")
    try:
        trains = [
            Train(row.train_id, row.dep.upper(), row.arr.upper(), _minutes(row.dep_time), _minutes(row.arr_time))
            for row in frame.itertuples(index=False)
        ]
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e
    return Timetable(trains)


def format_clock(minutes: int) -> str:
    """12-hour clock: 20:20 -> '8:20 p.m.', 06:00 -> '6 a.m.'."""
    hour, minute = divmod(minutes % (24 * 60), 60)
    suffix = "a.m." if hour < 12 else "p.m."
    shown = hour % 12 or 12
    return f"{shown}:{minute:02d} {suffix}" if minute else f"{shown} {suffix}"


def display_city(value: str) -> str:
    return value.replace("_", " ").title()


def to_24h(hour: int, part_day: Optional[PartDay]) -> int:
    """Hour of day given a spoken hour and an optional part of the day."""
    if part_day in (PartDay.AFTERNOON, PartDay.EVENING) and 1 <= hour < 12:
        return hour + 12
    return hour


# State

@dataclass(frozen=True)
class DialoguePolicy:
    many_trains_threshold: int = 3
    max_reprompts: int = 3
    max_turns: int = 20
    ask_date: bool = False
    implicit_time_confirmation: bool = True

    @classmethod
    def from_settings(cls, settings: Settings) -> "DialoguePolicy":
        return cls(
            many_trains_threshold=settings.many_trains_threshold,
            max_reprompts=settings.max_reprompts,
            max_turns=settings.max_turns,
            ask_date=settings.ask_date,
            implicit_time_confirmation=settings.implicit_time_confirmation,
        )


@dataclass(frozen=True)
class SystemAct:
    kind: SystemActKind
    prompt: str
    context: Optional[DialogueContext] = None
    slots: Tuple[str, ...] = ()

    @property
    def label(self) -> str:
        return self.context.to_text() if self.context is not None else self.kind.value


@dataclass
class DialogueState:
    """Slots gathered so far; `pending` is the context of the last system act."""
    slots: Dict[str, Any] = field(default_factory=dict)
    confirmed: Dict[str, bool] = field(default_factory=dict)
    pending: Optional[DialogueContext] = None
    pending_slots: Tuple[str, ...] = ()
    history: List[Tuple[SystemAct, CaseFrame]] = field(default_factory=list)
    phase: Phase = Phase.COLLECTING
    reprompts: int = 0
    events: List[str] = field(default_factory=list)

    def copy(self) -> "DialogueState":
        return replace(self, slots=dict(self.slots), confirmed=dict(self.confirmed),
                       history=list(self.history), events=list(self.events))

    def get(self, slot: str) -> Any:
        return self.slots.get(slot)

    def set(self, slot: str, value: Any) -> None:
        self.slots[slot] = value
        self.confirmed[slot] = False

    def clear(self, slot: str) -> None:
        self.slots.pop(slot, None)
        self.confirmed.pop(slot, None)

    def unconfirmed(self) -> List[str]:
        return [s for s in VALUE_SLOTS if s in self.slots and not self.confirmed.get(s, False)]

    def is_confirmed(self, slot: str) -> bool:
        return slot in self.slots and self.confirmed.get(slot, False)


# Policy

def _request(*params: TaskParameter, prompt: str, slots: Tuple[str, ...]) -> SystemAct:
    return SystemAct(SystemActKind.REQUEST, prompt, DialogueContext.of(DialogueAct.REQUEST, *params), slots)


def verify_prompt(state: DialogueState, slots: Sequence[str]) -> str:
    parts = ["Do you want to travel"]
    if "dep_city" in slots:
        parts.append(f"from {display_city(state.get('dep_city'))}")
    if "arr_city" in slots:
        parts.append(f"to {display_city(state.get('arr_city'))}")
    if "dep_date" in slots:
        date = state.get("dep_date").lower()
        parts.append(date if date in ("today", "tomorrow") else f"on {date.title()}")
    if "part_day" in slots:
        parts.append(PART_DAY_TEXT[state.get("part_day")])
    if "hour" in slots:
        parts.append(f"at {state.get('hour')}")
    return " ".join(parts) + "?"


def next_act(state: DialogueState, timetable: Timetable, policy: DialoguePolicy) -> SystemAct:
    """
    Next system act.

    Order: missing cities, the date when configured, one batched
    verification of every unconfirmed slot, a time request when too many
    trains match, then the answer.

    Raises:
        DialogueError: the session is closed
    """
    if state.phase is Phase.CLOSED:
        raise DialogueError("no next act for a closed dialogue")
    dep, arr = state.get("dep_city"), state.get("arr_city")
    if dep is None and arr is None:
        return _request(P.DEP_CITY, P.ARR_CITY, slots=("dep_city", "arr_city"),
                        prompt="Where are you leaving from and where are you going?")
    if dep is None:
        return _request(P.DEP_CITY, slots=("dep_city",), prompt="Where are you leaving from?")
    if arr is None:
        return _request(P.ARR_CITY, slots=("arr_city",), prompt="Where do you want to go?")
    if policy.ask_date and state.get("dep_date") is None:
        return _request(P.DEP_DATE, slots=("dep_date",), prompt="On which day do you want to leave?")

    unconfirmed = state.unconfirmed()
    if unconfirmed:
        context = DialogueContext.of(DialogueAct.VERIFY, *(SLOT_PARAMS[s] for s in unconfirmed))
        return SystemAct(SystemActKind.VERIFY, verify_prompt(state, unconfirmed), context, tuple(unconfirmed))

    if state.get("hour") is None:
        part_day = state.get("part_day")
        matches = timetable.matching(dep, arr, part_day=part_day)
        if len(matches) > policy.many_trains_threshold:
            when = f" {PART_DAY_TEXT[part_day]}" if part_day is not None else ""
            return _request(P.DEP_TIME, slots=TIME_SLOTS,
                            prompt=f"There are many trains{when}. At what time do you want to leave?")
    return SystemAct(SystemActKind.ANSWER, "")


# Integration

def _apply_value(state: DialogueState, slot: str, value: Any) -> None:
    current = state.get(slot)
    if current is None:
        state.set(slot, value)
    elif current != value:
        if state.is_confirmed(slot):
            state.events.append(f"correction {slot} {current}->{value}")
        state.set(slot, value)


def integrate(state: DialogueState, frame: CaseFrame, policy: DialoguePolicy) -> DialogueState:
    """
    Merge a user frame into a copy of the state.

    A confirmation with no pending verification is discarded. YES confirms
    the pending slots; a restated value confirms its slot; NO with
    corrections confirms the pending slots left uncorrected, and a bare NO
    clears them. A different value for a confirmed slot is a correction.

    Raises:
        DialogueError: the dialogue is not collecting or confirming
    """
    if state.phase not in (Phase.COLLECTING, Phase.CONFIRMING):
        raise DialogueError(f"cannot integrate user input in phase {state.phase.value}")
    new = state.copy()
    pending = new.pending

    if frame.is_empty():
        new.reprompts += 1
        if new.reprompts > policy.max_reprompts:
            new.phase = Phase.CLOSED
        return new
    new.reprompts = 0

    values = frame.values()
    verifying = pending is not None and pending.act is DialogueAct.VERIFY
    if frame.confirm is not None and not verifying:
        new.events.append(f"discarded confirm={frame.confirm.value}")

    if (pending is not None and pending.params == (P.ARR_CITY,) and pending.act is DialogueAct.REQUEST
            and "arr_city" not in values and values.get("dep_city") not in (None, new.get("dep_city"))):
        values["arr_city"] = values.pop("dep_city")

    if verifying:
        targets = [s for s in new.pending_slots if s in new.slots]
        corrected = [s for s in targets if s in values and values[s] != new.get(s)]
        restated = [s for s in targets if s in values and values[s] == new.get(s)]
        for slot in corrected:
            new.set(slot, values[slot])
        if frame.confirm is Confirm.YES:
            confirm = [s for s in targets if s not in corrected]
        elif frame.confirm is Confirm.NO:
            confirm = [s for s in targets if s not in corrected] if corrected else []
            if not corrected:
                for slot in targets:
                    new.clear(slot)
                new.events.append(f"denied {','.join(targets)}")
        else:
            confirm = restated
        for slot in confirm:
            new.confirmed[slot] = True
        for slot in targets:
            values.pop(slot, None)

    for slot in VALUE_SLOTS:
        if slot in values:
            _apply_value(new, slot, values[slot])

    if (policy.implicit_time_confirmation and pending is not None
            and pending.act is DialogueAct.REQUEST and P.DEP_TIME in pending.params):
        for slot in TIME_SLOTS:
            if slot in values:
                new.confirmed[slot] = True

    if new.get("dep_city") is not None and new.get("dep_city") == new.get("arr_city"):
        new.events.append("same departure and arrival")
    new.phase = Phase.CONFIRMING if new.unconfirmed() else Phase.COLLECTING
    return new


# Answer

@dataclass(frozen=True)
class AnswerOutcome:
    text: str
    phase: Phase
    state: DialogueState
    train: Optional[Train] = None


def answer(state: DialogueState, timetable: Timetable) -> AnswerOutcome:
    """
    Report the earliest train at or after the requested time.

    With no match the time constraint is dropped, or the cities when no
    time was given, and the dialogue goes back to collecting.
    """
    dep, arr = state.get("dep_city"), state.get("arr_city")
    if dep is None or arr is None:
        raise DialogueError("answer needs both cities")
    hour, part_day = state.get("hour"), state.get("part_day")
    earliest = to_24h(hour, part_day) * 60 if hour is not None else None
    trains = timetable.matching(dep, arr, part_day=part_day, earliest=earliest)
    if trains:
        train = trains[0]
        text = (f"Train {train.train_id} leaves from {display_city(dep)} at {format_clock(train.dep_time)}; "
                f"it arrives at {display_city(arr)} at {format_clock(train.arr_time)}. "
                "Do you need additional information about this train?")
        done = state.copy()
        done.phase = Phase.ANSWERING
        return AnswerOutcome(text, Phase.ANSWERING, done, train)

    relaxed = state.copy()
    route = f"from {display_city(dep)} to {display_city(arr)}"
    if hour is not None or part_day is not None:
        for slot in TIME_SLOTS:
            relaxed.clear(slot)
        relaxed.events.append("relaxed time")
        text = f"Sorry, there are no trains {route} at that time."
    else:
        relaxed.clear("dep_city")
        relaxed.clear("arr_city")
        relaxed.events.append("relaxed cities")
        text = f"Sorry, there are no trains {route}."
    relaxed.phase = Phase.COLLECTING
    return AnswerOutcome(text, Phase.COLLECTING, relaxed)


# Sessions

@dataclass(frozen=True)
class TranscriptEntry:
    index: int
    speaker: str
    label: str
    active_lm: LMClassId
    prompt: str = ""
    tokens: Tuple[str, ...] = ()
    frame: Optional[CaseFrame] = None

    def to_line(self) -> str:
        """`turn<TAB>S|U<TAB>act-or-frame<TAB>active LM`."""
        return f"{self.index}\t{self.speaker}\t{self.label}\t{self.active_lm.value}"


@dataclass(frozen=True)
class UserInput:
    frame: CaseFrame
    tokens: Tuple[str, ...] = ()


class DialogueSession:
    """One dialogue over a private registry selector and a shared model pool."""

    def __init__(self, registry: LMRegistry, timetable: Timetable,
                 policy: Optional[DialoguePolicy] = None, session_id: Optional[str] = None):
        self.session_id = session_id or uuid.uuid4().hex
        self.registry = registry
        self.timetable = timetable
        self.policy = policy or DialoguePolicy()
        self.state = DialogueState()
        self.transcript: List[TranscriptEntry] = []
        self.user_turns = 0
        self._last_act: Optional[SystemAct] = None

    @property
    def phase(self) -> Phase:
        return self.state.phase

    @property
    def finished(self) -> bool:
        return self.state.phase in (Phase.ANSWERING, Phase.CLOSED)

    @property
    def last_act(self) -> Optional[SystemAct]:
        return self._last_act

    def _emit(self, act: SystemAct) -> SystemAct:
        if act.context is not None:
            self.registry.switch(act.context)
        self.state.pending = act.context
        self.state.pending_slots = act.slots
        self.transcript.append(TranscriptEntry(len(self.transcript), "S", act.label,
                                               self.registry.active, prompt=act.prompt))
        self._last_act = act
        return act

    def _close(self, prompt: str) -> SystemAct:
        self.state.phase = Phase.CLOSED
        logger.info("dialogue_closed", session_id=self.session_id, turns=self.user_turns)
        return self._emit(SystemAct(SystemActKind.CLOSE, prompt))

    def _decide(self) -> SystemAct:
        apology = ""
        # relaxing drops the time first, then the cities, so this settles quickly
        for _ in range(3):
            act = next_act(self.state, self.timetable, self.policy)
            if act.kind is not SystemActKind.ANSWER:
                self.state.phase = Phase.CONFIRMING if act.kind is SystemActKind.VERIFY else Phase.COLLECTING
                return self._emit(replace(act, prompt=apology + act.prompt))
            outcome = answer(self.state, self.timetable)
            self.state = outcome.state
            if outcome.train is not None:
                return self._emit(SystemAct(SystemActKind.ANSWER, apology + outcome.text))
            logger.info("no_train_found", session_id=self.session_id, event_detail=self.state.events[-1])
            apology += outcome.text + " "
        return self._close(apology + "Goodbye.")

    def start(self) -> SystemAct:
        if self.transcript:
            raise DialogueError("session already started")
        return self._decide()

    def respond(self, frame: CaseFrame, tokens: Sequence[str] = ()) -> SystemAct:
        """Integrate one user turn and produce the next system act."""
        if not self.transcript:
            raise DialogueError("session not started")
        if self.finished:
            raise DialogueError(f"session {self.session_id} is {self.state.phase.value}")
        self.transcript.append(TranscriptEntry(len(self.transcript), "U", frame.to_text() or "-",
                                               self.registry.active, tokens=tuple(tokens), frame=frame))
        self.user_turns += 1
        self.state = integrate(self.state, frame, self.policy)
        self.state.history.append((self._last_act, frame))
        if self.state.phase is Phase.CLOSED:
            return self._close("Sorry, I could not understand you. Goodbye.")
        if self.user_turns >= self.policy.max_turns:
            return self._close("Sorry, this is taking too long. Goodbye.")
        return self._decide()

    def close(self) -> SystemAct:
        return self._close("Goodbye.")

    def transcript_lines(self) -> List[str]:
        return [entry.to_line() for entry in self.transcript]


class UserChannel(Protocol):
    def next_input(self, session: DialogueSession) -> Optional[UserInput]: ...


class FrameScript:
    """Replays scripted frames; None when exhausted."""

    def __init__(self, frames: Iterable[CaseFrame]):
        self._frames = iter(list(frames))

    def next_input(self, session: DialogueSession) -> Optional[UserInput]:
        frame = next(self._frames, None)
        return UserInput(frame) if frame is not None else None


class TextChannel:
    """Typed text, tokenized and parsed."""

    def __init__(self, lines: Union[Iterable[str], Callable[[], Optional[str]]],
                 lexicon: Optional[SemanticLexicon] = None):
        self.lexicon = lexicon or DEFAULT_LEXICON
        self._read = lines if callable(lines) else self._iterate(iter(lines))

    @staticmethod
    def _iterate(lines: Iterator[str]) -> Callable[[], Optional[str]]:
        return lambda: next(lines, None)

    def understand(self, text: str) -> UserInput:
        tokens = tuple(tokenize(text, self.lexicon.multiword_names))
        return UserInput(parse(tokens, self.lexicon), tokens)

    def next_input(self, session: DialogueSession) -> Optional[UserInput]:
        text = self._read()
        return None if text is None else self.understand(text)


class RecognizerChannel:
    """
    Spoken references decoded through the simulated recognizer, rescored
    with the LM pair active for the turn.
    """

    def __init__(self, references: Iterable[Sequence[str]], recognizer, settings: Settings,
                 seed: int = 0, lexicon: Optional[SemanticLexicon] = None):
        self._refs = iter([tuple(r) for r in references])
        self.recognizer = recognizer
        self.settings = settings
        self.seed = seed
        self.lexicon = lexicon or DEFAULT_LEXICON
        self._turn = 0

    def next_input(self, session: DialogueSession) -> Optional[UserInput]:
        ref = next(self._refs, None)
        if ref is None:
            return None
        turn_seed = int(np.random.SeedSequence([self.seed, self._turn]).generate_state(1)[0])
        self._turn += 1
        hyp = self.recognizer.recognize(ref, session.registry.active_pair, self.settings, turn_seed)
        return UserInput(parse(hyp.tokens, self.lexicon), hyp.tokens)


def run_session(session: DialogueSession, channel: UserChannel,
                on_act: Optional[Callable[[SystemAct, DialogueSession], None]] = None) -> List[TranscriptEntry]:
    """
    Drive a session until it answers or closes; the channel returning None
    closes it.
    """
    act = session.start()
    if on_act:
        on_act(act, session)
    while not session.finished:
        user = channel.next_input(session)
        act = session.close() if user is None else session.respond(user.frame, user.tokens)
        if on_act:
            on_act(act, session)
    return session.transcript


class SessionManager:
    """Live sessions over one shared model pool, at most max_sessions at a time."""

    def __init__(self, pool: ModelPool, timetable: Timetable, policy: Optional[DialoguePolicy] = None,
                 lexicon: Optional[SemanticLexicon] = None, max_sessions: int = 1000):
        if max_sessions < 1:
            raise DialogueError(f"max_sessions must be at least 1, got {max_sessions}")
        self.pool = pool
        self.timetable = timetable
        self.policy = policy or DialoguePolicy()
        self.max_sessions = max_sessions
        self.text = TextChannel((), lexicon)
        self._sessions: Dict[str, DialogueSession] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)

    def create(self) -> DialogueSession:
        session = DialogueSession(LMRegistry(self.pool), self.timetable, self.policy)
        session.start()
        with self._lock:
            evicted = self._make_room()
            self._sessions[session.session_id] = session
        logger.info("session_created", session_id=session.session_id, evicted=evicted)
        return session

    def _make_room(self) -> int:
        # finished sessions go first, then the oldest live ones; caller holds the lock
        overflow = len(self._sessions) - self.max_sessions + 1
        if overflow <= 0:
            return 0
        finished = [sid for sid, s in self._sessions.items() if s.finished]
        live = [sid for sid, s in self._sessions.items() if not s.finished]
        victims = (finished + live)[:overflow]
        for sid in victims:
            del self._sessions[sid]
        return len(victims)

    def get(self, session_id: str) -> DialogueSession:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise SessionNotFoundError(f"unknown session {session_id}")
        return session

    def turn(self, session_id: str, text: str) -> DialogueSession:
        session = self.get(session_id)
        user = self.text.understand(text)
        session.respond(user.frame, user.tokens)
        return session


class DialogueService:
    """Timetable and policy from settings."""

    def __init__(self):
        self._timetables: Dict[Path, Timetable] = {}

    def timetable(self, settings: Settings) -> Timetable:
        path = Path(settings.timetable_file)
        if path not in self._timetables:
            self._timetables[path] = load_timetable(path)
        return self._timetables[path]

    def session_manager(self, pool: ModelPool, settings: Settings) -> SessionManager:
        return SessionManager(pool, self.timetable(settings), DialoguePolicy.from_settings(settings),
                              max_sessions=settings.max_sessions)

    def session(self, pool: ModelPool, settings: Settings) -> DialogueSession:
        return DialogueSession(LMRegistry(pool), self.timetable(settings), DialoguePolicy.from_settings(settings))


# Global service instance
dialog_service = DialogueService()
