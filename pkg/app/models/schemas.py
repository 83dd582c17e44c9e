"""
Domain types and API schemas.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from app.core.exceptions import ContextError, CorpusError


class DialogueAct(str, Enum):
    """Dialogue act of a system turn."""
    REQUEST = "DA-REQUEST"
    VERIFY = "DA-VERIFY"


class TaskParameter(str, Enum):
    """Task parameter focused by a system turn."""
    DEP_CITY = "dep-city"
    ARR_CITY = "arr-city"
    DEP_TIME = "dep-time"
    DEP_DATE = "dep-date"
    WEEK_DAY = "week-day"
    RELATIVE_DAY = "relative-day"
    PART_DAY = "part-day"
    HOUR = "hour"


class LMClassId(str, Enum):
    """Language model classes; values are the report labels."""
    REQ_DEP_CITY = "DA-REQUEST dep-city"
    REQ_CITIES = "DA-REQUEST dep-city, arr-city"
    REQ_ARR_CITY = "DA-REQUEST arr-city"
    REQ_TIME = "DA-REQUEST time"
    REQ_DATE = "DA-REQUEST date"
    VER_DEP_CITY = "DA-VERIFY dep-city"
    VER_CITIES = "DA-VERIFY dep-city, arr-city"
    VER_ARR_CITY = "DA-VERIFY arr-city"
    VER_TIME = "DA-VERIFY time"
    VER_DATE = "DA-VERIFY date"
    CONTEXT_INDEPENDENT = "CONTEXT_INDEPENDENT"

    @property
    def act(self) -> Optional[DialogueAct]:
        if self is LMClassId.CONTEXT_INDEPENDENT:
            return None
        return DialogueAct(self.value.split(" ", 1)[0])


# Specific classes in training-material table order
SPECIFIC_CLASSES: Tuple[LMClassId, ...] = tuple(
    c for c in LMClassId if c is not LMClassId.CONTEXT_INDEPENDENT
)


class Confirm(str, Enum):
    YES = "YES"
    NO = "NO"


class PartDay(str, Enum):
    MORNING = "MORNING"
    AFTERNOON = "AFTERNOON"
    EVENING = "EVENING"


class Phase(str, Enum):
    COLLECTING = "COLLECTING"
    CONFIRMING = "CONFIRMING"
    ANSWERING = "ANSWERING"
    CLOSED = "CLOSED"


class SystemActKind(str, Enum):
    REQUEST = "REQUEST"
    VERIFY = "VERIFY"
    ANSWER = "ANSWER"
    CLOSE = "CLOSE"


@dataclass(frozen=True)
class DialogueContext:
    """
    Dialogue act plus the ordered task parameters it focuses.

    `key` is a precomputed string identity used for constant-time lookups.
    """
    act: DialogueAct
    params: Tuple[TaskParameter, ...]
    key: str = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        params = tuple(TaskParameter(p) for p in self.params)
        if not params:
            raise ContextError("dialogue context needs at least one parameter")
        object.__setattr__(self, "act", DialogueAct(self.act))
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "key", self.to_text())

    def to_text(self) -> str:
        """Render as `DA-REQUEST=dep-city,arr-city`."""
        return f"{self.act.value}={','.join(p.value for p in self.params)}"

    @classmethod
    def of(cls, act: DialogueAct, *params: TaskParameter) -> "DialogueContext":
        return cls(act, tuple(params))


# (attribute, text name) in canonical frame order
FRAME_SLOTS: Tuple[Tuple[str, str], ...] = (
    ("confirm", "confirm"),
    ("dep_city", "dep-city"),
    ("arr_city", "arr-city"),
    ("dep_date", "dep-date"),
    ("part_day", "part-day"),
    ("hour", "hour"),
)
VALUE_SLOTS: Tuple[str, ...] = tuple(name for name, _ in FRAME_SLOTS[1:])


class CaseFrame(BaseModel):
    """Slot-value semantic representation of one user utterance."""

    model_config = ConfigDict(frozen=True)

    confirm: Optional[Confirm] = None
    dep_city: Optional[str] = None
    arr_city: Optional[str] = None
    dep_date: Optional[str] = None
    part_day: Optional[PartDay] = None
    hour: Optional[int] = Field(default=None, ge=0, le=23)

    def is_empty(self) -> bool:
        return all(getattr(self, name) is None for name, _ in FRAME_SLOTS)

    def values(self) -> Dict[str, Any]:
        """Present value slots (confirm excluded) in canonical order."""
        return {name: getattr(self, name) for name in VALUE_SLOTS if getattr(self, name) is not None}

    def to_text(self) -> str:
        """Canonical `slot=value;...` form used in corpus files and transcripts."""
        parts = []
        for name, text_name in FRAME_SLOTS:
            value = getattr(self, name)
            if value is None:
                continue
            if isinstance(value, Enum):
                value = value.value
            parts.append(f"{text_name}={value}")
        return ";".join(parts)

    @classmethod
    def from_text(cls, text: str) -> "CaseFrame":
        if not text:
            return cls()
        names = {text_name: name for name, text_name in FRAME_SLOTS}
        data: Dict[str, Any] = {}
        for part in text.split(";"):
            slot, sep, value = part.partition("=")
            if not sep or slot not in names or names[slot] in data:
                raise CorpusError(f"malformed frame {text!r}")
            data[names[slot]] = int(value) if slot == "hour" else value
        return cls(**data)


@dataclass(frozen=True)
class Utterance:
    """One user utterance with the context that elicited it."""
    id: str
    tokens: Tuple[str, ...]
    context: DialogueContext
    ref_frame: CaseFrame

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


# API schemas

class TurnRequest(BaseModel):
    """User input for one dialogue turn."""
    text: str = Field(default="", max_length=1000)


class TurnView(BaseModel):
    index: int
    speaker: str
    act: Optional[str] = None
    prompt: Optional[str] = None
    tokens: List[str] = Field(default_factory=list)
    frame: Optional[str] = None
    active_lm: str


class SessionResponse(BaseModel):
    session_id: str
    phase: Phase
    active_lm: str
    turns: List[TurnView]


class TranscriptResponse(BaseModel):
    session_id: str
    lines: List[str]


class ModelRouteView(BaseModel):
    lm_class: str
    routed_to: str
    utterances: Optional[int] = None
    multiword_utterances: Optional[int] = None


class HealthResponse(BaseModel):
    status: str
    models_loaded: bool
    active_sessions: int
    version: str


class ReportRow(BaseModel):
    """One metric/condition row of the comparison report."""
    metric: str
    condition: str
    requests: float
    confirms: float
    overall: float


class ComparisonReport(BaseModel):
    """Context-independent vs context-dependent comparison."""
    seeds: List[int]
    counts: Dict[str, int]
    tokens: Dict[str, int]
    rows: List[ReportRow]
    routes: Dict[str, str]
    config: Dict[str, Any]

    def row(self, metric: str, condition: str) -> ReportRow:
        for r in self.rows:
            if r.metric == metric and r.condition == condition:
                return r
        raise KeyError((metric, condition))
