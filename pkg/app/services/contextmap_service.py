"""
Dialogue-context taxonomy: mapping raw (act, parameters) contexts onto LM
classes and the robustness fallback for under-trained specific models.
"""
from dataclasses import dataclass
from itertools import permutations
from typing import Dict, FrozenSet, List, Mapping, Tuple

from app.core.exceptions import ContextError
from app.models.schemas import DialogueAct, DialogueContext, LMClassId, TaskParameter

P = TaskParameter

# Semantic merge: parameters expressing the same concept
CANONICAL: Dict[TaskParameter, TaskParameter] = {
    P.DEP_CITY: P.DEP_CITY,
    P.ARR_CITY: P.ARR_CITY,
    P.DEP_TIME: P.DEP_TIME,
    P.HOUR: P.DEP_TIME,
    P.PART_DAY: P.DEP_TIME,
    P.DEP_DATE: P.DEP_DATE,
    P.WEEK_DAY: P.DEP_DATE,
    P.RELATIVE_DAY: P.DEP_DATE,
}

_CLASS_TABLE: Dict[Tuple[DialogueAct, FrozenSet[TaskParameter]], LMClassId] = {
    (DialogueAct.REQUEST, frozenset({P.DEP_CITY})): LMClassId.REQ_DEP_CITY,
    (DialogueAct.REQUEST, frozenset({P.DEP_CITY, P.ARR_CITY})): LMClassId.REQ_CITIES,
    (DialogueAct.REQUEST, frozenset({P.ARR_CITY})): LMClassId.REQ_ARR_CITY,
    (DialogueAct.REQUEST, frozenset({P.DEP_TIME})): LMClassId.REQ_TIME,
    (DialogueAct.REQUEST, frozenset({P.DEP_DATE})): LMClassId.REQ_DATE,
    (DialogueAct.VERIFY, frozenset({P.DEP_CITY})): LMClassId.VER_DEP_CITY,
    (DialogueAct.VERIFY, frozenset({P.DEP_CITY, P.ARR_CITY})): LMClassId.VER_CITIES,
    (DialogueAct.VERIFY, frozenset({P.ARR_CITY})): LMClassId.VER_ARR_CITY,
    (DialogueAct.VERIFY, frozenset({P.DEP_TIME})): LMClassId.VER_TIME,
    (DialogueAct.VERIFY, frozenset({P.DEP_DATE})): LMClassId.VER_DATE,
}

MAX_VERIFIED_PARAMS = 2


@dataclass(frozen=True)
class ClassTrainingStats:
    """Training material available to one specific LM."""
    utterances: int
    multiword_utterances: int


@dataclass(frozen=True)
class RobustnessPolicy:
    """Minimum training material below which a specific LM is replaced."""
    min_utterances: int = 300
    min_multiword_utterances: int = 250

    def scaled(self, factor: float) -> "RobustnessPolicy":
        return RobustnessPolicy(
            min_utterances=int(round(self.min_utterances * factor)),
            min_multiword_utterances=int(round(self.min_multiword_utterances * factor)),
        )

    @classmethod
    def all_pass(cls) -> "RobustnessPolicy":
        return cls(0, 0)


def canonical_params(ctx: DialogueContext) -> List[TaskParameter]:
    """Merged, de-duplicated parameters; VERIFY keeps only the first two."""
    merged: List[TaskParameter] = []
    for param in ctx.params:
        canon = CANONICAL[param]
        if canon not in merged:
            merged.append(canon)
    if ctx.act is DialogueAct.VERIFY:
        merged = merged[:MAX_VERIFIED_PARAMS]
    return merged


def classify_context(ctx: DialogueContext) -> LMClassId:
    """
    Map a dialogue context onto one of the ten specific LM classes, or onto
    CONTEXT_INDEPENDENT when the canonical combination has no class.
    """
    key = (ctx.act, frozenset(canonical_params(ctx)))
    return _CLASS_TABLE.get(key, LMClassId.CONTEXT_INDEPENDENT)


def effective_lm(
    lm_class: LMClassId,
    stats: Mapping[LMClassId, ClassTrainingStats],
    policy: RobustnessPolicy,
) -> LMClassId:
    """
    Resolve the class whose model should actually be used.

    Args:
        lm_class: class selected by classify_context
        stats: training statistics per specific class
        policy: robustness thresholds

    Returns:
        lm_class, or CONTEXT_INDEPENDENT when its model is under-trained

    Raises:
        ContextError: unknown class or class without statistics
    """
    if not isinstance(lm_class, LMClassId):
        raise ContextError(f"unknown LM class {lm_class!r}")
    if lm_class is LMClassId.CONTEXT_INDEPENDENT:
        return lm_class
    class_stats = stats.get(lm_class)
    if class_stats is None:
        raise ContextError(f"no training statistics for LM class {lm_class.value!r}")
    if (class_stats.utterances < policy.min_utterances
            or class_stats.multiword_utterances < policy.min_multiword_utterances):
        return LMClassId.CONTEXT_INDEPENDENT
    return lm_class


def enumerate_contexts(max_params: int = 3) -> List[DialogueContext]:
    """Every context with up to max_params distinct parameters, in a fixed order."""
    contexts = []
    for act in DialogueAct:
        for n in range(1, max_params + 1):
            for params in permutations(list(TaskParameter), n):
                contexts.append(DialogueContext(act, params))
    return contexts


def group_of(lm_class: LMClassId) -> str:
    """Report group of a specific class: Requests or Confirms."""
    act = lm_class.act
    if act is None:
        raise ContextError("the context-independent class belongs to no group")
    return "Requests" if act is DialogueAct.REQUEST else "Confirms"
