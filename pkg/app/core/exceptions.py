"""
Exception hierarchy for the context-dependent language modeling toolkit.
"""


class CtxLMError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CtxLMError):
    """Invalid or unreadable configuration."""


class CorpusError(CtxLMError):
    """Corpus construction, splitting or file errors."""


class GrammarError(CorpusError):
    """Template grammar is malformed or inconsistent with the parser."""


class ClusteringError(CtxLMError):
    """Word clustering received invalid input."""


class ModelTrainingError(CtxLMError):
    """Training data insufficient to train a reliable LM."""


class ModelFormatError(CtxLMError):
    """Serialized model could not be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class RegistryError(CtxLMError):
    """Model registry could not be built."""


class ContextError(CtxLMError):
    """Invalid dialogue context or unknown LM class."""


class EvaluationError(CtxLMError):
    """Metric computed on empty or invalid input."""


class DialogueError(CtxLMError):
    """Dialogue manager called in an invalid state."""


class SessionNotFoundError(DialogueError):
    """No live dialogue session with the given id."""
