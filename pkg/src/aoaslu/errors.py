"""Exception hierarchy shared across the package."""


class AoASLUError(Exception):
    """Base class for all package errors."""


class ShapeError(AoASLUError, ValueError):
    pass


class DegenerateRowError(AoASLUError, ValueError):
    """A softmax row had every entry masked out."""


class TapeError(AoASLUError, RuntimeError):
    pass


class NumericFault(AoASLUError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(AoASLUError, ValueError):
    pass


class EmptyUtteranceError(AoASLUError, ValueError):
    pass


class TruncationError(AoASLUError, ValueError):
    """Input longer than the configured maximum length."""


class CacheDesyncError(AoASLUError, RuntimeError):
    pass


class ConversionError(AoASLUError, ValueError):
    """BIO tags or spans could not be converted."""


class VocabularyError(AoASLUError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class GrammarParseError(AoASLUError, ValueError):
    """A label sequence violated the target grammar.

    ``prefix`` holds the longest valid prefix as a ``TargetSequence`` and
    ``position`` the index of the offending label.
    """

    def __init__(self, message, prefix=None, position=None):
        super().__init__(message)
        self.prefix = prefix
        self.position = position


class CheckpointError(AoASLUError, ValueError):
    pass


class CorpusParseError(AoASLUError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class BuilderError(AoASLUError, ValueError):
    pass


class ScorerError(AoASLUError, RuntimeError):
    pass


class AlignmentError(AoASLUError, ValueError):
    pass
