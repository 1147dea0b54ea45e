"""Exception hierarchy shared across the package."""


class RelmError(Exception):
    """Base class for all errors raised by relm."""


class ConfigError(RelmError, ValueError):
    """Invalid or inconsistent configuration value."""


class CorpusLoadError(RelmError, OSError):
    def __init__(self, path, reason):
        super().__init__(f"cannot load corpus {path!r}: {reason}")
        self.path = path


class CorpusDecodeError(RelmError, UnicodeError):
    def __init__(self, path, line_number, reason):
        super().__init__(f"{path}:{line_number}: invalid UTF-8 ({reason})")
        self.path = path
        self.line_number = line_number


class EmptyCorpusError(RelmError, ValueError):
    """A corpus required to be nonempty has no sentences."""


class ShapeError(RelmError, ValueError):
    def __init__(self, op, *shapes):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = shapes


class VocabularyError(RelmError, ValueError):
    """Vocabulary layout or extension contract violated."""


class ModelError(RelmError, ValueError):
    """Model structure precondition violated (adapters, languages, vocab rows)."""


class CheckpointError(RelmError):
    """Base class for checkpoint I/O failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends early or its trailer does not verify."""


class CheckpointInconsistentError(CheckpointError):
    """Tensor shapes disagree with the embedded config or vocabulary."""


class ConfigMismatchError(CheckpointError):
    def __init__(self, field, expected, found):
        super().__init__(f"config mismatch on {field!r}: expected {expected!r}, checkpoint has {found!r}")
        self.field = field


class ManifestError(RelmError):
    """Experiment manifest is malformed or an input hash does not verify."""
