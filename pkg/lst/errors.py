class LSTError(Exception):
    """Base exception for latent speech-text errors"""

    prefix = "Error"

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)

    def __str__(self):
        return f"{self.prefix}: {self.message}"


class DimensionError(LSTError):
    """Exception raised when operand shapes are incompatible"""

    prefix = "Dimension error"

    def __init__(self, message: str, *shapes: tuple[int, ...]):
        self.shapes = shapes
        if shapes:
            message = f"{message} ({' vs '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)


class EmptyLossError(LSTError):
    """Exception raised when every loss position is ignored"""

    prefix = "Empty loss"


class VocabularyIndexError(LSTError, IndexError):
    """Exception raised for token ids outside an embedding table"""

    prefix = "Index error"


class ContractError(LSTError):
    """Exception raised when an operation is called outside its contract"""

    prefix = "Contract error"


class ConfigError(LSTError):
    """Exception raised for invalid configuration values"""

    prefix = "Config error"

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class AlignmentError(LSTError):
    """Exception raised for alignment spans inconsistent with a speech run"""

    prefix = "Alignment error"


class AlignmentMissingError(AlignmentError):
    """Exception raised when aligned patching is requested without spans"""

    prefix = "Alignment missing"


class SplitError(LSTError):
    """Exception raised when a word span cannot hold its subwords"""

    prefix = "Split error"


class VocabularyError(LSTError):
    """Exception raised for words outside the text vocabulary"""

    prefix = "Vocabulary error"


class TrainingDivergenceError(LSTError):
    """Exception raised when the loss or gradients stop being finite"""

    prefix = "Training divergence"

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(f"step {step}: {message}" if step is not None else message)


class EmptyEvalError(LSTError):
    """Exception raised when no evaluation record could be scored"""

    prefix = "Empty evaluation"


class ContextOverflowError(LSTError):
    """Exception raised when a sequence does not fit the model context"""

    prefix = "Context overflow"


class CheckpointError(LSTError):
    """Exception raised for checkpoint read/write failures"""

    prefix = "Checkpoint error"


class CorpusFormatError(LSTError):
    """Exception raised for malformed corpus, merge-table or eval-set files"""

    prefix = "Format error"


class SkipUtterance(Exception):
    """Raised by the interleaver when an utterance is too short to interleave"""


class EndOfBudget(Exception):
    """Raised by a data stream when its token budget is exhausted"""
