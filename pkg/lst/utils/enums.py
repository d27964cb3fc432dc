from enum import Enum


class Modality(Enum):
    TEXT = "text"
    SPEECH = "speech"


class SegmentKind(Enum):
    """Kind of a patch segment; TEXT only appears in patch plans"""

    WORD = "word"
    SUBWORD = "subword"
    SILENCE = "silence"
    STATIC = "static"
    MERGED = "merged"
    TOKEN = "token"
    TEXT = "text"


class PatchingMode(Enum):
    """Training-time patching regime requested for a run"""

    STATIC = "static"
    ALIGNED = "aligned"
    MIXED = "mixed"
    CURRICULUM = "curriculum"
    BPE_ALIGNED = "bpe-aligned"

    @classmethod
    def parse(cls, value: str) -> "PatchingMode":
        if value == "bpe":
            return cls.BPE_ALIGNED
        return cls(value)


class PatchStrategy(Enum):
    """Concrete segmentation applied to one sequence"""

    STATIC = "static"
    ALIGNED = "aligned"
    BPE_ALIGNED = "bpe-aligned"
    SINGLETON = "singleton"


class SilenceMode(Enum):
    SEPARATE = "separate"
    MERGED = "merged"


class CurriculumShape(Enum):
    LINEAR = "linear"
    THREE_PHASE = "three_phase"


class RemainderMode(Enum):
    """What the interleaver does after the first text/speech pair"""

    REPEAT = "repeat"
    SINGLE = "single"


class ModelKind(Enum):
    LST = "lst"
    BASE = "base"
    BPE = "bpe"


class BudgetMode(Enum):
    COMPUTE = "compute"
    DATA = "data"


class Normalization(Enum):
    SUM = "sum"
    PER_TOKEN = "per-token"


class TrainEvent(Enum):
    """Events emitted by the Trainer to registered callbacks"""

    STEP = "step"
    EVAL = "eval"
    CHECKPOINT = "checkpoint"
    FINISHED = "finished"


class RunStatus(Enum):
    """Training/evaluation run status"""

    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    STOPPED = "stopped"
