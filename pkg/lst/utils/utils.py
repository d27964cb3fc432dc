import hashlib
import json
import zlib
from typing import Any

import numpy as np

from lst.utils.enums import RunStatus


def substream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """
    Derive an independent generator for a labeled substream of the root seed.

    Args:
        seed: The root seed.
        label: Stream label, e.g. "corpus", "interleave", "curriculum", "init".
        *indices: Further integer keys (step, record, utterance index).

    Returns:
        np.random.Generator: A PCG64 generator unique to (seed, label, indices).
    """
    key = [zlib.crc32(label.encode("utf-8")), *(int(i) for i in indices)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def config_hash(config: dict[str, Any]) -> str:
    payload = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def storage_key(key: str) -> str:
    return key.replace("\\", "/")


def has_final_state(status: RunStatus) -> bool:
    return status in (RunStatus.COMPLETED, RunStatus.FAILED, RunStatus.STOPPED)
