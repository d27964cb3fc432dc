from .utils import (
    ceil_div,
    config_hash,
    has_final_state,
    storage_key,
    substream,
)

__all__ = [
    "ceil_div",
    "config_hash",
    "storage_key",
    "substream",
    "has_final_state",
]
