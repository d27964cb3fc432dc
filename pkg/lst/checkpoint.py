import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from lst.errors import CheckpointError
from lst.utils import storage_key

MANIFEST_NAME = "manifest.json"
TENSORS_NAME = "tensors.bin"

DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}


class CheckpointStore:
    """
    Local object store for checkpoints.

    A checkpoint named `key` is a folder holding:
    - `manifest.json`: dtype, and for every tensor in order its name, shape and byte offset
      (plus free-form metadata)
    - `tensors.bin`: the raw little-endian tensor data in manifest order
    """

    logger_name = "CheckpointStore"

    def __init__(self, *, root: str | Path, create: bool = True):
        self.root = Path(root)
        self.logger = self._setup_logger()
        try:
            if create:
                self.root.mkdir(parents=True, exist_ok=True)
            elif not self.root.is_dir():
                raise FileNotFoundError(self.root)
        except OSError as e:
            raise CheckpointError(f"cannot open checkpoint root {self.root}: {e}") from e

    def _setup_logger(self) -> logging.Logger:
        logger = logging.getLogger(self.logger_name)
        if not logger.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter("[%(levelname)s] [%(filename)s] %(message)s"))
            logger.addHandler(handler)
            logger.setLevel(logging.INFO)
        return logger

    def _path(self, key: str) -> Path:
        return self.root / storage_key(key)

    def object_exists(self, key: str) -> bool:
        return self._path(key).exists()

    def get_object(self, key: str, encoding: str = "utf-8") -> str:
        try:
            return self._path(key).read_text(encoding=encoding)
        except FileNotFoundError as e:
            raise CheckpointError(f"object does not exist: {key}") from e
        except OSError as e:
            raise CheckpointError(f"error reading {key}: {e}") from e

    def put_object(self, key: str, content: str | bytes) -> None:
        path = self._path(key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            if isinstance(content, bytes):
                path.write_bytes(content)
            else:
                path.write_text(content, encoding="utf-8")
        except OSError as e:
            raise CheckpointError(f"error writing {key}: {e}") from e

    def save_tensors(
        self,
        key: str,
        tensors: dict[str, np.ndarray],
        *,
        dtype: str = "float32",
        meta: dict[str, Any] | None = None,
    ) -> None:
        """
        Write a checkpoint folder.

        Args:
            key: Checkpoint folder name relative to the store root.
            tensors: Ordered name -> array mapping.
            dtype: "float32" (weights export) or "float64" (resumable state).
            meta: Extra JSON-serializable metadata stored in the manifest.
        """
        if dtype not in DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype!r}")
        np_dtype = DTYPES[dtype]
        entries, chunks, offset = [], [], 0
        for name, array in tensors.items():
            raw = np.ascontiguousarray(array, dtype=np_dtype).tobytes()
            entries.append({"name": name, "shape": list(np.shape(array)), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        manifest = {"format": "lst-checkpoint", "version": 1, "dtype": dtype, "tensors": entries}
        if meta:
            manifest["meta"] = meta
        self.put_object(f"{key}/{TENSORS_NAME}", b"".join(chunks))
        self.put_object(f"{key}/{MANIFEST_NAME}", json.dumps(manifest, indent=2))
        self.logger.info(f"Saved {len(entries)} tensors ({offset} bytes, {dtype}) to {key}")

    def load_manifest(self, key: str) -> dict[str, Any]:
        try:
            manifest = json.loads(self.get_object(f"{key}/{MANIFEST_NAME}"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"invalid manifest in {key}: {e}") from e
        if manifest.get("dtype") not in DTYPES or "tensors" not in manifest:
            raise CheckpointError(f"malformed manifest in {key}")
        return manifest

    def load_tensors(self, key: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
        """
        Read a checkpoint folder.

        Returns:
            tuple: (name -> float64 array in manifest order, manifest metadata)
        """
        manifest = self.load_manifest(key)
        np_dtype = DTYPES[manifest["dtype"]]
        try:
            raw = self._path(f"{key}/{TENSORS_NAME}").read_bytes()
        except OSError as e:
            raise CheckpointError(f"error reading tensors of {key}: {e}") from e
        tensors = {}
        for entry in manifest["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            end = entry["offset"] + count * np_dtype.itemsize
            if end > len(raw):
                raise CheckpointError(f"tensor {entry['name']!r} runs past end of {key}")
            values = np.frombuffer(raw, dtype=np_dtype, count=count, offset=entry["offset"])
            tensors[entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
        return tensors, manifest.get("meta", {})
