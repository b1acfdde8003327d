import json
from pathlib import Path
from typing import Any

import numpy as np
from safetensors import SafetensorError, safe_open
from safetensors.numpy import save_file

from servtime.core.constants import CHECKPOINT_FORMAT_VERSION
from servtime.core.exceptions import CheckpointError, MissingInputError

# a single metadata entry keeps the header byte-stable
_META_KEY = "servtime"


def save_checkpoint(
    path: Path, tensors: dict[str, np.ndarray], meta: dict[str, Any]
) -> Path:
    document = {"format_version": CHECKPOINT_FORMAT_VERSION, **meta}
    arrays = {
        name: np.ascontiguousarray(value, dtype=np.float64)
        for name, value in sorted(tensors.items())
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(arrays, str(path), metadata={_META_KEY: json.dumps(document, sort_keys=True)})
    return path


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if not path.exists():
        raise MissingInputError(f"checkpoint not found: {path}")

    try:
        with safe_open(str(path), framework="np") as f:
            raw = (f.metadata() or {}).get(_META_KEY)
            tensors = {name: f.get_tensor(name) for name in f.keys()}
    except (SafetensorError, OSError, ValueError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}")

    if raw is None:
        raise CheckpointError(f"{path} is not a servtime checkpoint")
    meta = json.loads(raw)

    version = meta.pop("format_version", None)
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version!r}, expected {CHECKPOINT_FORMAT_VERSION!r}"
        )
    return tensors, meta
