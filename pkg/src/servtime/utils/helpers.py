import json
from pathlib import Path
from typing import Any

from servtime.core.exceptions import MissingInputError

# checkpoint kind -> model class
MODEL_CLASSES = {
    "rpp": "servtime.models.rpp.RppModel",
    "nsx": "servtime.models.nsx.NsxModel",
    "adv": "servtime.models.advserve.AdversarialModel",
    "mempool": "servtime.models.mempool.MempoolModel",
}


def lazy_import(dotted_path: str) -> Any:
    import importlib

    try:
        module_path, obj_name = dotted_path.rsplit(".", 1)
        module = importlib.import_module(module_path)
        return getattr(module, obj_name)
    except (ModuleNotFoundError, AttributeError) as e:
        raise ImportError(f"failed to import: {dotted_path}\n{e}")


def require_file(path: Path, what: str = "input") -> Path:
    if not path.is_file():
        raise MissingInputError(f"{what} not found: {path}")
    return path


def sibling(path: Path, suffix: str) -> Path:
    """`run.csv` + `.test` -> `run.test.csv`"""
    return path.with_name(f"{path.stem}{suffix}{path.suffix}")


def write_json(data: dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path

