from pathlib import Path

import pytest

from servtime.core.exceptions import MissingInputError
from servtime.models.rpp import RppModel
from servtime.utils.helpers import MODEL_CLASSES, lazy_import, require_file, sibling, write_json


def test_lazy_import():
    sqrt = lazy_import("math.sqrt")
    assert sqrt(25) == 5


def test_lazy_import_failure():
    with pytest.raises(ImportError) as exc:
        lazy_import("nonexistent_mod.func")

    assert "nonexistent_mod.func" in str(exc.value)
    assert "No module named" in str(exc.value)


def test_model_classes_resolve():
    # test that every checkpoint kind maps to a class declaring that kind
    for kind, path in MODEL_CLASSES.items():
        assert lazy_import(path).kind == kind
    assert lazy_import(MODEL_CLASSES["rpp"]) is RppModel


def test_require_file(tmp_path: Path):
    path = tmp_path / "x.csv"
    with pytest.raises(MissingInputError, match="event file not found"):
        require_file(path, "event file")
    path.write_text("", encoding="utf-8")
    assert require_file(path) == path
    with pytest.raises(MissingInputError):
        require_file(tmp_path)


def test_sibling():
    assert sibling(Path("out/run.csv"), ".test") == Path("out/run.test.csv")
    assert sibling(Path("report.json"), ".accepted") == Path("report.accepted.json")


def test_write_json_is_sorted(tmp_path: Path):
    path = write_json({"b": 1, "a": [1.5]}, tmp_path / "deep" / "r.json")
    assert path.read_text(encoding="utf-8") == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
