from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import pytest

from config import ConfigError, from_dict, load_dataclass, merge, nested, parse_assignment, to_dict


@dataclass(frozen=True)
class Inner:
    size: tuple[int, int, int] = (1, 2, 3)
    mode: Literal["a", "b"] = "a"

    def __post_init__(self) -> None:
        if min(self.size) < 1:
            raise ValueError("size must be >= 1")


@dataclass(frozen=True)
class Outer:
    rate: float = 0.5
    steps: int = 10
    flag: bool = False
    name: str = "x"
    note: str | None = None
    inner: Inner = field(default_factory=Inner)
    mults: tuple[int, ...] = (1, 2)


def test_from_dict_builds_nested_and_tuples():
    o = from_dict(Outer, {"rate": 1, "inner": {"size": [4, 5, 6], "mode": "b"}, "mults": [1, 2, 4, 8]})
    assert o.rate == 1.0 and isinstance(o.rate, float)
    assert o.inner == Inner((4, 5, 6), "b")
    assert o.mults == (1, 2, 4, 8)


def test_unknown_keys_are_listed_sorted():
    with pytest.raises(ConfigError, match=r"Outer: unknown keys: \['a', 'z'\]"):
        from_dict(Outer, {"z": 1, "a": 2})
    with pytest.raises(ConfigError, match=r"Outer.inner: unknown keys"):
        from_dict(Outer, {"inner": {"bogus": 1}})


@pytest.mark.parametrize(
    "obj, fragment",
    [
        ({"steps": 1.5}, "Outer.steps: expected an integer"),
        ({"steps": True}, "Outer.steps: expected an integer"),
        ({"flag": 1}, "Outer.flag: expected true/false"),
        ({"rate": "fast"}, "Outer.rate: expected a number"),
        ({"name": 3}, "Outer.name: expected a string"),
        ({"inner": {"size": [1, 2]}}, "expected 3 items"),
        ({"inner": {"mode": "c"}}, "must be one of"),
        ({"name": None}, "null not allowed"),
    ],
)
def test_wrong_types_name_the_dotted_key(obj, fragment):
    with pytest.raises(ConfigError, match=fragment):
        from_dict(Outer, obj)


def test_optional_accepts_null():
    assert from_dict(Outer, {"note": None}).note is None


def test_post_init_errors_become_config_errors():
    with pytest.raises(ConfigError, match="size must be >= 1"):
        from_dict(Outer, {"inner": {"size": [0, 1, 1]}})


def test_to_dict_lists_tuples():
    d = to_dict(Outer())
    assert d["inner"]["size"] == [1, 2, 3]
    assert from_dict(Outer, d) == Outer()


def test_merge_is_recursive_and_pure():
    base = {"a": {"x": 1, "y": 2}, "b": 1}
    out = merge(base, {"a": {"y": 3}, "c": 4})
    assert out == {"a": {"x": 1, "y": 3}, "b": 1, "c": 4}
    assert base == {"a": {"x": 1, "y": 2}, "b": 1}


def test_parse_assignment_json_and_bare_strings():
    assert parse_assignment("seg.epochs=3") == (["seg", "epochs"], 3)
    assert parse_assignment("seg.patch_size=[16,16,16]") == (["seg", "patch_size"], [16, 16, 16])
    assert parse_assignment("corpus.organ=kidney") == (["corpus", "organ"], "kidney")
    assert nested(["a", "b"], 1) == {"a": {"b": 1}}
    with pytest.raises(ConfigError, match="key=value"):
        parse_assignment("seg.epochs")
    with pytest.raises(ConfigError, match="empty key"):
        parse_assignment("=3")


def test_load_dataclass_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_dataclass(Outer, tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_dataclass(Outer, bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1]", encoding="utf-8")
    with pytest.raises(ConfigError, match="must be an object"):
        load_dataclass(Outer, arr)
