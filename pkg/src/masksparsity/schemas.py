"""JSON schemas shipped with the package, and validation helpers."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

NAMES = ("mask", "report", "metrics", "hist", "error", "plan", "verify")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in NAMES:
        raise KeyError(f"no schema named {name!r}")
    return json.loads(resources.files(__package__).joinpath("schemas", f"{name}.json").read_text())


def validate(name: str, doc) -> None:
    """Raise jsonschema.ValidationError when ``doc`` does not match schema ``name``."""
    jsonschema.validate(doc, load_schema(name))


def validate_jsonl(name: str, text: str) -> int:
    count = 0
    for line in text.splitlines():
        if line.strip():
            validate(name, json.loads(line))
            count += 1
    return count
