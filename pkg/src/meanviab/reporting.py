"""JSON report envelopes, schema validation and deterministic file output."""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path as FsPath

import jsonschema
import numpy as np

SCHEMA_VERSION = 1


def sanitize(obj):
    """Plain JSON types only; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return sanitize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def load_schema(command: str) -> dict:
    name = command.replace("-", "_")
    text = resources.files("meanviab").joinpath("schemas", f"{name}.v{SCHEMA_VERSION}.json").read_text()
    return json.loads(text)


def envelope(command: str, config: dict, verdicts: list, result: dict) -> dict:
    doc = {
        "schema": f"meanviab/{command.replace('-', '_')}",
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "verdicts": verdicts,
        "passed": all(v["passed"] is not False for v in verdicts),
        "result": result,
    }
    doc = sanitize(doc)
    jsonschema.validate(doc, load_schema(command))
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, doc: dict) -> None:
    p = FsPath(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dumps(doc))


def write_text(path, text: str) -> None:
    p = FsPath(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
