"""Versioned JSON checkpoint container.

Layout::

    {"format": "safedrug-checkpoint", "version": 1,
     "params": {name: {"shape": [...], "values": [...]}},
     "optimizer": {...} | null, "config": {...}, "meta": {...}}

Floats are written with ``repr`` precision, so save/load is bit-exact and
saving the same state twice gives identical bytes.
"""

import json
from pathlib import Path

import numpy as np

from safedrug.autodiff.optim import AdamState
from safedrug.errors import ParseError, VersionError

FORMAT = "safedrug-checkpoint"
VERSION = 1


def dumps(params, optimizer=None, config=None, meta=None):
    body = {
        "format": FORMAT,
        "version": VERSION,
        "params": {
            name: {"shape": list(arr.shape), "values": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in sorted(params.items())
        },
        "optimizer": optimizer.to_dict() if optimizer is not None else None,
        "config": config or {},
        "meta": meta or {},
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, params, optimizer=None, config=None, meta=None):
    """``params`` maps names to arrays."""
    Path(path).write_text(dumps(params, optimizer, config, meta) + "\n", encoding="utf-8")


def loads(text):
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint is not valid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(body, dict) or body.get("format") != FORMAT:
        raise ParseError("not a safedrug checkpoint")
    if "version" not in body:
        raise VersionError("checkpoint has no version field")
    if body["version"] != VERSION:
        raise VersionError(f"unsupported checkpoint version {body['version']!r}")
    params = {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in body["params"].items()
    }
    optimizer = AdamState.from_dict(body["optimizer"]) if body.get("optimizer") else None
    return {"params": params, "optimizer": optimizer, "config": body.get("config", {}), "meta": body.get("meta", {})}


def load_checkpoint(path):
    return loads(Path(path).read_text(encoding="utf-8"))
