"""JSON checkpoints: parameter name -> {shape, dtype, values} plus metadata."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "geodyn-checkpoint/1"


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resolve_path(path) -> Path:
    """Accept a checkpoint path with or without the ``.json`` suffix."""
    p = Path(path)
    if p.suffix != ".json" and not p.exists():
        p = p.with_name(p.name + ".json")
    return p


def dumps(tensors: dict[str, np.ndarray], metadata: dict) -> str:
    body = {}
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        # float32 -> float64 is exact, and repr of a float64 round-trips
        body[name] = {"shape": list(arr.shape), "dtype": arr.dtype.name,
                      "values": arr.astype(np.float64).reshape(-1).tolist()}
    doc = {"format": FORMAT, "metadata": metadata, "tensors": body}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save(path, tensors: dict[str, np.ndarray], metadata: dict) -> Path:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_name(path.name + ".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(tensors, metadata), encoding="utf-8")
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = resolve_path(path)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    tensors = {}
    for name, entry in doc["tensors"].items():
        arr = np.asarray(entry["values"], dtype=np.float64).astype(entry["dtype"])
        tensors[name] = arr.reshape(entry["shape"])
    return tensors, doc["metadata"]
