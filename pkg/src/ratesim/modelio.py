"""Versioned JSON persistence for trained models and connectivity maps.

Documents are self-describing (format tag + version) and written canonically
(sorted keys, fixed separators) so identical inputs produce byte-identical
files. Floats survive the round trip exactly via repr-based JSON encoding.
"""

from __future__ import annotations

import json
from pathlib import Path

from .connmap import ConnectivityMap
from .derivation import DerivationModel
from .errors import ModelError
from .regression import RegressionForest

MODEL_FORMAT = "ratesim-model"
MAP_FORMAT = "ratesim-map"
VERSION = 1


def dumps_canonical(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def _load_document(path: str | Path, expected_format: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"model document not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != expected_format:
        raise ModelError(f"{path}: expected a {expected_format!r} document")
    if doc.get("version") != VERSION:
        raise ModelError(
            f"{path}: unsupported version {doc.get('version')!r} (expected {VERSION})"
        )
    return doc


def save_model_document(
    path: str | Path,
    forest: RegressionForest,
    derivation: DerivationModel,
) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": VERSION,
        "forest": forest.to_dict(),
        "derivation": derivation.to_dict(),
    }
    Path(path).write_text(dumps_canonical(doc), encoding="utf-8", newline="\n")


def load_model_document(path: str | Path) -> tuple[RegressionForest, DerivationModel]:
    doc = _load_document(path, MODEL_FORMAT)
    return (
        RegressionForest.from_dict(doc["forest"]),
        DerivationModel.from_dict(doc["derivation"]),
    )


def save_map_document(path: str | Path, cmap: ConnectivityMap) -> None:
    doc = {"format": MAP_FORMAT, "version": VERSION, "map": cmap.to_dict()}
    Path(path).write_text(dumps_canonical(doc), encoding="utf-8", newline="\n")


def load_map_document(path: str | Path) -> ConnectivityMap:
    doc = _load_document(path, MAP_FORMAT)
    return ConnectivityMap.from_dict(doc["map"])
