"""Geospatial connectivity map: gridded feature aggregates plus prediction layers.

The feature layer keeps a running mean of the nine context features per grid
cell; prediction layers store per-operator predicted data rates computed from
those means. Anticipatory schemes query the map at predicted future positions.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .errors import DataError, ModelError
from .trace import FEATURE_NAMES, ContextSample

DEFAULT_CELL_SIZE = 25.0
_PAYLOAD_IDX = FEATURE_NAMES.index("payload_mb")
_SINR_IDX = FEATURE_NAMES.index("sinr")


def grid_key(position: tuple[float, float], cell_size: float) -> tuple[int, int]:
    """Componentwise floor division of a planar position by the cell size."""
    if cell_size <= 0:
        raise DataError(f"cell size must be > 0, got {cell_size}")
    return (
        math.floor(position[0] / cell_size),
        math.floor(position[1] / cell_size),
    )


class ConnectivityMap:
    """Mutable while building; freeze() makes it safe to share across readers."""

    def __init__(self, cell_size: float = DEFAULT_CELL_SIZE):
        if cell_size <= 0:
            raise DataError(f"cell size must be > 0, got {cell_size}")
        self.cell_size = float(cell_size)
        self.counts: dict[tuple[int, int], int] = {}
        self.means: dict[tuple[int, int], np.ndarray] = {}
        self.layers: dict[tuple[str, str], dict[tuple[int, int], float]] = {}
        self.frozen = False

    def __len__(self) -> int:
        return len(self.counts)

    def insert(self, sample: ContextSample) -> None:
        """Fold one sample into its cell's running feature means."""
        if self.frozen:
            raise DataError("connectivity map is frozen")
        key = grid_key(sample.position, self.cell_size)
        x = sample.features()
        if key in self.counts:
            self.counts[key] += 1
            mean = self.means[key]
            mean += (x - mean) / self.counts[key]
        else:
            self.counts[key] = 1
            self.means[key] = x

    def insert_all(self, samples: Iterable[ContextSample]) -> None:
        for s in samples:
            self.insert(s)

    def freeze(self) -> "ConnectivityMap":
        self.frozen = True
        return self

    def build_prediction_layer(self, forest, payload_mb: float) -> tuple[str, str]:
        """Predict the data rate for every populated cell.

        Cell feature vectors are the stored means with the payload feature
        overridden by the given assumption. The layer is keyed by the model's
        (operator, direction) binding.
        """
        if not self.counts:
            raise DataError("feature layer is empty")
        if tuple(forest.feature_names) != FEATURE_NAMES:
            raise ModelError(
                f"model feature schema {forest.feature_names} does not match "
                f"map schema {FEATURE_NAMES}"
            )
        keys = list(self.counts.keys())
        X = np.stack([self.means[k] for k in keys])
        X[:, _PAYLOAD_IDX] = payload_mb
        rates = np.atleast_1d(forest.predict(X))
        layer_key = (forest.mno, forest.direction)
        self.layers[layer_key] = {k: float(r) for k, r in zip(keys, rates)}
        return layer_key

    def query_features(self, position: tuple[float, float]) -> np.ndarray | None:
        """Mean feature vector of the cell at `position`, or None if unobserved."""
        mean = self.means.get(grid_key(position, self.cell_size))
        return None if mean is None else mean.copy()

    def query_sinr(self, position: tuple[float, float]) -> float | None:
        mean = self.means.get(grid_key(position, self.cell_size))
        return None if mean is None else float(mean[_SINR_IDX])

    def has_layer(self, mno: str, direction: str) -> bool:
        return (mno, direction) in self.layers

    def query_rate(
        self, position: tuple[float, float], mno: str, direction: str
    ) -> float | None:
        """Predicted rate at `position` from the (mno, direction) layer, or None."""
        layer = self.layers.get((mno, direction))
        if layer is None:
            raise ModelError(f"no prediction layer for ({mno!r}, {direction!r})")
        return layer.get(grid_key(position, self.cell_size))

    def to_dict(self) -> dict:
        keys = sorted(self.counts.keys())
        return {
            "cell_size": self.cell_size,
            "cells": [
                {
                    "key": list(k),
                    "count": self.counts[k],
                    "means": self.means[k].tolist(),
                }
                for k in keys
            ],
            "layers": [
                {
                    "mno": mno,
                    "direction": direction,
                    "values": [[list(k), v] for k, v in sorted(layer.items())],
                }
                for (mno, direction), layer in sorted(self.layers.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConnectivityMap":
        cmap = cls(cell_size=d["cell_size"])
        for cell in d["cells"]:
            key = tuple(cell["key"])
            cmap.counts[key] = cell["count"]
            cmap.means[key] = np.asarray(cell["means"], dtype=np.float64)
        for layer in d["layers"]:
            cmap.layers[(layer["mno"], layer["direction"])] = {
                tuple(k): v for k, v in layer["values"]
            }
        return cmap

    def export_csv(self) -> str:
        """Per-cell table (key, count, nine means, layer values) for plotting."""
        layer_keys = sorted(self.layers.keys())
        header = (
            ["kx", "ky", "count"]
            + [f"mean_{name}" for name in FEATURE_NAMES]
            + [f"rate_{mno}_{direction}" for mno, direction in layer_keys]
        )
        lines = [",".join(header)]
        for key in sorted(self.counts.keys()):
            row = [str(key[0]), str(key[1]), str(self.counts[key])]
            row += [repr(v) for v in self.means[key].tolist()]
            for lk in layer_keys:
                v = self.layers[lk].get(key)
                row.append("" if v is None else repr(v))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"
