"""Named per-layer parameter container and the statistics reported on it."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import tensor_std

ROLES = ("weights", "bias")


class ParamStore:
    """Ordered map ``(layer_name, role) -> float32 tensor``.

    Insertion order is the model's layer order; ``clone`` deep-copies every
    tensor so perturbed copies never alias the source.
    """

    def __init__(self, entries=None):
        self._entries: OrderedDict[tuple[str, str], np.ndarray] = OrderedDict()
        for key, value in (entries or {}).items():
            self[key] = value

    def __getitem__(self, key: tuple[str, str]) -> np.ndarray:
        return self._entries[key]

    def __setitem__(self, key: tuple[str, str], value) -> None:
        layer, role = key
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
        self._entries[(layer, role)] = np.asarray(value, dtype=np.float32)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def keys(self):
        return self._entries.keys()

    def layers(self) -> list[str]:
        """Layer names in order, each listed once."""
        seen: list[str] = []
        for layer, _ in self._entries:
            if layer not in seen:
                seen.append(layer)
        return seen

    def clone(self) -> "ParamStore":
        return ParamStore(OrderedDict((k, v.copy()) for k, v in self._entries.items()))

    def equal_bits(self, other: "ParamStore") -> bool:
        """True when keys, shapes and every float32 bit pattern match."""
        if list(self.keys()) != list(other.keys()):
            return False
        for key, a in self.items():
            b = other[key]
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


@dataclass(frozen=True)
class LayerStats:
    layer_name: str
    mean: float
    std: float
    count: int


def layer_stats(model) -> list[LayerStats]:
    """Mean and population std of each layer's weights (bias excluded)."""
    out = []
    for (layer, role), w in model.params.items():
        if role != "weights":
            continue
        flat = w.astype(np.float64).ravel()
        out.append(LayerStats(layer, float(flat.mean()), tensor_std(flat), int(flat.size)))
    return out


def param_count(model) -> dict[str, int]:
    counts = {"weights": 0, "bias": 0}
    for (_, role), t in model.params.items():
        counts[role] += int(t.size)
    counts["total"] = counts["weights"] + counts["bias"]
    return counts
