"""Dropout mask containers and their JSON wire format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from divdrop.errors import InvalidMask

BANK_FORMAT = "divdrop.maskbank/1"


@dataclass(frozen=True, eq=False)
class LayerMask:
    """Kept-neuron indicator for one dropout layer plus inclusion probabilities."""

    layer: int
    kept: np.ndarray
    marginals: np.ndarray

    def __post_init__(self):
        kept = np.array(self.kept, dtype=bool).ravel()
        marg = np.array(self.marginals, dtype=np.float64).ravel()
        if kept.shape != marg.shape:
            raise InvalidMask(f"layer {self.layer}: kept has {kept.size} entries, marginals {marg.size}")
        if not kept.any():
            raise InvalidMask(f"layer {self.layer}: mask keeps no neurons")
        if not np.all(np.isfinite(marg)) or np.any(marg < 0) or np.any(marg > 1 + 1e-12):
            raise InvalidMask(f"layer {self.layer}: marginals must lie in [0, 1]")
        if np.any(marg[kept] <= 0):
            raise InvalidMask(f"layer {self.layer}: kept neuron with zero inclusion probability")
        kept.setflags(write=False)
        marg.setflags(write=False)
        object.__setattr__(self, "kept", kept)
        object.__setattr__(self, "marginals", marg)

    @property
    def size(self) -> int:
        return self.kept.size

    def scale(self) -> np.ndarray:
        """Per-neuron multiplier ``m_j / pi_j`` (zero for dropped neurons)."""
        out = np.zeros(self.size)
        out[self.kept] = 1.0 / self.marginals[self.kept]
        return out


@dataclass(frozen=True)
class MaskSet:
    """One mask per dropout layer, ordered by layer index."""

    layers: tuple[LayerMask, ...]
    kind: str = "custom"

    def layer(self, h: int) -> LayerMask:
        for m in self.layers:
            if m.layer == h:
                return m
        raise KeyError(h)

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(m.layer for m in self.layers)


@dataclass(frozen=True)
class MaskBank:
    sets: tuple[MaskSet, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.sets) < 1:
            raise InvalidMask("a mask bank needs at least one mask set")
        ids = self.sets[0].layer_ids
        for s in self.sets:
            if s.layer_ids != ids:
                raise InvalidMask("all mask sets in a bank must cover the same layers")

    def __len__(self) -> int:
        return len(self.sets)

    def __iter__(self) -> Iterator[MaskSet]:
        return iter(self.sets)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return MaskBank(self.sets[item], dict(self.provenance))
        return self.sets[item]

    @property
    def kind(self) -> str:
        return self.sets[0].kind

    @property
    def layer_sizes(self) -> dict[int, int]:
        return {m.layer: m.size for m in self.sets[0].layers}

    def kept_matrix(self, h: int) -> np.ndarray:
        """``(T, N_h)`` boolean matrix of kept neurons for layer ``h``."""
        return np.stack([s.layer(h).kept for s in self.sets])

    @classmethod
    def all_ones(cls, layer_sizes: dict[int, int], T: int = 1) -> MaskBank:
        """Bank whose passes keep every neuron with weight one (the deterministic net)."""
        layers = tuple(
            LayerMask(h, np.ones(n, dtype=bool), np.ones(n)) for h, n in sorted(layer_sizes.items())
        )
        return cls(tuple(MaskSet(layers, "all-ones") for _ in range(T)), {"sampler": {"kind": "all-ones"}})

    def to_dict(self) -> dict:
        return {
            "format": BANK_FORMAT,
            "kind": self.kind,
            "layers": [{"layer": h, "size": n} for h, n in self.layer_sizes.items()],
            "provenance": self.provenance,
            "masks": [
                [
                    {"layer": m.layer, "kept": m.kept.tolist(), "marginals": m.marginals.tolist()}
                    for m in s.layers
                ]
                for s in self.sets
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> MaskBank:
        if doc.get("format") != BANK_FORMAT:
            raise InvalidMask(f"unsupported mask bank format {doc.get('format')!r}")
        kind = doc.get("kind", "custom")
        sizes = {int(d["layer"]): int(d["size"]) for d in doc["layers"]}
        sets = []
        for entry in doc["masks"]:
            layers = tuple(LayerMask(int(m["layer"]), m["kept"], m["marginals"]) for m in entry)
            for m in layers:
                if sizes.get(m.layer) != m.size:
                    raise InvalidMask(f"layer {m.layer}: size {m.size} disagrees with header")
            sets.append(MaskSet(layers, kind))
        return cls(tuple(sets), doc.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> MaskBank:
        return cls.from_dict(json.loads(Path(path).read_text()))


def stack_layer_masks(layer: int, kept: np.ndarray, marginals: np.ndarray) -> list[LayerMask]:
    """Wrap a ``(T, N)`` kept matrix sharing one marginal vector into LayerMasks."""
    return [LayerMask(layer, row, marginals) for row in np.asarray(kept, dtype=bool)]


def bank_from_layers(per_layer: Sequence[list[LayerMask]], kind: str, provenance: dict) -> MaskBank:
    T = len(per_layer[0])
    sets = tuple(MaskSet(tuple(layer[t] for layer in per_layer), kind) for t in range(T))
    return MaskBank(sets, provenance)
