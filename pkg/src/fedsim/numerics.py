"""Flat parameter-vector arithmetic shared by the trainer and the aggregators."""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence, Tuple

import numpy as np

from fedsim.errors import LayoutError, UsageError

Layout = Tuple[Tuple[str, Tuple[int, ...]], ...]


def layout_size(layout: Layout) -> int:
    return sum(prod(shape) for _, shape in layout)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """A flat float64 vector plus the (name, shape) list mapping it to tensors.

    The underlying array is marked read-only so vectors can be shared freely
    between threads.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        layout = tuple((str(name), tuple(int(d) for d in shape)) for name, shape in self.layout)
        if values.size != layout_size(layout):
            raise LayoutError(
                f"vector has {values.size} values but layout implies {layout_size(layout)}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    @classmethod
    def from_tensors(cls, tensors: Sequence[Tuple[str, np.ndarray]]) -> "ParamVector":
        layout = tuple((name, np.shape(t)) for name, t in tensors)
        flat = np.concatenate([np.asarray(t, dtype=np.float64).ravel() for _, t in tensors])
        return cls(flat, layout)

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout_size(layout)), layout)

    def tensors(self) -> dict:
        """Views of the flat vector, one per named tensor."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = prod(shape)
            out[name] = self.values[offset : offset + n].reshape(shape)
            offset += n
        return out

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def _check_layouts(vectors: Sequence[ParamVector]) -> Layout:
    layout = vectors[0].layout
    for v in vectors[1:]:
        if v.layout != layout:
            raise LayoutError("parameter vectors have different layouts")
    return layout


def weighted_sum(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Element-wise ``sum_j weights[j] * vectors[j]``.

    Terms are accumulated strictly in the given order so that callers who sort
    their inputs get bit-reproducible results.
    """
    if len(vectors) == 0:
        raise UsageError("weighted_sum needs at least one vector")
    if len(weights) != len(vectors):
        raise UsageError(f"got {len(vectors)} vectors but {len(weights)} weights")
    layout = _check_layouts(vectors)
    acc = float(weights[0]) * vectors[0].values
    for w, v in zip(weights[1:], vectors[1:]):
        acc = acc + float(w) * v.values
    return ParamVector(acc, layout)


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``a * x + y``."""
    if x.layout != y.layout:
        raise LayoutError("axpy operands have different layouts")
    return ParamVector(float(a) * x.values + y.values, x.layout)


def coordinate_median(vectors: Sequence[ParamVector]) -> ParamVector:
    """Per-coordinate median; even counts take the mean of the two middle values."""
    if len(vectors) == 0:
        raise UsageError("coordinate_median needs at least one vector")
    layout = _check_layouts(vectors)
    stacked = np.stack([v.values for v in vectors])
    return ParamVector(np.median(stacked, axis=0), layout)


def l2_norm(x: ParamVector) -> float:
    return float(np.linalg.norm(x.values))
