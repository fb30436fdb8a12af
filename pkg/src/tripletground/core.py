"""Canonical data types shared across the grounding engine.

Boxes are corner-form ``(x_min, y_min, x_max, y_max)`` in float pixels.
Entity and box indices are 0-based everywhere. Embedding vectors are plain
1-D float64 numpy arrays, normalized once at ingestion so cosine similarity
reduces to a dot product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

# Embeddings are bare numpy arrays; `normalize` is the single ingestion point.
EmbeddingVec = np.ndarray


class ZeroVectorError(ValueError):
    """Raised when a vector with (near-)zero norm cannot be normalized."""


class NonFiniteError(ValueError):
    """Raised when a vector contains NaN or infinite entries."""


class DimensionMismatchError(ValueError):
    """Raised when two vectors of different dimension are combined."""


@dataclass(frozen=True)
class ImageRef:
    """Image metadata; pixels never enter the engine, only dimensions."""

    id: str
    width: int
    height: int
    uri: Optional[str] = None

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.id!r}: non-positive dimensions")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, corner form, float pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"inverted or zero-area box: {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def within(self, image: ImageRef) -> bool:
        return (
            self.x_min >= 0
            and self.y_min >= 0
            and self.x_max <= image.width
            and self.y_max <= image.height
        )

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class TextEntity:
    """A noun phrase from the caption, attributes included."""

    id: int
    surface: str
    verbatim: bool = True  # False when the surface is an LLM normalization

    def __post_init__(self) -> None:
        if not self.surface:
            raise ValueError("entity surface must be non-empty")


# Slot names that the degenerate-fill rule may synthesize.
FILLABLE_SLOTS = frozenset({"predicate", "object"})


@dataclass(frozen=True)
class TextTriplet:
    """(subject, predicate, object) parsed from a caption.

    ``filled_slots`` records slots synthesized by the degenerate-fill rule;
    ``predicate_phrase`` is the composed sentence actually sent to the text
    encoder (empty until composition).
    """

    subject_id: int
    object_id: int
    subject_text: str
    predicate_text: str
    object_text: str
    filled_slots: frozenset = frozenset()
    predicate_phrase: str = ""

    def __post_init__(self) -> None:
        if not self.subject_text:
            raise ValueError("triplet subject must be non-empty")
        if not self.predicate_text or not self.object_text:
            raise ValueError("triplet slots must be non-empty after degenerate fill")
        if not self.filled_slots <= FILLABLE_SLOTS:
            raise ValueError(f"unknown filled slots: {self.filled_slots}")
        if (
            self.subject_id == self.object_id
            and "object" not in self.filled_slots
            and self.subject_text != self.object_text
        ):
            raise ValueError(
                "subject/object ids may only coincide for a filled object slot "
                "or identical surfaces"
            )

    @property
    def is_self_referential(self) -> bool:
        return self.subject_id == self.object_id


@dataclass(frozen=True)
class VisualTriplet:
    """A (subject box, relation region, object box) candidate.

    The relation region is the union box; a pair of a box with itself is a
    self-relation and its union is the box itself.
    """

    subject_box: int
    object_box: int
    union: BBox
    is_self_relation: bool

    def __post_init__(self) -> None:
        if self.is_self_relation != (self.subject_box == self.object_box):
            raise ValueError("is_self_relation inconsistent with box indices")


@dataclass(frozen=True)
class TripletEmbedding:
    """Unit vectors for the three slots of one triplet."""

    subject: EmbeddingVec
    predicate: EmbeddingVec
    object: EmbeddingVec

    def __post_init__(self) -> None:
        dims = {self.subject.shape, self.predicate.shape, self.object.shape}
        if len(dims) != 1:
            raise DimensionMismatchError(f"slot dimensions differ: {dims}")


@dataclass
class StructuralSimilarity:
    """Similarity matrix over (text triplet, visual triplet) pairs.

    ``values`` holds raw slot-cosine sums in [-3, 3]; ``allowed`` is False
    where a pair was filtered out. ``masked()`` applies the sentinel.
    """

    values: np.ndarray
    allowed: np.ndarray
    masked_value: float
    row_triplets: Tuple[TextTriplet, ...]
    col_triplets: Tuple[VisualTriplet, ...]

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def masked(self) -> np.ndarray:
        return np.where(self.allowed, self.values, self.masked_value)


@dataclass
class Indicator:
    """One-hot match matrix: row-stochastic for text-to-image, column for
    image-to-text."""

    matrix: np.ndarray
    direction: str
    row_triplets: Tuple[TextTriplet, ...]
    col_triplets: Tuple[VisualTriplet, ...]


@dataclass
class InstanceScores:
    """Entity-by-box score matrix after triplet-to-instance propagation.

    ``support`` counts how many matched triplet pairs contributed to each
    cell; None means every cell is considered supported (direct matrix
    construction in tests and ad-hoc callers).
    """

    values: np.ndarray  # shape (M text entities, N boxes)
    support: Optional[np.ndarray] = None

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class GroundingResult:
    """Per-query selections with their propagated scores.

    Queries are text entities in the text-to-image direction and visual
    entities in the image-to-text direction. ``selections[q]`` holds exactly
    one index in argmax mode, zero or more in threshold mode.
    """

    direction: str
    selections: Tuple[Tuple[int, ...], ...]
    scores: Tuple[Tuple[float, ...], ...]
    low_confidence: frozenset = frozenset()
    fallback: bool = False
    flags: frozenset = frozenset()

    def top(self, query: int) -> Optional[int]:
        """First (best) selected index for a query, None if empty."""
        sel = self.selections[query]
        return sel[0] if sel else None


def normalize(v: Sequence[float]) -> EmbeddingVec:
    """Scale a raw vector to unit Euclidean norm, preserving direction."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("vector contains NaN or Inf")
    norm = float(np.linalg.norm(arr))
    if norm < 1e-12:
        raise ZeroVectorError("cannot normalize a zero vector")
    return arr / norm


def cosine(a: EmbeddingVec, b: EmbeddingVec) -> float:
    """Cosine similarity of two unit vectors (a plain dot product)."""
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimensions differ: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def union_box(a: BBox, b: BBox) -> BBox:
    """Minimal axis-aligned rectangle covering both boxes."""
    return BBox(
        min(a.x_min, b.x_min),
        min(a.y_min, b.y_min),
        max(a.x_max, b.x_max),
        max(a.y_max, b.y_max),
    )


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union, in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def center(a: BBox) -> Tuple[float, float]:
    """Box center point."""
    return ((a.x_min + a.x_max) / 2.0, (a.y_min + a.y_max) / 2.0)
