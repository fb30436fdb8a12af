"""Visual triplet construction and candidate pruning.

Candidate visual triplets are the full Cartesian product of scene boxes
(including self-pairs). Two pruning passes exist: a keyword-driven spatial
filter applied per text triplet, and a box-size prior applied per scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import List, Optional, Sequence, Set

from .core import BBox, ImageRef, TextTriplet, VisualTriplet, center, union_box

HORIZONTAL = "horizontal"
VERTICAL = "vertical"
SUBJECT_BEFORE = "subject-before-object"
SUBJECT_AFTER = "subject-after-object"


class EmptySceneError(ValueError):
    """Raised when a scene has no boxes."""


class AllFilteredError(ValueError):
    """Raised when the size prior would remove every box."""


@dataclass(frozen=True)
class SpatialRule:
    """Keyword-triggered center-ordering constraint.

    ``order`` is read along the rule's axis: subject-before-object keeps
    pairs whose subject center precedes the object center (left/above).
    """

    keywords: tuple
    axis: str
    order: str

    def __post_init__(self) -> None:
        if not self.keywords:
            raise ValueError("spatial rule needs at least one keyword")
        if self.axis not in (HORIZONTAL, VERTICAL):
            raise ValueError(f"unknown axis: {self.axis}")
        if self.order not in (SUBJECT_BEFORE, SUBJECT_AFTER):
            raise ValueError(f"unknown order: {self.order}")

    def matches(self, predicate_text: str) -> bool:
        lowered = predicate_text.lower()
        return any(k.lower() in lowered for k in self.keywords)

    def pair_allowed(self, subject: BBox, object_: BBox) -> bool:
        axis = 0 if self.axis == HORIZONTAL else 1
        s, o = center(subject)[axis], center(object_)[axis]
        return s < o if self.order == SUBJECT_BEFORE else s > o


def load_rules(path: Optional[str] = None) -> List[SpatialRule]:
    """Load a rule table from JSON; defaults to the shipped table.

    Rejects tables where one keyword maps to conflicting orders on the
    same axis.
    """
    if path is None:
        raw = resources.files("tripletground.data").joinpath("spatial_rules.json").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    rules = [
        SpatialRule(tuple(item["keywords"]), item["axis"], item["order"])
        for item in json.loads(raw)
    ]
    seen = {}
    for rule in rules:
        for keyword in rule.keywords:
            key = (keyword.lower(), rule.axis)
            if seen.setdefault(key, rule.order) != rule.order:
                raise ValueError(f"conflicting orders for keyword {keyword!r}")
    return rules


def build_visual_triplets(boxes: Sequence[BBox]) -> List[VisualTriplet]:
    """All N^2 box pairs in subject-major order, self-pairs flagged."""
    if not boxes:
        raise EmptySceneError("scene has no boxes")
    triplets = []
    for k, subject in enumerate(boxes):
        for l, object_ in enumerate(boxes):
            triplets.append(
                VisualTriplet(
                    subject_box=k,
                    object_box=l,
                    union=union_box(subject, object_),
                    is_self_relation=k == l,
                )
            )
    return triplets


def allowed_pair_indices(
    text_triplet: TextTriplet,
    visual_triplets: Sequence[VisualTriplet],
    boxes: Sequence[BBox],
    rules: Sequence[SpatialRule],
) -> Set[int]:
    """Indices of visual triplets compatible with one text triplet.

    A matched spatial rule removes pairs violating its center ordering and
    all self-relations (a spatial relation implies two distinct entities).
    Several matched rules all apply. When no rule matches, everything is
    allowed.
    """
    matched = [r for r in rules if r.matches(text_triplet.predicate_text)]
    if not matched:
        return set(range(len(visual_triplets)))
    allowed = set()
    for idx, vt in enumerate(visual_triplets):
        if vt.is_self_relation:
            continue
        subject, object_ = boxes[vt.subject_box], boxes[vt.object_box]
        if all(r.pair_allowed(subject, object_) for r in matched):
            allowed.add(idx)
    return allowed


def spatial_filter(
    text_triplet: TextTriplet,
    visual_triplets: Sequence[VisualTriplet],
    boxes: Sequence[BBox],
    rules: Sequence[SpatialRule],
) -> List[VisualTriplet]:
    """Visual triplets surviving the keyword filter for one text triplet."""
    keep = allowed_pair_indices(text_triplet, visual_triplets, boxes, rules)
    return [vt for idx, vt in enumerate(visual_triplets) if idx in keep]


def size_prior_filter(
    boxes: Sequence[BBox], image: ImageRef, fraction: float
) -> List[int]:
    """Indices of boxes at least ``fraction`` of the image area.

    Raises AllFilteredError when nothing survives; the caller is expected
    to disable the prior in that case.
    """
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1): {fraction}")
    threshold = fraction * image.width * image.height
    kept = [i for i, b in enumerate(boxes) if b.area >= threshold]
    if not kept:
        raise AllFilteredError("size prior removed every box")
    return kept
