"""Structural matching: triplet similarity, one-hot assignment,
triplet-to-instance propagation, and selection.

The similarity between a text triplet and a visual triplet is the sum of
slot-wise cosines. Each text triplet is matched to its best visual triplet
(lowest index on ties), matched scores are propagated onto (entity, box)
cells through the subject role and the object role, and the best box per
entity is selected — or every box over a threshold in one-to-many mode.
A score-and-rank fallback covers captions that yield no triplets, and a
triplet-level contrastive loss is provided as a forward-only diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    BBox,
    EmbeddingVec,
    GroundingResult,
    ImageRef,
    Indicator,
    InstanceScores,
    StructuralSimilarity,
    TextTriplet,
    TripletEmbedding,
    VisualTriplet,
    cosine,
)
from .gateway import (
    EmbeddingBackend,
    EmbeddingCache,
    RegionRequest,
    embed_region,
    embed_texts,
    embed_visual_triplet,
)
from .pairing import (
    AllFilteredError,
    EmptySceneError,
    SpatialRule,
    allowed_pair_indices,
    build_visual_triplets,
    size_prior_filter,
)
from .parsing import ParsedCaption

TEXT_TO_IMAGE = "text-to-image"
IMAGE_TO_TEXT = "image-to-text"

ARGMAX = "argmax"
THRESHOLD = "threshold"

ENTITY_TEXT = "entity"
WHOLE_CAPTION = "whole-caption"


class EmptyInputError(ValueError):
    """Raised when a similarity matrix would have zero rows or columns."""


class IndexOutOfRangeError(IndexError):
    """Raised when triplet role indices exceed the entity/box counts."""


class EmptyBatchError(ValueError):
    """Raised for a contrastive-loss batch with no pairs."""


class NonPositiveSimilarityError(ValueError):
    """Raised by the literal loss variant when a similarity is <= 0."""


@dataclass(frozen=True)
class MatchConfig:
    """Matching direction, selection rule and mask sentinel.

    Ties in every argmax break to the lowest index; this is fixed, not
    configurable, so runs are reproducible.
    """

    direction: str = TEXT_TO_IMAGE
    selection: str = ARGMAX
    threshold: float = 0.0
    masked_value: float = -math.inf

    def __post_init__(self) -> None:
        if self.direction not in (TEXT_TO_IMAGE, IMAGE_TO_TEXT):
            raise ValueError(f"unknown direction: {self.direction}")
        if self.selection not in (ARGMAX, THRESHOLD):
            raise ValueError(f"unknown selection mode: {self.selection}")
        if self.selection == THRESHOLD and not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite in threshold mode")
        if not self.masked_value < -3:
            raise ValueError("masked_value must lie strictly below -3")


def structural_similarity(t: TripletEmbedding, v: TripletEmbedding) -> float:
    """Sum of subject, predicate and object cosines; in [-3, 3]."""
    return (
        cosine(t.subject, v.subject)
        + cosine(t.predicate, v.predicate)
        + cosine(t.object, v.object)
    )


def similarity_matrix(
    texts: Sequence[TripletEmbedding],
    visuals: Sequence[TripletEmbedding],
    mask: Optional[Sequence[Optional[Iterable[int]]]] = None,
    masked_value: float = -math.inf,
    row_triplets: Tuple[TextTriplet, ...] = (),
    col_triplets: Tuple[VisualTriplet, ...] = (),
) -> StructuralSimilarity:
    """All-pairs structural similarity with an optional per-row column mask.

    ``mask[i]`` is the set of allowed columns for row i (None allows all).
    Raw values are kept alongside the mask so downstream propagation can
    recover true similarities for rows whose mask was overridden.
    """
    if len(texts) == 0 or len(visuals) == 0:
        raise EmptyInputError("need at least one text and one visual triplet")
    t_subject = np.stack([t.subject for t in texts])
    t_predicate = np.stack([t.predicate for t in texts])
    t_object = np.stack([t.object for t in texts])
    v_subject = np.stack([v.subject for v in visuals])
    v_predicate = np.stack([v.predicate for v in visuals])
    v_object = np.stack([v.object for v in visuals])
    values = (
        t_subject @ v_subject.T + t_predicate @ v_predicate.T + t_object @ v_object.T
    )
    allowed = np.ones(values.shape, dtype=bool)
    if mask is not None:
        if len(mask) != len(texts):
            raise EmptyInputError("mask must provide one entry per text triplet")
        for i, columns in enumerate(mask):
            if columns is None:
                continue
            allowed[i, :] = False
            cols = list(columns)
            if cols:
                allowed[i, cols] = True
    return StructuralSimilarity(
        values=values,
        allowed=allowed,
        masked_value=masked_value,
        row_triplets=tuple(row_triplets),
        col_triplets=tuple(col_triplets),
    )


def indicator(S: StructuralSimilarity, direction: str = TEXT_TO_IMAGE) -> Indicator:
    """One-hot best-match matrix (Eq. 4 style argmax).

    text-to-image marks the best column per row; image-to-text the best row
    per column. A fully masked row/column falls back to the raw similarities
    so exactly one entry is always set.
    """
    masked = S.masked()
    matrix = np.zeros(S.values.shape, dtype=np.int8)
    if direction == TEXT_TO_IMAGE:
        for i in range(S.rows):
            row = masked[i] if S.allowed[i].any() else S.values[i]
            matrix[i, int(np.argmax(row))] = 1
    elif direction == IMAGE_TO_TEXT:
        for j in range(S.cols):
            col = masked[:, j] if S.allowed[:, j].any() else S.values[:, j]
            matrix[int(np.argmax(col)), j] = 1
    else:
        raise ValueError(f"unknown direction: {direction}")
    return Indicator(
        matrix=matrix,
        direction=direction,
        row_triplets=S.row_triplets,
        col_triplets=S.col_triplets,
    )


def instance_scores(
    S: StructuralSimilarity,
    B: Indicator,
    text_triplets: Sequence[TextTriplet],
    visual_triplets: Sequence[VisualTriplet],
    M: int,
    N: int,
) -> InstanceScores:
    """Propagate matched triplet scores onto (entity, box) cells.

    Every selected (text triplet, visual triplet) pair contributes its raw
    similarity twice: once at (subject entity, subject box) and once at
    (object entity, object box). Entities in no triplet keep zero rows.
    """
    if len(text_triplets) != S.rows or len(visual_triplets) != S.cols:
        raise IndexOutOfRangeError("index maps inconsistent with matrix shape")
    for tt in text_triplets:
        if not (0 <= tt.subject_id < M and 0 <= tt.object_id < M):
            raise IndexOutOfRangeError(f"entity id out of range in {tt}")
    for vt in visual_triplets:
        if not (0 <= vt.subject_box < N and 0 <= vt.object_box < N):
            raise IndexOutOfRangeError(f"box index out of range in {vt}")
    R = np.zeros((M, N), dtype=np.float64)
    support = np.zeros((M, N), dtype=np.int64)
    rows, cols = np.nonzero(B.matrix)
    for r, c in zip(rows.tolist(), cols.tolist()):
        score = S.values[r, c]
        tt, vt = text_triplets[r], visual_triplets[c]
        R[tt.subject_id, vt.subject_box] += score
        R[tt.object_id, vt.object_box] += score
        support[tt.subject_id, vt.subject_box] += 1
        support[tt.object_id, vt.object_box] += 1
    return InstanceScores(values=R, support=support)


def _select_rows(
    R: np.ndarray, support: Optional[np.ndarray], config: MatchConfig
) -> Tuple[list, list, list]:
    selections, scores, low_confidence = [], [], []
    for q in range(R.shape[0]):
        row = R[q]
        supported = support[q] > 0 if support is not None else np.ones(len(row), dtype=bool)
        if not row.any():
            low_confidence.append(q)
        if config.selection == ARGMAX:
            if supported.any():
                best = int(np.argmax(np.where(supported, row, -math.inf)))
            else:
                best = 0
            selections.append((best,))
            scores.append((float(row[best]),))
        else:
            picked = [int(i) for i in np.nonzero(row >= config.threshold)[0]]
            picked.sort(key=lambda i: (-row[i], i))
            selections.append(tuple(picked))
            scores.append(tuple(float(row[i]) for i in picked))
    return selections, scores, low_confidence


def select(R: InstanceScores, config: MatchConfig) -> GroundingResult:
    """Pick boxes per text entity (or entities per box, transposed).

    Argmax mode returns exactly one index per query, lowest index on ties.
    The argmax runs over cells that received at least one propagated match
    (a matched box with negative similarity still beats no-evidence cells
    at exactly zero); with no supported cell at all, index 0 is returned
    and the query flagged low-confidence, as is any all-zero row.
    Threshold mode returns every index at or above the threshold on raw
    values, best first.
    """
    matrix = R.values if config.direction == TEXT_TO_IMAGE else R.values.T
    support = R.support if config.direction == TEXT_TO_IMAGE else (
        R.support.T if R.support is not None else None
    )
    selections, scores, low_confidence = _select_rows(matrix, support, config)
    return GroundingResult(
        direction=config.direction,
        selections=tuple(selections),
        scores=tuple(scores),
        low_confidence=frozenset(low_confidence),
    )


def score_and_rank(
    caption_embedding: EmbeddingVec, box_embeddings: Sequence[EmbeddingVec]
) -> GroundingResult:
    """Whole-caption vs whole-box cosine baseline (single query)."""
    if len(box_embeddings) == 0:
        raise EmptySceneError("cannot rank an empty scene")
    sims = [cosine(caption_embedding, b) for b in box_embeddings]
    best = int(np.argmax(sims))
    return GroundingResult(
        direction=TEXT_TO_IMAGE,
        selections=((best,),),
        scores=((float(sims[best]),),),
        fallback=True,
        flags=frozenset({"fallback"}),
    )


def _remap(result: GroundingResult, kept: Sequence[int]) -> GroundingResult:
    """Translate selected box indices back into the original proposal space."""
    return GroundingResult(
        direction=result.direction,
        selections=tuple(
            tuple(kept[i] for i in sel) for sel in result.selections
        ),
        scores=result.scores,
        low_confidence=result.low_confidence,
        fallback=result.fallback,
        flags=result.flags,
    )


def ground(
    parsed: ParsedCaption,
    boxes: Sequence[BBox],
    image: ImageRef,
    backend: EmbeddingBackend,
    rules: Sequence[SpatialRule],
    config: MatchConfig,
    tta: Optional[Iterable[str]] = None,
    cache: Optional[EmbeddingCache] = None,
    size_prior: Optional[float] = None,
    subject_text_source: str = ENTITY_TEXT,
) -> GroundingResult:
    """Full grounding pipeline for one caption and one scene.

    Candidate visual triplets are the box-pair Cartesian product, pruned
    per text triplet: self-referential text triplets (degenerate-filled
    object) match only self-relations, and spatial-keyword rules prune
    pairs by center ordering. A caption with no triplets falls back to
    score_and_rank, as does the degenerate single-entity case by
    construction.

    Box indices in the result always refer to the original proposal list,
    also when a size prior dropped some proposals. In the image-to-text
    direction, proposals dropped by the prior yield empty selections.
    """
    if len(boxes) == 0:
        raise EmptySceneError("scene has no proposal boxes")
    flags = set()
    kept = list(range(len(boxes)))
    if size_prior is not None:
        try:
            kept = size_prior_filter(boxes, image, size_prior)
        except AllFilteredError:
            flags.add("size-prior-disabled")
    working = [boxes[i] for i in kept]

    if not parsed.triplets:
        caption_vec = embed_texts(backend, [parsed.caption], cache)[0]
        box_vecs = [
            embed_region(backend, RegionRequest(image, (b,)), tta, cache)
            for b in working
        ]
        result = score_and_rank(caption_vec, box_vecs)
        result = _remap(result, kept)
        return GroundingResult(
            direction=result.direction,
            selections=result.selections,
            scores=result.scores,
            low_confidence=result.low_confidence,
            fallback=True,
            flags=frozenset(flags | result.flags | {"no-triplets"}),
        )

    visual_triplets = build_visual_triplets(working)
    self_relation_cols = {
        i for i, vt in enumerate(visual_triplets) if vt.is_self_relation
    }
    mask: List[Optional[set]] = []
    for tt in parsed.triplets:
        if tt.is_self_referential:
            mask.append(set(self_relation_cols))
        else:
            mask.append(allowed_pair_indices(tt, visual_triplets, working, rules))

    if subject_text_source == WHOLE_CAPTION:
        subject_texts = [parsed.caption for _ in parsed.triplets]
    elif subject_text_source == ENTITY_TEXT:
        subject_texts = [tt.subject_text for tt in parsed.triplets]
    else:
        raise ValueError(f"unknown subject text source: {subject_text_source}")
    predicate_texts = [tt.predicate_phrase or tt.predicate_text for tt in parsed.triplets]
    object_texts = [tt.object_text for tt in parsed.triplets]
    flat = embed_texts(backend, subject_texts + predicate_texts + object_texts, cache)
    n = len(parsed.triplets)
    text_embeddings = [
        TripletEmbedding(subject=flat[i], predicate=flat[n + i], object=flat[2 * n + i])
        for i in range(n)
    ]
    visual_embeddings = [
        embed_visual_triplet(backend, working, vt, image, tta, cache)
        for vt in visual_triplets
    ]

    S = similarity_matrix(
        text_embeddings,
        visual_embeddings,
        mask=mask,
        masked_value=config.masked_value,
        row_triplets=parsed.triplets,
        col_triplets=tuple(visual_triplets),
    )
    B = indicator(S, config.direction)
    R = instance_scores(
        S, B, parsed.triplets, visual_triplets, M=len(parsed.entities), N=len(working)
    )
    result = select(R, config)

    if config.direction == TEXT_TO_IMAGE:
        result = _remap(result, kept)
    else:
        # Queries are boxes: expand back to the original proposal space.
        by_original = {orig: q for q, orig in enumerate(kept)}
        selections, scores, low = [], [], set()
        for orig in range(len(boxes)):
            q = by_original.get(orig)
            if q is None:
                selections.append(())
                scores.append(())
                low.add(orig)
            else:
                selections.append(result.selections[q])
                scores.append(result.scores[q])
                if q in result.low_confidence:
                    low.add(orig)
        result = GroundingResult(
            direction=result.direction,
            selections=tuple(selections),
            scores=tuple(scores),
            low_confidence=frozenset(low),
        )
    return GroundingResult(
        direction=result.direction,
        selections=result.selections,
        scores=result.scores,
        low_confidence=result.low_confidence,
        fallback=False,
        flags=frozenset(flags),
    )


def _log_softmax_diag(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True)) + logits.max(
        axis=axis, keepdims=True
    )
    return np.diag(logits - log_z)


def contrastive_loss(
    batch: Sequence[Tuple[TripletEmbedding, TripletEmbedding]],
    temperature: float = 0.07,
    variant: str = "softmax",
) -> float:
    """Triplet-matching contrastive diagnostic over positive pairs.

    The softmax variant is symmetric InfoNCE over the batch similarity
    matrix with positives on the diagonal. The literal variant divides raw
    similarities by row/column sums (negated so lower is better) and is
    only defined when all pairwise similarities are strictly positive.
    """
    if len(batch) == 0:
        raise EmptyBatchError("contrastive loss needs at least one pair")
    texts = [t for t, _ in batch]
    visuals = [v for _, v in batch]
    S = np.array(
        [[structural_similarity(t, v) for v in visuals] for t in texts],
        dtype=np.float64,
    )
    if variant == "softmax":
        logits = S / temperature
        row_terms = _log_softmax_diag(logits, axis=1)
        col_terms = _log_softmax_diag(logits, axis=0)
        return float(-(row_terms.sum() + col_terms.sum()))
    if variant == "literal":
        if np.any(S <= 0):
            raise NonPositiveSimilarityError(
                "literal variant requires strictly positive similarities"
            )
        diag = np.diag(S)
        row_terms = np.log(diag / S.sum(axis=1))
        col_terms = np.log(diag / S.sum(axis=0))
        return float(-(row_terms.sum() + col_terms.sum()))
    raise ValueError(f"unknown loss variant: {variant}")


@dataclass(frozen=True)
class TripletDatapoint:
    """One textual triplet with every image triplet it corresponds to."""

    text: TextTriplet
    visuals: Tuple

    def __len__(self) -> int:
        return len(self.visuals)


class EpochSampler:
    """Draws one image triplet per datapoint per epoch, seeded.

    Grouping plus one-per-epoch sampling keeps a batch from containing the
    same textual triplet twice with different image triplets, which would
    pull and push the same pair simultaneously.
    """

    def __init__(self, datapoints: Sequence[TripletDatapoint], seed: int = 0):
        self.datapoints = tuple(datapoints)
        self.seed = seed

    def sample_epoch(self, epoch: int) -> List[Tuple[TextTriplet, object]]:
        rng = np.random.default_rng([self.seed, epoch])
        out = []
        for dp in self.datapoints:
            pick = int(rng.integers(len(dp.visuals)))
            out.append((dp.text, dp.visuals[pick]))
        return out


def group_triplet_datapoints(
    records: Sequence[Tuple[TextTriplet, object]], seed: int = 0
) -> Tuple[List[TripletDatapoint], EpochSampler]:
    """Merge records sharing an identical textual triplet.

    Identity is the (subject, predicate, object) string triple; first-seen
    order is preserved.
    """
    order: List[Tuple[str, str, str]] = []
    grouped: Dict[Tuple[str, str, str], List] = {}
    first_text: Dict[Tuple[str, str, str], TextTriplet] = {}
    for text, visual in records:
        key = (text.subject_text, text.predicate_text, text.object_text)
        if key not in grouped:
            grouped[key] = []
            first_text[key] = text
            order.append(key)
        grouped[key].append(visual)
    datapoints = [
        TripletDatapoint(text=first_text[key], visuals=tuple(grouped[key]))
        for key in order
    ]
    return datapoints, EpochSampler(datapoints, seed=seed)
