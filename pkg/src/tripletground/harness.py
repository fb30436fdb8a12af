"""Dataset ingestion, end-to-end runs, metrics and report emission.

Datasets are JSONL with a one-line header declaring the schema and box
convention; records follow, one JSON object per line. Two schemas exist:
referring-expression records (expression, proposals, one ground-truth box)
and link records (caption with [NAME] placeholders, proposals, ground-truth
slot-to-box links). Predictions are JSONL, one record per input record.
"""

from __future__ import annotations

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .core import BBox, GroundingResult, ImageRef, iou
from .gateway import EmbeddingBackend, EmbeddingCache
from .matching import (
    IMAGE_TO_TEXT,
    TEXT_TO_IMAGE,
    MatchConfig,
    ground,
)
from .pairing import SpatialRule
from .parsing import (
    EmptyCaptionError,
    FormatError,
    LlmUnavailableError,
    ParsedCaption,
    PromptTemplate,
    ReplayMissError,
    parse_caption,
)

REC_SCHEMA = "tripletground/rec-v1"
LINKS_SCHEMA = "tripletground/links-v1"

XYXY = "xyxy"
XYWH = "xywh"

NAME_TOKEN = "[NAME]"
_INDEXED_NAME = re.compile(r"\[NAME-(\d+)\]")


class ParseError(ValueError):
    """Raised when a dataset file or header cannot be read."""


class ValidationError(ValueError):
    """Raised for a malformed record, naming its line number."""


class LengthMismatchError(ValueError):
    """Raised when predictions and records do not line up."""


@dataclass(frozen=True)
class RecRecord:
    """One referring expression with proposal boxes and its ground truth."""

    record_id: str
    image: ImageRef
    expression: str
    proposals: Tuple[BBox, ...]
    gt_box: BBox


@dataclass(frozen=True)
class LinkRecord:
    """A caption with [NAME] slots to be linked to proposal boxes.

    ``indexed_caption`` has occurrences rewritten to [NAME-1], [NAME-2], …
    so distinct slots have distinct surfaces; slot indices are 0-based.
    """

    record_id: str
    image: ImageRef
    caption: str
    indexed_caption: str
    name_slots: int
    proposals: Tuple[BBox, ...]
    gt_links: Tuple[Tuple[int, int], ...]


@dataclass
class RunReport:
    """Per-record outcomes plus the exact aggregate."""

    metric: str
    correct: int
    total: int
    per_record: List[dict]
    config: dict = field(default_factory=dict)
    timing_s: float = 0.0
    flagged: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "correct": self.correct,
            "total": self.total,
            "accuracy": self.accuracy,
            "flagged": self.flagged,
            "per_record": self.per_record,
            "config": self.config,
            "timing_s": self.timing_s,
        }


def _to_box(values: Sequence[float], box_format: str) -> BBox:
    if len(values) != 4:
        raise ValueError(f"box needs 4 numbers, got {values!r}")
    x0, y0, a, b = (float(v) for v in values)
    if box_format == XYWH:
        return BBox(x0, y0, x0 + a, y0 + b)
    return BBox(x0, y0, a, b)


def _read_header(line: str) -> Tuple[str, str]:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"header line is not valid JSON: {exc}") from exc
    schema = header.get("schema")
    box_format = header.get("box_format", XYXY)
    if schema not in (REC_SCHEMA, LINKS_SCHEMA):
        raise ParseError(f"unknown schema {schema!r}")
    if box_format not in (XYXY, XYWH):
        raise ParseError(f"unknown box format {box_format!r}")
    return schema, box_format


def _image_from(payload: dict) -> ImageRef:
    return ImageRef(
        id=str(payload["id"]),
        width=int(payload["width"]),
        height=int(payload["height"]),
        uri=payload.get("uri"),
    )


def _check_image_identity(seen: Dict[str, Tuple], image: ImageRef, line: int) -> None:
    """One id, one image: records may share an image but not redefine it."""
    meta = (image.width, image.height, image.uri)
    if seen.setdefault(image.id, meta) != meta:
        raise ValidationError(
            f"line {line}: image {image.id!r} redefined with different metadata"
        )


def index_name_slots(caption: str) -> Tuple[str, int]:
    """Rewrite [NAME] occurrences to [NAME-k] (1-based), left to right."""
    count = 0
    out = []
    rest = caption
    while NAME_TOKEN in rest:
        before, rest = rest.split(NAME_TOKEN, 1)
        count += 1
        out.append(before)
        out.append(f"[NAME-{count}]")
    out.append(rest)
    return "".join(out), count


def _validate_boxes(
    boxes: Sequence[Sequence[float]], box_format: str, image: ImageRef, line: int
) -> Tuple[BBox, ...]:
    parsed = []
    for values in boxes:
        try:
            box = _to_box(values, box_format)
        except ValueError as exc:
            raise ValidationError(f"line {line}: {exc}") from exc
        if not box.within(image):
            raise ValidationError(f"line {line}: box {box} outside image bounds")
        parsed.append(box)
    return tuple(parsed)


def load_rec_dataset(path: str) -> List[RecRecord]:
    """Load and validate a referring-expression dataset."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise ParseError(f"{path}: empty dataset file")
    schema, box_format = _read_header(lines[0])
    if schema != REC_SCHEMA:
        raise ParseError(f"{path}: expected {REC_SCHEMA}, found {schema}")
    seen_images: Dict[str, Tuple] = {}
    for number, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {number}: invalid JSON: {exc}") from exc
        try:
            image = _image_from(payload["image"])
            _check_image_identity(seen_images, image, number)
            proposals = _validate_boxes(payload["proposals"], box_format, image, number)
            if not proposals:
                raise ValidationError(f"line {number}: proposals must be non-empty")
            gt_box = _validate_boxes([payload["gt_box"]], box_format, image, number)[0]
            expression = payload["expression"]
            if not expression:
                raise ValidationError(f"line {number}: empty expression")
            records.append(
                RecRecord(
                    record_id=str(payload["id"]),
                    image=image,
                    expression=expression,
                    proposals=proposals,
                    gt_box=gt_box,
                )
            )
        except ValidationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"line {number}: {exc}") from exc
    return records


def load_links_dataset(path: str) -> List[LinkRecord]:
    """Load and validate a name-link dataset."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise ParseError(f"{path}: empty dataset file")
    schema, box_format = _read_header(lines[0])
    if schema != LINKS_SCHEMA:
        raise ParseError(f"{path}: expected {LINKS_SCHEMA}, found {schema}")
    seen_images: Dict[str, Tuple] = {}
    for number, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {number}: invalid JSON: {exc}") from exc
        try:
            image = _image_from(payload["image"])
            _check_image_identity(seen_images, image, number)
            proposals = _validate_boxes(payload["proposals"], box_format, image, number)
            caption = payload["caption"]
            indexed, slots = index_name_slots(caption)
            if slots < 1:
                raise ValidationError(f"line {number}: caption has no {NAME_TOKEN} slots")
            gt_links = []
            for slot, box in payload["gt_links"]:
                if not (0 <= slot < slots and 0 <= box < len(proposals)):
                    raise ValidationError(
                        f"line {number}: gt link ({slot}, {box}) out of range"
                    )
                gt_links.append((int(slot), int(box)))
            records.append(
                LinkRecord(
                    record_id=str(payload["id"]),
                    image=image,
                    caption=caption,
                    indexed_caption=indexed,
                    name_slots=slots,
                    proposals=proposals,
                    gt_links=tuple(gt_links),
                )
            )
        except ValidationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"line {number}: {exc}") from exc
    return records


def sniff_schema(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    schema, _ = _read_header(first)
    return schema


def evaluate_rec(
    predictions: Sequence[Optional[BBox]],
    records: Sequence[RecRecord],
    iou_threshold: float = 0.5,
) -> RunReport:
    """Accuracy with the strict `IoU > threshold` correctness rule."""
    if len(predictions) != len(records):
        raise LengthMismatchError(
            f"{len(predictions)} predictions for {len(records)} records"
        )
    per_record = []
    correct = 0
    for pred, record in zip(predictions, records):
        value = iou(pred, record.gt_box) if pred is not None else 0.0
        ok = value > iou_threshold
        correct += ok
        per_record.append(
            {
                "record_id": record.record_id,
                "pred_box": pred.as_list() if pred is not None else None,
                "iou": value,
                "correct": bool(ok),
            }
        )
    return RunReport(
        metric=f"rec@{iou_threshold}",
        correct=correct,
        total=len(records),
        per_record=per_record,
    )


def evaluate_links(
    predictions: Sequence[Sequence[Tuple[int, int]]],
    records: Sequence[LinkRecord],
) -> RunReport:
    """Fraction of ground-truth links recovered.

    Predicted links for slots without any ground-truth link never enter
    the denominator; they are counted in the report's ``flagged`` field.
    """
    if len(predictions) != len(records):
        raise LengthMismatchError(
            f"{len(predictions)} predictions for {len(records)} records"
        )
    per_record = []
    correct = 0
    total = 0
    flagged = 0
    for links, record in zip(predictions, records):
        gt = set(record.gt_links)
        gt_slots = {slot for slot, _ in gt}
        hits = sum(1 for link in set(links) if tuple(link) in gt)
        unmatched_slots = sum(1 for slot, _ in set(links) if slot not in gt_slots)
        correct += hits
        total += len(gt)
        flagged += unmatched_slots
        per_record.append(
            {
                "record_id": record.record_id,
                "pred_links": sorted(tuple(link) for link in set(links)),
                "correct_links": hits,
                "gt_links": len(gt),
                "extra_slot_predictions": unmatched_slots,
            }
        )
    report = RunReport(
        metric="links",
        correct=correct,
        total=total,
        per_record=per_record,
    )
    report.flagged = flagged
    return report


@dataclass
class RunConfig:
    """Everything a grounding run needs beyond the dataset itself."""

    match: MatchConfig = field(default_factory=MatchConfig)
    tta: Tuple[str, ...] = ("crop",)
    size_prior: Optional[float] = None
    subject_text_source: str = "entity"
    compose_mode: str = "full-sentence"
    seed: int = 0
    workers: int = 1

    def snapshot(self) -> dict:
        return {
            "direction": self.match.direction,
            "selection": self.match.selection,
            "threshold": self.match.threshold,
            "tta": list(self.tta),
            "size_prior": self.size_prior,
            "subject_text_source": self.subject_text_source,
            "compose_mode": self.compose_mode,
            "seed": self.seed,
            "workers": self.workers,
        }


def _slot_of_entity(surface: str) -> Optional[int]:
    match = _INDEXED_NAME.search(surface)
    return int(match.group(1)) - 1 if match else None


def link_predictions(
    result: GroundingResult, parsed: ParsedCaption, record: LinkRecord
) -> List[Tuple[int, int]]:
    """Slot-to-box links implied by a grounding result.

    text-to-image: each [NAME-k] entity links to its top box.
    image-to-text: each box links to the slot of its selected entity.
    """
    links = []
    if result.direction == TEXT_TO_IMAGE and not result.fallback:
        for entity in parsed.entities:
            slot = _slot_of_entity(entity.surface)
            if slot is None or slot >= record.name_slots:
                continue
            top = result.top(entity.id)
            if top is not None:
                links.append((slot, top))
    elif result.direction == IMAGE_TO_TEXT:
        for box_index, selection in enumerate(result.selections):
            if not selection:
                continue
            entity = parsed.entities[selection[0]]
            slot = _slot_of_entity(entity.surface)
            if slot is not None and slot < record.name_slots:
                links.append((slot, box_index))
    return links


def _ground_one(
    record: Union[RecRecord, LinkRecord],
    llm,
    template: PromptTemplate,
    backend: EmbeddingBackend,
    rules: Sequence[SpatialRule],
    config: RunConfig,
    cache: Optional[EmbeddingCache],
) -> dict:
    caption = (
        record.expression if isinstance(record, RecRecord) else record.indexed_caption
    )
    failed = False
    try:
        parsed = parse_caption(caption, llm, template, mode=config.compose_mode)
    except (ReplayMissError, FormatError, EmptyCaptionError, LlmUnavailableError):
        parsed = ParsedCaption(caption=caption, entities=(), triplets=(), raw_completion="")
        failed = True
    result = ground(
        parsed,
        record.proposals,
        record.image,
        backend,
        rules,
        config.match,
        tta=config.tta,
        cache=cache,
        size_prior=config.size_prior,
        subject_text_source=config.subject_text_source,
    )
    prediction: Dict[str, object] = {"record_id": record.record_id}
    if isinstance(record, RecRecord):
        # The referred entity is the first triplet's subject (entity 0);
        # fallback results expose the whole caption as their single query.
        selection = result.selections[0] if result.selections else ()
        scores = result.scores[0] if result.scores else ()
        prediction["boxes"] = [record.proposals[i].as_list() for i in selection]
        prediction["scores"] = list(scores)
        prediction["fallback"] = bool(result.fallback or failed)
    else:
        links = link_predictions(result, parsed, record)
        prediction["boxes"] = [record.proposals[b].as_list() for _, b in links]
        prediction["scores"] = []
        prediction["fallback"] = bool(result.fallback or failed)
        prediction["links"] = [[slot, box] for slot, box in links]
    prediction["_failed"] = failed
    return prediction


def run_grounding(
    records: Sequence[Union[RecRecord, LinkRecord]],
    llm,
    template: PromptTemplate,
    backend: EmbeddingBackend,
    rules: Sequence[SpatialRule],
    config: RunConfig,
    cache: Optional[EmbeddingCache] = None,
    out_path: Optional[str] = None,
) -> Tuple[List[dict], int]:
    """Ground every record; per-record parse failures degrade to fallback.

    Returns (predictions, failure count). Output order always matches the
    input order regardless of worker count, so runs are byte-reproducible.
    """
    work = [
        (record, llm, template, backend, rules, config, cache) for record in records
    ]
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            predictions = list(pool.map(lambda args: _ground_one(*args), work))
    else:
        predictions = [_ground_one(*args) for args in work]
    failures = sum(1 for p in predictions if p.pop("_failed"))
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for prediction in predictions:
                fh.write(json.dumps(prediction) + "\n")
    return predictions, failures


def load_predictions(path: str) -> List[dict]:
    predictions = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                predictions.append(json.loads(line))
    return predictions


def score_predictions(
    predictions: Sequence[dict],
    records: Sequence[Union[RecRecord, LinkRecord]],
    metric: str,
) -> RunReport:
    """Re-score a predictions file against its dataset."""
    started = time.monotonic()
    if metric.startswith("rec"):
        threshold = float(metric.split("@", 1)[1]) if "@" in metric else 0.5
        boxes = []
        for prediction in predictions:
            geometry = prediction.get("boxes") or []
            boxes.append(BBox(*geometry[0]) if geometry else None)
        report = evaluate_rec(boxes, records, iou_threshold=threshold)
    elif metric == "links":
        links = [
            [tuple(link) for link in prediction.get("links", [])]
            for prediction in predictions
        ]
        report = evaluate_links(links, records)
    else:
        raise ValueError(f"unknown metric: {metric}")
    report.timing_s = time.monotonic() - started
    return report


def render_overlay(
    record: Union[RecRecord, LinkRecord],
    prediction: dict,
    parsed: Optional[ParsedCaption] = None,
) -> str:
    """SVG inspection view: proposals, prediction, ground truth, labels."""
    image = record.image
    caption = record.expression if isinstance(record, RecRecord) else record.caption
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{image.width}" '
        f'height="{image.height}" viewBox="0 0 {image.width} {image.height}">',
        "<style>"
        ".proposal{fill:none;stroke:#999;stroke-width:1.5}"
        ".gt{fill:none;stroke:#1a7f37;stroke-width:2;stroke-dasharray:6 3}"
        ".prediction{fill:none;stroke-width:3}"
        ".prediction.correct{stroke:#2da44e}"
        ".prediction.incorrect{stroke:#cf222e}"
        ".label{font:12px sans-serif;fill:#111}"
        "</style>",
    ]
    if image.uri:
        parts.append(
            f'<image href="{image.uri}" width="{image.width}" height="{image.height}"/>'
        )
    else:
        parts.append(
            f'<rect x="0" y="0" width="{image.width}" height="{image.height}" fill="#f6f8fa"/>'
        )

    def rect(box: BBox, cls: str) -> str:
        return (
            f'<rect class="{cls}" x="{box.x_min}" y="{box.y_min}" '
            f'width="{box.x_max - box.x_min}" height="{box.y_max - box.y_min}"/>'
        )

    for box in record.proposals:
        parts.append(rect(box, "proposal"))
    if isinstance(record, RecRecord):
        parts.append(rect(record.gt_box, "gt"))
        predicted = [BBox(*b) for b in prediction.get("boxes") or []]
        for box in predicted:
            cls = "correct" if iou(box, record.gt_box) > 0.5 else "incorrect"
            parts.append(rect(box, f"prediction {cls}"))
    else:
        gt_boxes = {box for _, box in record.gt_links}
        for slot, box_index in prediction.get("links", []):
            ok = (slot, box_index) in set(record.gt_links)
            cls = "correct" if ok else "incorrect"
            parts.append(rect(record.proposals[box_index], f"prediction {cls}"))
        for box_index in gt_boxes:
            parts.append(rect(record.proposals[box_index], "gt"))
    parts.append(f'<text class="label" x="4" y="14">{_escape(caption)}</text>')
    if parsed is not None:
        for offset, triplet in enumerate(parsed.triplets):
            text = f"({triplet.subject_text} | {triplet.predicate_text} | {triplet.object_text})"
            parts.append(
                f'<text class="label" x="4" y="{30 + 14 * offset}">{_escape(text)}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts)


def _escape(text: str) -> str:
    return (
        text.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )
