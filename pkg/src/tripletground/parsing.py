"""Caption decomposition into (subject, predicate, object) triplets.

A four-part prompt steers an LLM completion endpoint; completions are
validated against a strict line grammar, degenerate slots are filled with
the subject string, and predicate phrases are composed into full sentences
before embedding. A replay fixture store substitutes for live calls so the
whole pipeline runs without network or API keys.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import requests

from .core import TextEntity, TextTriplet

FULL_SENTENCE = "full-sentence"
PERSON_TEMPLATE = "person-template"

# One triplet per line: parenthesized, pipe-delimited, three fields.
# Predicate and object may be empty; the subject may not.
_TRIPLET_LINE = re.compile(r"^\(([^|()]*)\|([^|()]*)\|([^|()]*)\)$")

FORMAT_REMINDER = (
    "Reminder: output one triplet per line in the exact form "
    "(subject | predicate | object), with a non-empty subject."
)


class EmptyCaptionError(ValueError):
    """Raised when asked to build a prompt for an empty caption."""


class EmptySubjectError(ValueError):
    """Raised when a triplet arrives with an empty subject slot."""


class FormatError(ValueError):
    """Raised when a completion fails the output grammar.

    All-or-nothing: one bad line invalidates the whole completion so that
    fixture stores get corrected instead of silently losing triplets.
    """

    def __init__(self, message: str, line_number: Optional[int] = None):
        super().__init__(message)
        self.line_number = line_number


class LlmUnavailableError(RuntimeError):
    """Raised when the live completion endpoint cannot be reached."""


class ReplayMissError(KeyError):
    """Raised when a caption has no entry in the replay fixture store."""


@dataclass(frozen=True)
class PromptTemplate:
    """Four-part prompt: instruction, details, worked examples, task prefix."""

    general_instruction: str
    supporting_details: str
    icl_examples: Tuple[Tuple[str, str], ...]
    task_instruction_prefix: str

    def __post_init__(self) -> None:
        if not (
            self.general_instruction
            and self.supporting_details
            and self.task_instruction_prefix
        ):
            raise ValueError("all template parts must be non-empty")
        if len(self.icl_examples) < 1:
            raise ValueError("at least one in-context example is required")


@dataclass(frozen=True)
class ParsedCaption:
    """A caption's entity table and triplets, plus the raw completion."""

    caption: str
    entities: Tuple[TextEntity, ...]
    triplets: Tuple[TextTriplet, ...]
    raw_completion: str


def build_prompt(template: PromptTemplate, caption: str) -> str:
    """Concatenate the four prompt parts; the caption is the suffix."""
    if not caption:
        raise EmptyCaptionError("caption must be non-empty")
    examples = "\n\n".join(
        f"Caption: {cap}\n{lines}" for cap, lines in template.icl_examples
    )
    return "\n\n".join(
        [
            template.general_instruction,
            template.supporting_details,
            examples,
            template.task_instruction_prefix + caption,
        ]
    )


def parse_completion(raw: str) -> List[Tuple[str, str, str]]:
    """Validate a completion line-by-line into string triples."""
    triples = []
    for number, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        match = _TRIPLET_LINE.match(line)
        if match is None:
            raise FormatError(f"line {number} does not match the triplet grammar: {line!r}", number)
        subject, predicate, object_ = (f.strip() for f in match.groups())
        if not subject:
            raise FormatError(f"line {number} has an empty subject", number)
        triples.append((subject, predicate, object_))
    if not triples:
        raise FormatError("completion contains no triplet lines")
    return triples


def fill_degenerate(triple: Tuple[str, str, str]) -> Tuple[Tuple[str, str, str], frozenset]:
    """Replace empty predicate/object slots with the subject string."""
    subject, predicate, object_ = triple
    if not subject:
        raise EmptySubjectError("cannot fill a triplet without a subject")
    filled = set()
    if not predicate:
        predicate = subject
        filled.add("predicate")
    if not object_:
        object_ = subject
        filled.add("object")
    return (subject, predicate, object_), frozenset(filled)


def compose_predicate_phrase(triplet: TextTriplet, mode: str = FULL_SENTENCE) -> str:
    """Sentence actually embedded for the predicate slot.

    Degenerate-filled slots are skipped: a fully filled triplet keeps the
    bare subject (it is matched three times against the same region), and a
    filled object yields just "subject predicate".
    """
    if "predicate" in triplet.filled_slots:
        return triplet.subject_text
    if mode == PERSON_TEMPLATE:
        return f"a person {triplet.predicate_text} a person"
    if mode == FULL_SENTENCE:
        parts = [triplet.subject_text, triplet.predicate_text]
        if "object" not in triplet.filled_slots:
            parts.append(triplet.object_text)
        return " ".join(parts)
    raise ValueError(f"unknown composition mode: {mode}")


class ReplayStore:
    """Read-only caption -> completion fixture store (JSONL on disk)."""

    def __init__(self, completions: Dict[str, str]):
        self._completions = dict(completions)

    @classmethod
    def from_jsonl(cls, path: str) -> "ReplayStore":
        completions = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                completions[record["caption"]] = record["completion"]
        return cls(completions)

    def __contains__(self, caption: str) -> bool:
        return caption in self._completions

    def __len__(self) -> int:
        return len(self._completions)

    def complete(self, prompt: str, caption: str) -> str:
        try:
            return self._completions[caption]
        except KeyError:
            raise ReplayMissError(caption) from None


class LiveLlmClient:
    """Minimal client for any endpoint honoring the completion wire shape.

    POST {model, prompt, max_tokens, temperature: 0} -> {completion}.
    Decoding defaults to deterministic; concurrency is bounded by a
    semaphore so batch runs cannot flood the endpoint.
    """

    def __init__(
        self,
        url: str,
        model: str,
        max_tokens: int = 256,
        timeout: float = 60.0,
        max_in_flight: int = 4,
    ):
        self.url = url
        self.model = model
        self.max_tokens = max_tokens
        self.timeout = timeout
        self._slot = threading.Semaphore(max_in_flight)
        self._session = requests.Session()

    def complete(self, prompt: str, caption: str) -> str:
        payload = {
            "model": self.model,
            "prompt": prompt,
            "max_tokens": self.max_tokens,
            "temperature": 0,
        }
        with self._slot:
            try:
                response = self._session.post(self.url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                raise LlmUnavailableError(f"completion endpoint unreachable: {exc}") from exc
        if response.status_code != 200:
            raise LlmUnavailableError(
                f"completion endpoint returned HTTP {response.status_code}"
            )
        return response.json()["completion"]


def load_template(path: str) -> PromptTemplate:
    """Read a four-section template file.

    Sections are introduced by ``[general-instruction]``,
    ``[supporting-details]``, ``[examples]`` and ``[task-instruction]``
    headers. Inside ``[examples]``, each example is a ``Caption:`` line
    followed by its triplet lines; a blank line separates examples.
    """
    sections: Dict[str, List[str]] = {}
    current: Optional[str] = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            stripped = line.rstrip("\n")
            header = stripped.strip().lower()
            if header in (
                "[general-instruction]",
                "[supporting-details]",
                "[examples]",
                "[task-instruction]",
            ):
                current = header[1:-1]
                sections[current] = []
            elif current is not None:
                sections[current].append(stripped)
    missing = {
        "general-instruction",
        "supporting-details",
        "examples",
        "task-instruction",
    } - set(sections)
    if missing:
        raise ValueError(f"template missing sections: {sorted(missing)}")

    examples: List[Tuple[str, str]] = []
    caption: Optional[str] = None
    lines: List[str] = []
    for raw in sections["examples"] + [""]:
        stripped = raw.strip()
        if stripped.lower().startswith("caption:"):
            if caption is not None and lines:
                examples.append((caption, "\n".join(lines)))
            caption = stripped[len("caption:"):].strip()
            lines = []
        elif stripped:
            lines.append(stripped)
        elif caption is not None and lines:
            examples.append((caption, "\n".join(lines)))
            caption, lines = None, []

    return PromptTemplate(
        general_instruction="\n".join(sections["general-instruction"]).strip(),
        supporting_details="\n".join(sections["supporting-details"]).strip(),
        icl_examples=tuple(examples),
        task_instruction_prefix="\n".join(sections["task-instruction"]).strip() + " ",
    )


def parse_caption(
    caption: str,
    llm,
    template: PromptTemplate,
    mode: str = FULL_SENTENCE,
    retry_on_format_error: bool = True,
) -> ParsedCaption:
    """Full parse pipeline: prompt, complete, validate, fill, compose.

    ``llm`` is anything with ``complete(prompt, caption) -> str`` — a
    ReplayStore or a LiveLlmClient. One retry with a format reminder is
    issued if the first completion fails the grammar.
    """
    prompt = build_prompt(template, caption)
    raw = llm.complete(prompt, caption)
    try:
        triples = parse_completion(raw)
    except FormatError:
        if not retry_on_format_error:
            raise
        raw = llm.complete(prompt + "\n\n" + FORMAT_REMINDER, caption)
        triples = parse_completion(raw)

    entity_ids: Dict[str, int] = {}
    entities: List[TextEntity] = []
    lowered_caption = caption.lower()

    def entity_id(surface: str) -> int:
        if surface not in entity_ids:
            entity_ids[surface] = len(entities)
            entities.append(
                TextEntity(
                    id=len(entities),
                    surface=surface,
                    verbatim=surface.lower() in lowered_caption,
                )
            )
        return entity_ids[surface]

    triplets: List[TextTriplet] = []
    for triple in triples:
        (subject, predicate, object_), filled = fill_degenerate(triple)
        triplet = TextTriplet(
            subject_id=entity_id(subject),
            object_id=entity_id(object_),
            subject_text=subject,
            predicate_text=predicate,
            object_text=object_,
            filled_slots=filled,
        )
        triplets.append(replace(triplet, predicate_phrase=compose_predicate_phrase(triplet, mode)))

    return ParsedCaption(
        caption=caption,
        entities=tuple(entities),
        triplets=tuple(triplets),
        raw_completion=raw,
    )
