"""Shared builders for matcher and end-to-end tests."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tripletground.core import BBox, ImageRef, TextEntity, TextTriplet, TripletEmbedding, normalize
from tripletground.parsing import ParsedCaption


def unit(rng, dim):
    return normalize(rng.normal(size=dim))


def random_triplet_embedding(rng, dim):
    return TripletEmbedding(subject=unit(rng, dim), predicate=unit(rng, dim), object=unit(rng, dim))


def random_boxes(rng, n, width=100.0, height=100.0, min_side=2.0, max_side=40.0):
    boxes = []
    for _ in range(n):
        w = rng.uniform(min_side, max_side)
        h = rng.uniform(min_side, max_side)
        x0 = rng.uniform(0, width - w)
        y0 = rng.uniform(0, height - h)
        boxes.append(BBox(x0, y0, x0 + w, y0 + h))
    return boxes


def random_text_triplets(rng, M, count):
    """Random role assignments over M entities, self-reference only via fill."""
    triplets = []
    for t in range(count):
        subject = int(rng.integers(M))
        object_ = int(rng.integers(M))
        if subject == object_:
            triplets.append(
                TextTriplet(
                    subject, object_,
                    f"entity{subject}", f"entity{subject}", f"entity{subject}",
                    filled_slots=frozenset({"predicate", "object"}),
                    predicate_phrase=f"entity{subject}",
                )
            )
        else:
            triplets.append(
                TextTriplet(
                    subject, object_,
                    f"entity{subject}", f"rel{t}", f"entity{object_}",
                    predicate_phrase=f"entity{subject} rel{t} entity{object_}",
                )
            )
    return triplets


def make_parsed(caption, triples, compose_mode="full-sentence"):
    """ParsedCaption from raw (subject, predicate, object) strings.

    Empty predicate/object slots are degenerate-filled, mirroring the
    parse pipeline but without an LLM in the loop.
    """
    from tripletground.parsing import compose_predicate_phrase, fill_degenerate
    from dataclasses import replace

    ids = {}
    entities = []

    def entity_id(surface):
        if surface not in ids:
            ids[surface] = len(entities)
            entities.append(TextEntity(id=len(entities), surface=surface))
        return ids[surface]

    triplets = []
    for triple in triples:
        (s, p, o), filled = fill_degenerate(triple)
        tt = TextTriplet(
            subject_id=entity_id(s),
            object_id=entity_id(o),
            subject_text=s,
            predicate_text=p,
            object_text=o,
            filled_slots=filled,
        )
        triplets.append(replace(tt, predicate_phrase=compose_predicate_phrase(tt, compose_mode)))
    return ParsedCaption(
        caption=caption,
        entities=tuple(entities),
        triplets=tuple(triplets),
        raw_completion="",
    )


@pytest.fixture
def image_100():
    return ImageRef(id="img-100", width=100, height=100)
