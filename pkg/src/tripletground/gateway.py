"""Embedding acquisition behind the wire protocol.

All embedding production is isolated behind `EmbeddingBackend`; the engine
never decodes pixels. Backends return raw vectors and normalization happens
here, once, on receipt (a protocol-documented client responsibility). A
content-addressed cache makes repeated runs cheap and bit-reproducible.

The mock backend's vector derivation is part of the protocol conformance
contract (servers reimplement it for their --mock mode):

    material = "{seed}|{dimension}|{key}" as UTF-8
    block b  = SHA-256(material + uint32_be(b)), b = 0, 1, ...
    each 8-byte big-endian chunk u becomes u / 2**63 - 1.0
    the first `dimension` values are L2-normalized

Text keys are ``{"kind":"text","text":...}``; region keys are
``{"boxes":[[x0,y0,x1,y1],...],"image":id,"kind":"region","render":mode}``
— JSON with sorted keys, separators ``(",", ":")``, box coordinates rounded
to 2 decimals.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import requests

from .core import (
    BBox,
    DimensionMismatchError,
    EmbeddingVec,
    ImageRef,
    TripletEmbedding,
    VisualTriplet,
    normalize,
)

CROP = "crop"
BLUR = "blur"
RENDER_MODES = (CROP, BLUR)

DEFAULT_BATCH_SIZE = 32


class BackendUnavailableError(RuntimeError):
    """Raised when the embedding backend cannot serve a request."""


class InvalidRegionError(ValueError):
    """Raised for region requests outside image bounds or malformed."""


@dataclass(frozen=True)
class RegionRequest:
    """One or two boxes to embed under a render mode.

    Two-box requests represent a relation region; per the protocol the blur
    rendering keeps each box's interior sharp separately rather than the
    union hull.
    """

    image: ImageRef
    boxes: Tuple[BBox, ...]
    render: str = CROP

    def __post_init__(self) -> None:
        if len(self.boxes) not in (1, 2):
            raise InvalidRegionError("a region request carries one or two boxes")
        if self.render not in RENDER_MODES:
            raise InvalidRegionError(f"unknown render mode: {self.render}")
        for box in self.boxes:
            if not box.within(self.image):
                raise InvalidRegionError(f"box {box} outside image {self.image.id!r}")


def quantize_boxes(boxes: Iterable[BBox]) -> List[List[float]]:
    """Boxes rounded to 2 decimals, the cache/mock canonical form.

    Coordinates are coerced to float first so the canonical JSON is
    type-stable (4 and 4.0 both serialize as 4.0).
    """
    return [[round(float(c), 2) for c in b.as_list()] for b in boxes]


def text_key(text: str) -> str:
    return json.dumps(
        {"kind": "text", "text": text}, sort_keys=True, separators=(",", ":")
    )


def region_key(image_id: str, boxes: Iterable[BBox], render: str) -> str:
    return json.dumps(
        {
            "boxes": quantize_boxes(boxes),
            "image": image_id,
            "kind": "region",
            "render": render,
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def hash_unit_vector(seed: int, dimension: int, key: str) -> np.ndarray:
    """The documented deterministic hash-to-unit-vector expansion."""
    material = f"{seed}|{dimension}|{key}".encode("utf-8")
    values = np.empty(dimension, dtype=np.float64)
    produced = 0
    block = 0
    while produced < dimension:
        digest = hashlib.sha256(material + block.to_bytes(4, "big")).digest()
        for offset in range(0, 32, 8):
            if produced >= dimension:
                break
            chunk = int.from_bytes(digest[offset : offset + 8], "big")
            values[produced] = chunk / 2**63 - 1.0
            produced += 1
        block += 1
    return normalize(values)


class EmbeddingBackend(ABC):
    """Deterministic text/region embedding source (determinism is required
    for content-addressed caching)."""

    name: str
    dimension: int

    @abstractmethod
    def embed_texts(self, texts: Sequence[str]) -> List[List[float]]:
        """Raw (not necessarily normalized) vectors, one per text."""

    @abstractmethod
    def embed_regions(
        self, image: ImageRef, requests_: Sequence[RegionRequest]
    ) -> List[List[float]]:
        """Raw vectors, one per region request."""


class MockBackend(EmbeddingBackend):
    """Seeded hash vectors; hermetic stand-in for a real encoder."""

    def __init__(self, seed: int = 0, dimension: int = 32, name: str = "mock"):
        if dimension < 2:
            raise ValueError("dimension must be >= 2")
        self.seed = seed
        self.dimension = dimension
        self.name = name

    def embed_texts(self, texts: Sequence[str]) -> List[List[float]]:
        return [
            hash_unit_vector(self.seed, self.dimension, text_key(t)).tolist()
            for t in texts
        ]

    def embed_regions(
        self, image: ImageRef, requests_: Sequence[RegionRequest]
    ) -> List[List[float]]:
        out = []
        for req in requests_:
            key = region_key(image.id, req.boxes, req.render)
            out.append(hash_unit_vector(self.seed, self.dimension, key).tolist())
        return out


class LabeledMockBackend(EmbeddingBackend):
    """Mock with test-assigned latent labels mapped to orthonormal anchors.

    Labeled texts/regions embed near their label's anchor (one-hot axis)
    plus small deterministic noise, so ground-truth matches are recoverable
    in end-to-end tests; unlabeled inputs fall back to plain hash vectors.
    Region labels ignore the render mode (both TTA renders share a label).
    """

    def __init__(
        self,
        seed: int = 0,
        dimension: int = 32,
        text_labels: Optional[Dict[str, str]] = None,
        region_labels: Optional[Dict[Tuple, str]] = None,
        noise: float = 0.05,
        name: str = "labeled-mock",
    ):
        self.seed = seed
        self.dimension = dimension
        self.name = name
        self.noise = noise
        self.text_labels = dict(text_labels or {})
        self.region_labels = dict(region_labels or {})
        labels = sorted(set(self.text_labels.values()) | set(self.region_labels.values()))
        if len(labels) > dimension:
            raise ValueError("more labels than embedding dimensions")
        self._anchor_axis = {label: i for i, label in enumerate(labels)}

    @staticmethod
    def region_handle(image_id: str, boxes: Iterable[BBox]) -> Tuple:
        """Render-independent lookup key for region labels."""
        return (image_id, tuple(tuple(b) for b in quantize_boxes(boxes)))

    def label_region(self, image: ImageRef, boxes: Sequence[BBox], label: str) -> None:
        if label not in self._anchor_axis:
            raise ValueError(f"unknown label {label!r}; labels are fixed at construction")
        self.region_labels[self.region_handle(image.id, boxes)] = label

    def _vector(self, key: str, label: Optional[str]) -> List[float]:
        if label is None:
            return hash_unit_vector(self.seed, self.dimension, key).tolist()
        anchor = np.zeros(self.dimension)
        anchor[self._anchor_axis[label]] = 1.0
        jitter = hash_unit_vector(self.seed, self.dimension, "noise:" + key)
        return normalize(anchor + self.noise * jitter).tolist()

    def embed_texts(self, texts: Sequence[str]) -> List[List[float]]:
        return [self._vector(text_key(t), self.text_labels.get(t)) for t in texts]

    def embed_regions(
        self, image: ImageRef, requests_: Sequence[RegionRequest]
    ) -> List[List[float]]:
        out = []
        for req in requests_:
            label = self.region_labels.get(self.region_handle(image.id, req.boxes))
            out.append(self._vector(region_key(image.id, req.boxes, req.render), label))
        return out


class HttpBackend(EmbeddingBackend):
    """Client for the JSON-over-HTTP embedding protocol."""

    def __init__(self, base_url: str, timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()
        info = self._get("/v1/info")
        self.name = info["name"]
        self.dimension = int(info["dimension"])

    def _get(self, path: str) -> dict:
        try:
            response = self._session.get(self.base_url + path, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendUnavailableError(f"GET {path} failed: {exc}") from exc
        if response.status_code != 200:
            raise BackendUnavailableError(f"GET {path} -> HTTP {response.status_code}")
        return response.json()

    def _post(self, path: str, payload: dict) -> dict:
        try:
            response = self._session.post(
                self.base_url + path, json=payload, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise BackendUnavailableError(f"POST {path} failed: {exc}") from exc
        if response.status_code == 400:
            detail = response.json().get("error", "invalid request")
            raise InvalidRegionError(detail)
        if response.status_code != 200:
            raise BackendUnavailableError(f"POST {path} -> HTTP {response.status_code}")
        return response.json()

    def _check(self, vectors: List[List[float]]) -> List[List[float]]:
        for vec in vectors:
            if len(vec) != self.dimension:
                raise DimensionMismatchError(
                    f"server returned dimension {len(vec)}, handshake said {self.dimension}"
                )
        return vectors

    def embed_texts(self, texts: Sequence[str]) -> List[List[float]]:
        data = self._post("/v1/embed/text", {"texts": list(texts)})
        return self._check(data["vectors"])

    def embed_regions(
        self, image: ImageRef, requests_: Sequence[RegionRequest]
    ) -> List[List[float]]:
        payload = {
            "image": {
                "id": image.id,
                "uri": image.uri,
                "width": image.width,
                "height": image.height,
            },
            "requests": [
                {"boxes": [b.as_list() for b in req.boxes], "render": req.render}
                for req in requests_
            ],
        }
        data = self._post("/v1/embed/region", payload)
        return self._check(data["vectors"])


class EmbeddingCache:
    """Append-only content-addressed vector store.

    Keys are SHA-256 over (backend name, dimension, canonical request);
    values are the post-normalization vectors, so warm reads are bitwise
    identical to cold computes. Racing writers are safe because identical
    keys always carry identical values.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._entries: Dict[str, List[float]] = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    self._entries[record["key"]] = record["values"]

    @staticmethod
    def address(backend: EmbeddingBackend, request_json: str) -> str:
        material = f"{backend.name}|{backend.dimension}|{request_json}"
        return hashlib.sha256(material.encode("utf-8")).hexdigest()

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> Optional[np.ndarray]:
        values = self._entries.get(key)
        return None if values is None else np.asarray(values, dtype=np.float64)

    def put(self, key: str, vector: np.ndarray) -> None:
        values = vector.tolist()
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = values
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "values": values}) + "\n")


def _chunked(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def embed_texts(
    backend: EmbeddingBackend,
    texts: Sequence[str],
    cache: Optional[EmbeddingCache] = None,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> List[EmbeddingVec]:
    """Normalized vector per text, order-preserving, transparently batched."""
    if any(not t for t in texts):
        raise ValueError("texts must be non-empty strings")
    results: List[Optional[EmbeddingVec]] = [None] * len(texts)
    misses: List[int] = []
    for i, text in enumerate(texts):
        if cache is not None:
            hit = cache.get(EmbeddingCache.address(backend, text_key(text)))
            if hit is not None:
                results[i] = hit
                continue
        misses.append(i)
    for chunk in _chunked(misses, batch_size):
        vectors = backend.embed_texts([texts[i] for i in chunk])
        if len(vectors) != len(chunk):
            raise BackendUnavailableError("backend returned a short batch")
        for i, raw in zip(chunk, vectors):
            vec = normalize(raw)
            if vec.shape[0] != backend.dimension:
                raise DimensionMismatchError(
                    f"vector dimension {vec.shape[0]} != backend dimension {backend.dimension}"
                )
            if cache is not None:
                cache.put(EmbeddingCache.address(backend, text_key(texts[i])), vec)
            results[i] = vec
    return results  # type: ignore[return-value]


def _embed_one_render(
    backend: EmbeddingBackend,
    request: RegionRequest,
    cache: Optional[EmbeddingCache],
) -> EmbeddingVec:
    key = None
    if cache is not None:
        key = EmbeddingCache.address(
            backend, region_key(request.image.id, request.boxes, request.render)
        )
        hit = cache.get(key)
        if hit is not None:
            return hit
    raw = backend.embed_regions(request.image, [request])[0]
    vec = normalize(raw)
    if vec.shape[0] != backend.dimension:
        raise DimensionMismatchError(
            f"vector dimension {vec.shape[0]} != backend dimension {backend.dimension}"
        )
    if cache is not None and key is not None:
        cache.put(key, vec)
    return vec


def embed_region(
    backend: EmbeddingBackend,
    request: RegionRequest,
    tta: Optional[Iterable[str]] = None,
    cache: Optional[EmbeddingCache] = None,
) -> EmbeddingVec:
    """Renormalized mean over the requested render modes.

    Render modes are iterated in sorted order so the aggregate is
    permutation-invariant bitwise, not just mathematically.
    """
    modes = sorted(set(tta)) if tta is not None else [request.render]
    if not modes:
        raise ValueError("tta must contain at least one render mode")
    vectors = [
        _embed_one_render(backend, replace(request, render=mode), cache)
        for mode in modes
    ]
    if len(vectors) == 1:
        return vectors[0]
    return normalize(np.mean(np.stack(vectors), axis=0))


def embed_visual_triplet(
    backend: EmbeddingBackend,
    boxes: Sequence[BBox],
    vt: VisualTriplet,
    image: ImageRef,
    tta: Optional[Iterable[str]] = None,
    cache: Optional[EmbeddingCache] = None,
) -> TripletEmbedding:
    """Slot embeddings for one visual triplet.

    Subject/object come from single-box requests; the predicate slot uses
    a two-box relation request, except self-relations where all three
    derive from the same single-box request.
    """
    subject = embed_region(
        backend, RegionRequest(image, (boxes[vt.subject_box],)), tta, cache
    )
    if vt.is_self_relation:
        return TripletEmbedding(subject=subject, predicate=subject, object=subject)
    object_ = embed_region(
        backend, RegionRequest(image, (boxes[vt.object_box],)), tta, cache
    )
    predicate = embed_region(
        backend,
        RegionRequest(image, (boxes[vt.subject_box], boxes[vt.object_box])),
        tta,
        cache,
    )
    return TripletEmbedding(subject=subject, predicate=predicate, object=object_)


def mock_backend(seed: int, dimension: int) -> MockBackend:
    """Convenience constructor mirroring the protocol doc."""
    return MockBackend(seed=seed, dimension=dimension)
