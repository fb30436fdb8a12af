"""FastAPI app implementing the embedding wire protocol.

GET /v1/info, POST /v1/embed/text, POST /v1/embed/region. Responses are
serialized with json.dumps directly (shortest-repr floats round-trip
bit-exactly, which --mock conformance testing relies on). Invalid regions
map to HTTP 400 with {"error": ...}; a missing model maps to 503.
"""

from __future__ import annotations

import json
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request, Response
from PIL import Image

from .mockvec import hash_unit_vector, region_key, text_key
from .rendering import InvalidRegionError, render_region


@dataclass
class ServerConfig:
    model: str = "openai/clip-vit-base-patch32"
    device: str = "cpu"
    image_root: str = "."
    blur_radius: float = 10.0
    host: str = "127.0.0.1"
    port: int = 8331
    mock: bool = False
    mock_seed: int = 0
    mock_dimension: int = 32


def _json(payload: dict, status: int = 200) -> Response:
    return Response(
        content=json.dumps(payload), status_code=status, media_type="application/json"
    )


def _error(message: str, status: int) -> Response:
    return _json({"error": message}, status)


class _MockEncoder:
    def __init__(self, seed: int, dimension: int):
        self.seed = seed
        self.dimension = dimension
        self.name = "mock"

    def text_vector(self, text: str):
        return hash_unit_vector(self.seed, self.dimension, text_key(text))

    def region_vector(self, image_id: str, boxes, render: str):
        return hash_unit_vector(
            self.seed, self.dimension, region_key(image_id, boxes, render)
        )


def _validate_region_payload(payload: dict) -> tuple:
    image_meta = payload["image"]
    width, height = int(image_meta["width"]), int(image_meta["height"])
    if width <= 0 or height <= 0:
        raise InvalidRegionError("non-positive image dimensions")
    requests_ = payload["requests"]
    if not isinstance(requests_, list) or not requests_:
        raise InvalidRegionError("requests must be a non-empty list")
    for item in requests_:
        boxes = item["boxes"]
        if not isinstance(boxes, list) or len(boxes) not in (1, 2):
            raise InvalidRegionError("a region request carries one or two boxes")
        if item["render"] not in ("crop", "blur"):
            raise InvalidRegionError(f"unknown render mode: {item['render']!r}")
        for box in boxes:
            x0, y0, x1, y1 = (float(c) for c in box)
            if not (x1 > x0 and y1 > y0):
                raise InvalidRegionError(f"inverted or empty box: {box!r}")
            if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
                raise InvalidRegionError(f"box {box!r} outside image bounds")
    return image_meta, requests_


def build_app(config: ServerConfig) -> FastAPI:
    state = {"encoder": None, "error": None}

    if config.mock:
        state["encoder"] = _MockEncoder(config.mock_seed, config.mock_dimension)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if not config.mock and state["encoder"] is None:
            from .model import ClipEncoder, ModelUnavailableError

            try:
                state["encoder"] = ClipEncoder(config.model, config.device)
            except ModelUnavailableError as exc:
                state["error"] = str(exc)
        yield

    app = FastAPI(title="embedserver", docs_url=None, redoc_url=None, lifespan=lifespan)

    @app.get("/v1/info")
    def info() -> Response:
        if state["encoder"] is None:
            return _error(state["error"] or "model loading", 503)
        encoder = state["encoder"]
        return _json({"name": encoder.name, "dimension": encoder.dimension})

    @app.post("/v1/embed/text")
    async def embed_text(request: Request) -> Response:
        if state["encoder"] is None:
            return _error(state["error"] or "model loading", 503)
        try:
            payload = await request.json()
            texts = payload["texts"]
            if not isinstance(texts, list) or not all(
                isinstance(t, str) and t for t in texts
            ):
                raise ValueError("texts must be non-empty strings")
        except (ValueError, KeyError, TypeError) as exc:
            return _error(str(exc), 400)
        encoder = state["encoder"]
        if isinstance(encoder, _MockEncoder):
            vectors = [encoder.text_vector(t) for t in texts]
        else:
            vectors = encoder.embed_texts(texts)
        return _json({"vectors": vectors})

    @app.post("/v1/embed/region")
    async def embed_region(request: Request) -> Response:
        if state["encoder"] is None:
            return _error(state["error"] or "model loading", 503)
        try:
            payload = await request.json()
            image_meta, requests_ = _validate_region_payload(payload)
        except InvalidRegionError as exc:
            return _error(str(exc), 400)
        except (ValueError, KeyError, TypeError) as exc:
            return _error(str(exc), 400)
        encoder = state["encoder"]
        if isinstance(encoder, _MockEncoder):
            vectors = [
                encoder.region_vector(str(image_meta["id"]), item["boxes"], item["render"])
                for item in requests_
            ]
            return _json({"vectors": vectors})
        try:
            image = _load_image(config, image_meta)
            renderings = [
                render_region(image, item["boxes"], item["render"], config.blur_radius)
                for item in requests_
            ]
        except InvalidRegionError as exc:
            return _error(str(exc), 400)
        except OSError as exc:
            return _error(f"cannot read image: {exc}", 400)
        vectors = encoder.embed_images(renderings)
        return _json({"vectors": vectors})

    return app


def _load_image(config: ServerConfig, image_meta: dict) -> Image.Image:
    uri = image_meta.get("uri")
    if not uri:
        raise InvalidRegionError("real-model mode needs image.uri")
    root = Path(config.image_root).resolve()
    path = (root / uri).resolve()
    if not str(path).startswith(str(root)):
        raise InvalidRegionError(f"uri {uri!r} escapes the image root")
    image = Image.open(path).convert("RGB")
    width, height = int(image_meta["width"]), int(image_meta["height"])
    if image.size != (width, height):
        # metadata is authoritative for box coordinates; resample to match
        image = image.resize((width, height))
    return image
