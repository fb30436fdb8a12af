"""Hash-based vectors for --mock mode.

Implements the protocol's mock conformance contract so clients can check
byte-exact agreement without model weights:

    material = "{seed}|{dimension}|{key}" as UTF-8
    block b  = SHA-256(material + uint32_be(b)), b = 0, 1, ...
    each 8-byte big-endian chunk u becomes u / 2**63 - 1.0
    the first `dimension` values are L2-normalized

Text keys: {"kind":"text","text":...}. Region keys:
{"boxes":[[x0,y0,x1,y1],...],"image":id,"kind":"region","render":mode},
JSON with sorted keys, (",", ":") separators, coordinates rounded to two
decimals.
"""

from __future__ import annotations

import hashlib
import json
from typing import Iterable, List

import numpy as np


def text_key(text: str) -> str:
    return json.dumps(
        {"kind": "text", "text": text}, sort_keys=True, separators=(",", ":")
    )


def region_key(image_id: str, boxes: Iterable[Iterable[float]], render: str) -> str:
    return json.dumps(
        {
            "boxes": [[round(float(c), 2) for c in box] for box in boxes],
            "image": image_id,
            "kind": "region",
            "render": render,
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def hash_unit_vector(seed: int, dimension: int, key: str) -> List[float]:
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
    return (values / np.linalg.norm(values)).tolist()
