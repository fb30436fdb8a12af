"""Vision-language encoder behind the protocol (CLIP via transformers).

Weights load once at startup; inference runs in eval mode under no_grad so
identical inputs yield identical vectors. Raw (unnormalized) features are
returned — per the protocol, normalization is the client's job.
"""

from __future__ import annotations

from typing import List, Sequence

from PIL import Image


class ModelUnavailableError(RuntimeError):
    """Raised when weights cannot be loaded or inference fails to start."""


class ClipEncoder:
    def __init__(self, model_name: str, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise ModelUnavailableError(
                f"torch/transformers not installed: {exc}"
            ) from exc
        try:
            self._model = CLIPModel.from_pretrained(model_name)
            self._processor = CLIPProcessor.from_pretrained(model_name)
        except Exception as exc:  # load failures map to protocol 503
            raise ModelUnavailableError(f"cannot load {model_name!r}: {exc}") from exc
        self._torch = torch
        self._device = device
        self._model.eval().to(device)
        self.name = model_name.rsplit("/", 1)[-1]
        self.dimension = int(self._model.config.projection_dim)

    def embed_texts(self, texts: Sequence[str]) -> List[List[float]]:
        inputs = self._processor(
            text=list(texts), return_tensors="pt", padding=True, truncation=True
        ).to(self._device)
        with self._torch.no_grad():
            features = self._model.get_text_features(**inputs)
        return features.cpu().double().tolist()

    def embed_images(self, images: Sequence[Image.Image]) -> List[List[float]]:
        inputs = self._processor(images=list(images), return_tensors="pt").to(
            self._device
        )
        with self._torch.no_grad():
            features = self._model.get_image_features(**inputs)
        return features.cpu().double().tolist()
