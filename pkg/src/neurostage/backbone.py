"""Adapter around an external frozen image/text backbone.

The rest of the system never talks to the backbone directly: it consumes
feature caches. This module turns a directory of images plus a label file into
those caches. The default backbone is the pretrained OpenCLIP ResNet-50 image
and text encoder pair with frozen weights; any object implementing
``BackboneProtocol`` can be substituted (tests use a deterministic stub).

Intermediate blocks yield spatial maps; they are global-average-pooled over
spatial positions before caching, which matches the projector input widths
(256 for the first block, 1024 for the third). Pooling choice and the text
prompt template are recorded in the cache metadata.

Label file schema (UTF-8 JSON)::

    {
      "classes": {"<class_id>": "<label text>", ...},
      "images": {"<stimulus_id>": {"file": "<relative path>", "class": "<class_id>"}, ...}
    }
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Protocol

import numpy as np

from .features import FeatureBundle, FeatureTable, write_cache

TEXT_TEMPLATE = "{label}"


class BackboneProtocol(Protocol):
    def encode_image(self, path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (block1 map (256, H, W), block3 map (1024, H', W'), final (1024,))."""
        ...

    def encode_text(self, prompts: list[str]) -> np.ndarray:
        """Return (n, 1024) text features."""
        ...


def load_default_backbone() -> BackboneProtocol:
    """Load the pretrained OpenCLIP ResNet-50 encoders with frozen weights."""
    try:
        import open_clip  # noqa: F401
    except ImportError as exc:
        raise EnvironmentError(
            "feature extraction needs the 'open_clip_torch' package and its "
            "pretrained ResNet-50 weights; install it (pip install open_clip_torch) "
            "or run on synthetic/pre-built feature caches instead"
        ) from exc
    return _OpenClipBackbone()


class _OpenClipBackbone:
    """Thin wrapper over open_clip's RN50; parameters are never updated."""

    def __init__(self):
        import open_clip
        import torch
        from PIL import Image  # noqa: F401

        self._torch = torch
        self._open_clip = open_clip
        model, _, preprocess = open_clip.create_model_and_transforms(
            "RN50", pretrained="openai")
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model
        self.preprocess = preprocess
        self.tokenizer = open_clip.get_tokenizer("RN50")

    def encode_image(self, path):
        from PIL import Image
        torch = self._torch
        img = self.preprocess(Image.open(path).convert("RGB")).unsqueeze(0)
        visual = self.model.visual
        with torch.no_grad():
            x = visual.act1(visual.bn1(visual.conv1(img)))
            x = visual.act2(visual.bn2(visual.conv2(x)))
            x = visual.act3(visual.bn3(visual.conv3(x)))
            x = visual.avgpool(x)
            b1 = visual.layer1(x)
            b2 = visual.layer2(b1)
            b3 = visual.layer3(b2)
            b4 = visual.layer4(b3)
            final = visual.attnpool(b4)
        return (b1[0].numpy(), b3[0].numpy(), final[0].numpy())

    def encode_text(self, prompts):
        torch = self._torch
        with torch.no_grad():
            tokens = self.tokenizer(prompts)
            return self.model.encode_text(tokens).numpy()


def global_average_pool(spatial: np.ndarray) -> np.ndarray:
    """(C, H, W) spatial map -> (C,) vector."""
    if spatial.ndim != 3:
        raise ValueError(f"expected a (C, H, W) map, got shape {spatial.shape}")
    return spatial.mean(axis=(1, 2))


def extract_backbone_features(image_dir: str | Path, label_file: str | Path,
                              out_cache: str | Path,
                              backbone: BackboneProtocol | None = None) -> FeatureBundle:
    """Extract all four feature levels and write them as cache files."""
    image_dir = Path(image_dir)
    spec = json.loads(Path(label_file).read_text(encoding="utf-8"))
    classes = spec["classes"]
    images = spec["images"]
    if backbone is None:
        backbone = load_default_backbone()

    stim_ids = sorted(images)
    lows, highs, finals = [], [], []
    for sid in stim_ids:
        low_map, high_map, final_vec = backbone.encode_image(image_dir / images[sid]["file"])
        lows.append(global_average_pool(low_map))
        highs.append(global_average_pool(high_map))
        finals.append(final_vec / np.linalg.norm(final_vec))

    class_ids = sorted(classes)
    prompts = [TEXT_TEMPLATE.format(label=classes[cid]) for cid in class_ids]
    text = np.asarray(backbone.encode_text(prompts), dtype=np.float32)
    text = text / np.linalg.norm(text, axis=1, keepdims=True)

    bundle = FeatureBundle(
        low=FeatureTable(stim_ids, np.asarray(lows, dtype=np.float32)),
        high=FeatureTable(stim_ids, np.asarray(highs, dtype=np.float32)),
        final=FeatureTable(stim_ids, np.asarray(finals, dtype=np.float32)),
        text=FeatureTable(class_ids, text),
        meta={"provider": "backbone", "pooling": "global_average",
              "text_template": TEXT_TEMPLATE},
    )
    write_cache(bundle, out_cache)
    return bundle
