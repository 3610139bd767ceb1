"""Bundled desk-scale image corpus.

No DIV2K download happens here.  The natural photographs shipped with
scikit-image are exported as PNG files and split into train/validation
manifests so training runs work offline.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .data import ImageBuffer, save_png

TRAIN_IMAGES = (
    "astronaut.png", "coffee.png", "motorcycle_left.png", "rocket.jpg", "hubble_deep_field.jpg",
    "ihc.png", "brick.png", "grass.png", "gravel.png", "moon.png", "page.png",
)
# Natural photographs only; flat synthetic images make the bicubic baseline trivially strong.
VAL_IMAGES = ("chelsea.png", "camera.png", "coins.png")


def _skimage_data_dir() -> Path:
    import skimage

    return Path(os.path.dirname(skimage.__file__)) / "data"


def _read(path: Path) -> ImageBuffer:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return ImageBuffer(arr.copy())


def export_corpus(out_dir) -> dict:
    """Write the corpus to ``out_dir`` and return {"train": manifest, "val": manifest}."""
    out_dir = Path(out_dir)
    src = _skimage_data_dir()
    manifests = {}
    for split, names in (("train", TRAIN_IMAGES), ("val", VAL_IMAGES)):
        lines = []
        for name in names:
            target = out_dir / split / (Path(name).stem + ".png")
            if not target.exists():
                save_png(_read(src / name), target)
            lines.append(f"{split}/{target.name}")
        manifest = out_dir / f"{split}.txt"
        manifest.write_text("\n".join(lines) + "\n")
        manifests[split] = manifest
    return manifests
