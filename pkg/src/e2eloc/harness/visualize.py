"""Per-sample crop pictures: input with predicted and true boxes, next to the crop."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..supervision import theta_to_boxes
from ..synthdata import GlyphDataset
from ..tensor_core.tensor import Tensor, no_grad


def _to_rgb(img: np.ndarray) -> Image.Image:
    """(C, H, W) float in [0, 1] -> RGB image."""
    pix = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    pix = np.repeat(pix, 3, axis=0) if pix.shape[0] == 1 else pix[:3]
    return Image.fromarray(np.moveaxis(pix, 0, -1), "RGB")


def _box_pixels(box: np.ndarray, size: int) -> list[float]:
    return [(v + 1.0) / 2.0 * size for v in box]


def save_crops(model, ds: GlyphDataset, path: str | Path, count: int, scale: int = 3) -> Path:
    """Write ``count`` rows of (image with boxes | crop) to a PNG; green is truth, red the prediction."""
    count = min(count, len(ds))
    with no_grad():
        loc = model.localizer(Tensor(ds.images[:count]))
    boxes = theta_to_boxes(loc.theta.data.astype(np.float64), clip=True)
    size = ds.images.shape[-1] * scale
    tile = Image.new("RGB", (2 * size, count * size))
    for i in range(count):
        img = _to_rgb(ds.images[i]).resize((size, size), Image.NEAREST)
        draw = ImageDraw.Draw(img)
        draw.rectangle(_box_pixels(ds.boxes[i], size), outline=(0, 200, 0))
        draw.rectangle(_box_pixels(boxes[i], size), outline=(220, 0, 0))
        crop = _to_rgb(np.clip(loc.crop.data[i], 0, 1)).resize((size, size), Image.NEAREST)
        tile.paste(img, (0, i * size))
        tile.paste(crop, (size, i * size))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tile.save(path)
    return path
