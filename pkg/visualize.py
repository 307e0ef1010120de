# visualize.py - PNG previews of clean and adversarial images

import logging
import os
from typing import List, Optional

import numpy as np

try:
    from PIL import Image
    PIL_AVAILABLE = True
except ImportError:
    PIL_AVAILABLE = False
    print("⚠️ Pillow not available - attack previews disabled")

logger = logging.getLogger(__name__)


def to_uint8(images: np.ndarray) -> np.ndarray:
    """[N,C,H,W] floats in [0,1] -> [N,H,W,C] bytes"""
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(0, 2, 3, 1)


def image_grid(rows: List[np.ndarray], scale: int = 4, gap: int = 2) -> np.ndarray:
    """Tile equally-shaped [N,C,H,W] rows into one RGB array"""
    tiles = [to_uint8(row) for row in rows]
    n, h, w, c = tiles[0].shape
    if c == 1:
        tiles = [np.repeat(t, 3, axis=3) for t in tiles]
    canvas = np.full((len(rows) * (h + gap) - gap, n * (w + gap) - gap, 3), 255, dtype=np.uint8)
    for r, tile in enumerate(tiles):
        for i in range(n):
            canvas[r * (h + gap):r * (h + gap) + h, i * (w + gap):i * (w + gap) + w] = tile[i]
    return canvas.repeat(scale, axis=0).repeat(scale, axis=1)


def save_attack_preview(clean: np.ndarray, pgd_adv: np.ndarray, roa_adv: Optional[np.ndarray], path: str,
                        magnify: float = 15.0, max_samples: int = 8, scale: int = 4) -> Optional[str]:
    """
    Rows: clean inputs, PGD adversarials, the PGD perturbation magnified
    around mid-gray, and ROA adversarials when given.
    """
    if not PIL_AVAILABLE:
        logger.warning("Pillow missing, skipping preview %s", path)
        return None
    n = min(max_samples, clean.shape[0])
    rows = [clean[:n], pgd_adv[:n], 0.5 + magnify * (pgd_adv[:n] - clean[:n])]
    if roa_adv is not None:
        rows.append(roa_adv[:n])
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(image_grid(rows, scale=scale)).save(path)
    logger.info("✓ attack preview written to %s", path)
    return path
