"""Binary PPM (P6) export for rendered samples."""

from __future__ import annotations

import os

import numpy as np


class PpmError(Exception):
    pass


def ppm_bytes(image):
    """(H, W, 3) floats in [0, 1] -> P6 bytes, rounding half away from zero."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise PpmError(f"expected an (H, W, 3) image, got {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise PpmError(f"pixel values outside [0, 1]: "
                       f"min {image.min():.4g}, max {image.max():.4g}")
    h, w = image.shape[:2]
    quant = np.floor(image * 255.0 + 0.5).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + quant.tobytes()


def export_ppm(path, image):
    data = ppm_bytes(image)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
