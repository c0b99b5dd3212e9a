"""Bundled sharp/blurred sample pair and toy weights."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .imageio import read_image

DATA_DIR = Path(__file__).parent / "data"
SHARP_PATH = DATA_DIR / "sharp.png"
BLURRED_PATH = DATA_DIR / "blurred.png"
TOY_WEIGHTS_PATH = DATA_DIR / "toy_tiny.loft"

#: Horizontal linear motion blur: 11 equal taps centred on the pixel.
MOTION_KERNEL = np.full(11, 1.0 / 11.0)


def motion_blur(image: np.ndarray, kernel: np.ndarray = MOTION_KERNEL) -> np.ndarray:
    """Blur along the width axis with reflect boundaries."""
    return correlate1d(np.asarray(image, dtype=np.float64), kernel, axis=1, mode="reflect")


def load_pair(sharp=SHARP_PATH, blurred=BLURRED_PATH) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(blurred, sharp)`` float32 images."""
    return read_image(blurred), read_image(sharp)


def make_pair(out_dir=DATA_DIR) -> None:
    """Regenerate the bundled pair from scikit-image's 512x512 astronaut photograph."""
    from skimage import data as skdata

    from .imageio import write_image

    sharp = skdata.astronaut().astype(np.float64) / 255.0
    out_dir = Path(out_dir)
    write_image(out_dir / "sharp.png", sharp)
    write_image(out_dir / "blurred.png", motion_blur(read_image(out_dir / "sharp.png")))
