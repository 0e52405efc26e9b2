"""Image inputs: PNG files, ``.npy`` float grids, or inline nested lists.

The ``.npy`` sidecar is the plain numpy array format holding a float array of
shape [height, width, channels] with values in [0, 1].  It lets tests and
scripts skip image decoding entirely.  PNG decoding needs Pillow.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import DataError


def load_image(ref, base_dir: str | Path | None = None, channels: int = 3) -> np.ndarray:
    if isinstance(ref, (list, tuple, np.ndarray)):
        arr = np.asarray(ref, dtype=np.float64)
    else:
        path = Path(ref)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            raise DataError(f"image not found: {path}")
        if path.suffix == ".npy":
            arr = np.load(path, allow_pickle=False).astype(np.float64)
        elif path.suffix.lower() == ".png":
            try:
                from PIL import Image
            except ImportError as e:  # pragma: no cover
                raise DataError("PNG input needs Pillow; use a .npy grid instead") from e
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB" if channels == 3 else "L"), dtype=np.float64) / 255.0
        else:
            raise DataError(f"unsupported image format: {path.suffix}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise DataError(f"image must be [H, W, {channels}], got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DataError("pixel values must lie in [0, 1]")
    return arr


def save_grid(path: str | Path, pixels: np.ndarray) -> None:
    np.save(Path(path), np.asarray(pixels, dtype=np.float64), allow_pickle=False)
