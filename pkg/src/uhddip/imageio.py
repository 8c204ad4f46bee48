"""8-bit PNG ingest/egest for H x W x C float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IngestError


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path, channels: int | None = None) -> np.ndarray:
    """Read an image as float32 H x W x C in [0, 1]."""
    try:
        with Image.open(path) as im:
            if channels == 1:
                im = im.convert("L")
            elif channels == 3:
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float32) / 255.0


def write_image(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed encoder settings keep the written bytes reproducible
    Image.fromarray(to_uint8(img)).save(path, format="PNG", compress_level=6)


def luminance(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an H x W x 3 image; single-channel input passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114


def hwc_to_nchw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1)[None])


def nchw_to_hwc(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(arr)[0].transpose(1, 2, 0))
