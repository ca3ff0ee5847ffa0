"""Image tensors, PNG files and resizing.

Images are torch tensors in channel-first layout, ``(C, H, W)`` for a single
image or ``(N, C, H, W)`` for a batch, with pixel values in [-1, 1].
"""
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from errors import DimensionError, ValidationError


def check_image(x, resolution=None, channels=None):
    """Validate an image or batch; returns it as a 4-d batch view."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise DimensionError(f"expected (C, H, W) or (N, C, H, W), got shape {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got {x.shape[1]}")
    if resolution is not None and tuple(x.shape[-2:]) != (resolution, resolution):
        raise DimensionError(f"expected {resolution}x{resolution} input, got {x.shape[-2]}x{x.shape[-1]}")
    if not torch.isfinite(x).all():
        raise ValidationError("image contains non-finite pixels")
    return x


def resize(x, resolution):
    """Bilinear resize that keeps the autograd graph; no-op at equal size."""
    if tuple(x.shape[-2:]) == (resolution, resolution):
        return x
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeeze else out


def to_uint8(image):
    """Map a (C, H, W) image from [-1, 1] to an (H, W, C) uint8 array."""
    arr = ((image.detach().to(torch.float64).clamp(-1.0, 1.0) + 1.0) * 127.5).round()
    return arr.to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def from_uint8(arr):
    t = torch.from_numpy(np.ascontiguousarray(arr)).to(torch.float32)
    if t.dim() == 2:
        t = t.unsqueeze(-1)
    return t.permute(2, 0, 1) / 127.5 - 1.0


def save_png(image, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    arr = to_uint8(image)
    mode = "L" if arr.shape[-1] == 1 else "RGB"
    Image.fromarray(arr.squeeze(-1) if mode == "L" else arr, mode=mode).save(path, format="PNG")


def load_png(path, resolution=None, channels=3):
    with Image.open(path) as img:
        img = img.convert("RGB" if channels == 3 else "L")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        return from_uint8(np.asarray(img))


def make_grid_image(rows, path, pad=2):
    """Write a grid of equally sized (C, H, W) images; ``rows`` is a list of lists."""
    h, w = rows[0][0].shape[-2:]
    n_cols = max(len(r) for r in rows)
    canvas = np.full((len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, image in enumerate(row):
            tile = to_uint8(image)
            if tile.shape[-1] == 1:
                tile = np.repeat(tile, 3, axis=-1)
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y:y + h, x:x + w] = tile
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(canvas).save(path, format="PNG")
    return path
