"""Procedural identity corpus.

Every identity is a seeded code: a background colour and three coloured
geometric shapes at fixed positions. Every image of the identity re-renders
that code under nuisance jitter (translation, hue shift, an occluding patch
and blur), which keeps intra-identity variation well below the variation
between identities.
"""
import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from errors import ValidationError
from manifest import SOURCE_REAL, DatasetManifest, ImageRecord, image_name, subject_dir

logger = logging.getLogger(__name__)

SHAPES = ("ellipse", "rectangle", "triangle")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class Nuisance:
    dx: float
    dy: float
    hue_shift: int
    occluder: tuple | None
    blur: float


class IdentityRenderer:
    """Draws identity codes at a fixed resolution."""

    def __init__(self, resolution=32, max_shift=0.06, max_hue=10, occlusion_prob=0.3, blur_levels=(0.0, 0.4, 0.8)):
        if resolution < 8:
            raise ValidationError(f"resolution must be at least 8, got {resolution}")
        self.resolution = resolution
        self.max_shift = max_shift
        self.max_hue = max_hue
        self.occlusion_prob = occlusion_prob
        self.blur_levels = blur_levels

    def identity_code(self, rng):
        shapes = []
        for _ in range(3):
            shapes.append({
                "kind": SHAPES[int(rng.integers(len(SHAPES)))],
                "color": tuple(int(c) for c in rng.integers(0, 256, size=3)),
                "center": tuple(float(c) for c in rng.uniform(0.22, 0.78, size=2)),
                "size": float(rng.uniform(0.14, 0.32)),
            })
        return {"background": tuple(int(c) for c in rng.integers(0, 256, size=3)), "shapes": shapes}

    def nuisance(self, rng):
        occluder = None
        if rng.random() < self.occlusion_prob:
            occluder = (*(float(c) for c in rng.uniform(0.1, 0.9, size=2)), float(rng.uniform(0.12, 0.2)))
        return Nuisance(
            dx=float(rng.uniform(-self.max_shift, self.max_shift)),
            dy=float(rng.uniform(-self.max_shift, self.max_shift)),
            hue_shift=int(rng.integers(-self.max_hue, self.max_hue + 1)),
            occluder=occluder,
            blur=float(self.blur_levels[int(rng.integers(len(self.blur_levels)))]),
        )

    def render(self, code, nuisance):
        size = self.resolution * SUPERSAMPLE
        img = Image.new("RGB", (size, size), code["background"])
        draw = ImageDraw.Draw(img)
        for shape in code["shapes"]:
            cx = (shape["center"][0] + nuisance.dx) * size
            cy = (shape["center"][1] + nuisance.dy) * size
            r = shape["size"] * size / 2
            box = (cx - r, cy - r, cx + r, cy + r)
            if shape["kind"] == "ellipse":
                draw.ellipse(box, fill=shape["color"])
            elif shape["kind"] == "rectangle":
                draw.rectangle(box, fill=shape["color"])
            else:
                draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=shape["color"])
        if nuisance.occluder is not None:
            ox, oy, orad = (v * size for v in nuisance.occluder)
            draw.rectangle((ox - orad / 2, oy - orad / 2, ox + orad / 2, oy + orad / 2), fill=(128, 128, 128))
        img = img.resize((self.resolution, self.resolution), Image.LANCZOS)
        if nuisance.hue_shift:
            hsv = np.asarray(img.convert("HSV")).copy()
            hsv[..., 0] = (hsv[..., 0].astype(np.int16) + nuisance.hue_shift) % 256
            img = Image.fromarray(hsv, mode="HSV").convert("RGB")
        if nuisance.blur > 0:
            img = img.filter(ImageFilter.GaussianBlur(radius=nuisance.blur))
        return img


def make_toy_corpus(n_identities, per_identity, resolution, seed, out_dir, min_identities=2):
    """Render ``n_identities`` x ``per_identity`` images and write their manifest."""
    if n_identities < min_identities:
        raise ValidationError(f"toy corpus needs at least {min_identities} identities, got {n_identities}")
    if per_identity < 1:
        raise ValidationError(f"per_identity must be positive, got {per_identity}")
    renderer = IdentityRenderer(resolution=resolution)
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for identity in range(n_identities):
        code = renderer.identity_code(np.random.default_rng([seed, identity]))
        folder = subject_dir(identity)
        os.makedirs(os.path.join(out_dir, folder), exist_ok=True)
        for k in range(per_identity):
            nuisance = renderer.nuisance(np.random.default_rng([seed, identity, k]))
            rel = f"{folder}/{image_name(k)}"
            renderer.render(code, nuisance).save(os.path.join(out_dir, rel), format="PNG")
            records.append(ImageRecord(subject_id=identity, path=rel, source=SOURCE_REAL))
        if (identity + 1) % 25 == 0:
            logger.debug(f"Rendered {identity + 1}/{n_identities} identities")
    manifest = DatasetManifest(
        root=os.path.abspath(out_dir),
        records=records,
        header={"kind": "toy", "identities": n_identities, "per_identity": per_identity,
                "resolution": resolution, "seed": seed},
    )
    manifest.write()
    logger.info(f"Toy corpus: {n_identities} identities x {per_identity} images in {out_dir}")
    return manifest
