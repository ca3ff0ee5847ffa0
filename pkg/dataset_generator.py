"""Synthetic dataset assembly: inquiry filtering, m schedules and per-subject synthesis."""
import logging
import os
from dataclasses import dataclass

import torch
from tqdm import tqdm

from config import digest_of
from diffusion_core import m_grid
from errors import ValidationError
from identity_embedder import cosine_similarity, embed
from imaging import resize, save_png
from manifest import SOURCE_GENERATED, SOURCE_OVERSAMPLED, DatasetManifest, ImageRecord, image_name, subject_dir

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixSchedule:
    m_values: tuple

    def __post_init__(self):
        if not self.m_values:
            raise ValidationError("m schedule is empty")
        if any(not -1.0 <= m <= 1.0 for m in self.m_values):
            raise ValidationError(f"m values must lie in [-1, 1], got {self.m_values}")
        if len(set(self.m_values)) != len(self.m_values):
            raise ValidationError(f"m schedule has duplicates: {self.m_values}")

    @classmethod
    def from_values(cls, values):
        return cls(tuple(float(v) for v in values))

    def m_for(self, image_index):
        """Round-robin m for the image at ``image_index`` within a subject."""
        return self.m_values[image_index % len(self.m_values)]


def mix_m_schedule(low, high, interval):
    return MixSchedule(tuple(m_grid(low, high, interval)))


def select_by_similarity(embeddings, threshold):
    """Greedy pass in input order keeping candidates within ``threshold`` of all kept ones."""
    if len(embeddings) == 0:
        raise ValidationError("inquiry pool is empty")
    if not -1.0 < threshold <= 1.0:
        raise ValidationError(f"threshold must lie in (-1, 1], got {threshold}")
    accepted = []
    for i, candidate in enumerate(embeddings):
        if accepted and cosine_similarity(embeddings[accepted], candidate).max() > threshold:
            continue
        accepted.append(i)
    return accepted


def select_inquiries(pool, encoder, threshold=0.3):
    """Indices of the pool images kept as inquiries, in input order."""
    if len(pool) == 0:
        raise ValidationError("inquiry pool is empty")
    images = torch.stack(list(pool)) if not torch.is_tensor(pool) else pool
    embeddings = embed(resize(images, encoder.config.resolution), encoder)
    accepted = select_by_similarity(embeddings, threshold)
    logger.info(f"Inquiry filter kept {len(accepted)} of {len(images)} candidates at threshold {threshold}")
    return accepted


def assemble_dataset(inquiries, sampler, schedule_m, per_subject, oversample, seed, out_dir, write_images=True):
    """Generate ``per_subject`` images plus ``oversample`` inquiry copies per inquiry.

    ``sampler`` provides ``generate(inquiry, m_values, seeds)`` and ``describe()``.
    A subject whose generation fails is logged and left out, and the manifest
    header is flagged partial.
    """
    if per_subject < 1:
        raise ValidationError(f"per_subject must be at least 1, got {per_subject}")
    if oversample < 0:
        raise ValidationError(f"oversample must be non-negative, got {oversample}")
    os.makedirs(out_dir, exist_ok=True)

    settings = {
        "per_subject": per_subject,
        "oversample": oversample,
        "m_values": list(schedule_m.m_values),
        "seed": seed,
        "subjects": len(inquiries),
        "sampler": sampler.describe(),
    }
    records = []
    failed = []
    for s, inquiry in enumerate(tqdm(inquiries, desc="subjects", disable=len(inquiries) < 50)):
        folder = subject_dir(s)
        m_values = [schedule_m.m_for(j) for j in range(per_subject)]
        seeds = [seed + s * per_subject + j for j in range(per_subject)]
        try:
            images = sampler.generate(inquiry, m_values, seeds)
        except Exception as e:
            failed.append(s)
            logger.error(f"Generation failed for subject {s}: {e}")
            continue
        for j, (image, m, image_seed) in enumerate(zip(images, m_values, seeds)):
            rel = f"{folder}/{image_name(j)}"
            if write_images:
                save_png(image, os.path.join(out_dir, rel))
            records.append(ImageRecord(subject_id=s, path=rel, source=SOURCE_GENERATED, m=m, seed=image_seed))
        for k in range(oversample):
            rel = f"{folder}/{image_name(per_subject + k)}"
            if write_images:
                save_png(inquiry, os.path.join(out_dir, rel))
            records.append(ImageRecord(subject_id=s, path=rel, source=SOURCE_OVERSAMPLED))

    header = {"kind": "synthetic", "config_digest": digest_of(settings), **settings,
              "partial": bool(failed), "failed_subjects": failed}
    manifest = DatasetManifest(root=os.path.abspath(out_dir), records=records, header=header)
    manifest.write()
    logger.info(f"Assembled {len(inquiries) - len(failed)} subjects / {len(records)} images in {out_dir}")
    return manifest
