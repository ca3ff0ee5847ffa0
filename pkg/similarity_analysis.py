"""Similarity-to-center scoring, equal-size similarity groups and embedding export."""
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch

from errors import SubjectMappingError, ValidationError
from identity_embedder import embed, identity_centers
from imaging import load_png
from manifest import SOURCE_OVERSAMPLED, DatasetManifest, ImageRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredImage:
    subject_id: int
    path: str
    similarity_to_center: float


@dataclass(frozen=True)
class SimilarityGroup:
    group_id: int
    members: tuple
    mean_similarity: float


def embed_manifest(manifest, encoder, batch_size=256):
    cfg = encoder.config
    chunks = []
    for start in range(0, len(manifest.records), batch_size):
        batch = manifest.records[start:start + batch_size]
        images = torch.stack([load_png(manifest.abspath(r), resolution=cfg.resolution, channels=cfg.channels)
                              for r in batch])
        chunks.append(embed(images, encoder))
    return torch.cat(chunks) if chunks else torch.empty(0, cfg.embedding_dim)


def score_to_center(manifest, encoder, head, exclude_oversampled=False):
    """Cosine similarity of every image to the normalised weight row of its subject's class.

    Subjects resolve through the head's own subject-to-class map, so subsets
    and group manifests are scored against the centers they were trained with.
    """
    if exclude_oversampled:
        manifest = manifest.select(exclude_sources=(SOURCE_OVERSAMPLED,))
    index = {}
    missing = []
    for sid in manifest.subject_ids():
        try:
            index[sid] = head.class_of(sid)
        except SubjectMappingError:
            missing.append(sid)
    if missing:
        raise SubjectMappingError(f"subjects {missing[:5]} have no class in a head of {head.num_classes} classes")
    centers = identity_centers(head)
    embeddings = embed_manifest(manifest, encoder)
    classes = torch.tensor([index[r.subject_id] for r in manifest.records], dtype=torch.long)
    scores = (embeddings * centers[classes].to(embeddings.dtype)).sum(dim=-1).clamp(-1.0, 1.0)
    logger.info(f"Scored {len(scores)} images against {len(index)} identity centers")
    return [ScoredImage(r.subject_id, r.path, float(s)) for r, s in zip(manifest.records, scores.tolist())]


def bucket_by_similarity(scored, n_groups):
    """Sort by similarity (descending, ties by subject and path) and cut into near-equal chunks."""
    if n_groups < 1:
        raise ValidationError(f"n_groups must be at least 1, got {n_groups}")
    if n_groups > len(scored):
        raise ValidationError(f"cannot split {len(scored)} images into {n_groups} groups")
    ordered = sorted(scored, key=lambda s: (-s.similarity_to_center, s.subject_id, s.path))
    groups = []
    for group_id, idx in enumerate(np.array_split(np.arange(len(ordered)), n_groups)):
        members = tuple(ordered[i] for i in idx)
        mean = float(np.mean([m.similarity_to_center for m in members]))
        groups.append(SimilarityGroup(group_id=group_id, members=members, mean_similarity=mean))
        logger.info(f"group {group_id}: {len(members)} images, mean similarity {mean:.4f}")
    return groups


def groups_frame(groups):
    return pd.DataFrame([{"group_id": g.group_id, "size": len(g.members), "mean_similarity": g.mean_similarity}
                         for g in groups])


def write_group_manifests(groups, manifest, out_dir):
    """One manifest per group, in the source manifest's format, pointing at the original files."""
    by_path = {r.path: r for r in manifest.records}
    paths = []
    for group in groups:
        group_dir = os.path.join(out_dir, f"group_{group.group_id}")
        records = [by_path[m.path] for m in group.members]
        rel_root = os.path.relpath(manifest.root, group_dir)
        records = [ImageRecord(subject_id=r.subject_id, path=os.path.join(rel_root, r.path), source=r.source,
                               m=r.m, seed=r.seed) for r in records]
        header = {**manifest.header, "group_id": group.group_id, "mean_similarity": group.mean_similarity}
        paths.append(DatasetManifest(root=os.path.abspath(group_dir), records=records, header=header).write())
    groups_frame(groups).to_csv(os.path.join(out_dir, "groups.csv"), index=False)
    return paths


def _record_dtype(dim):
    return np.dtype([("subject_id", "<i4"), ("similarity", "<f4"), ("embedding", "<f4", (dim,))])


def export_embeddings(manifest, encoder, out, scored=None):
    """Write a JSON header line then little-endian float32 records (subject, similarity, D floats)."""
    if len(manifest) == 0:
        raise ValidationError("cannot export embeddings of an empty manifest")
    embeddings = embed_manifest(manifest, encoder).to(torch.float32).numpy()
    dim = embeddings.shape[1]
    data = np.zeros(len(manifest), dtype=_record_dtype(dim))
    data["subject_id"] = [r.subject_id for r in manifest.records]
    if scored is not None:
        lookup = {s.path: s.similarity_to_center for s in scored}
        data["similarity"] = [lookup.get(r.path, np.nan) for r in manifest.records]
    else:
        data["similarity"] = np.nan
    data["embedding"] = embeddings
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "wb") as f:
        header = {"count": len(manifest), "dim": dim, "paths": [r.path for r in manifest.records]}
        f.write((json.dumps(header) + "\n").encode("utf-8"))
        f.write(data.tobytes())
    logger.info(f"Exported {len(manifest)} embeddings of dimension {dim} to {out}")
    return out


def read_embeddings(path):
    """Return (header, structured array) of an embedding export."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        data = np.frombuffer(f.read(), dtype=_record_dtype(header["dim"]), count=header["count"])
    return header, data
