import logging
import os

from manifest import DatasetManifest, ImageRecord

logger = logging.getLogger(__name__)


def combine_manifests(manifests, out_path):
    """Concatenate manifests into one, renumbering subjects so they stay disjoint.

    Paths are rewritten relative to the directory of ``out_path``; the image
    files themselves are not copied.
    """
    root = os.path.dirname(os.path.abspath(out_path))
    records = []
    offset = 0
    parts = []
    for manifest in manifests:
        index = manifest.class_index()
        for record in manifest.records:
            records.append(ImageRecord(
                subject_id=offset + index[record.subject_id],
                path=os.path.relpath(manifest.abspath(record), root),
                source=record.source,
                m=record.m,
                seed=record.seed,
            ))
        parts.append({"subjects": len(index), "offset": offset, "digest": manifest.header.get("config_digest")})
        logger.info(f"Added {len(manifest.records)} images from {manifest.root} at subject offset {offset}")
        offset += len(index)

    combined = DatasetManifest(root=root, records=records, header={"kind": "combined", "parts": parts})
    combined.write(out_path)
    logger.info(f"Combined {offset} subjects / {len(records)} images into {out_path}")
    return combined
