import logging
import os

from PIL import Image, UnidentifiedImageError

from errors import ValidationError
from manifest import SOURCE_REAL, DatasetManifest, ImageRecord, MANIFEST_NAME
from models import ProcessingLog

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def _is_image(name):
    return name.lower().endswith(IMAGE_EXTENSIONS)


def ingest_directory(src_dir, session=None):
    """Describe a directory of images as a manifest rooted at ``src_dir``.

    Sub-directories are subjects. A flat directory makes every image its own
    subject, which is the layout used for inquiry pools.
    """
    if not os.path.isdir(src_dir):
        raise ValidationError(f"{src_dir} is not a directory")
    logger.info(f"Ingesting images from {src_dir}")

    subdirs = sorted(d for d in os.listdir(src_dir) if os.path.isdir(os.path.join(src_dir, d)))
    if subdirs:
        groups = [(d, sorted(f for f in os.listdir(os.path.join(src_dir, d)) if _is_image(f))) for d in subdirs]
        groups = [(d, files) for d, files in groups if files]
        entries = [(sid, f"{d}/{f}") for sid, (d, files) in enumerate(groups) for f in files]
    else:
        files = sorted(f for f in os.listdir(src_dir) if _is_image(f))
        entries = list(enumerate(files))

    records = []
    error_count = 0
    for subject_id, rel in entries:
        try:
            with Image.open(os.path.join(src_dir, rel)) as img:
                img.verify()
            records.append(ImageRecord(subject_id=subject_id, path=rel, source=SOURCE_REAL))
        except (OSError, UnidentifiedImageError) as e:
            error_count += 1
            logger.error(f"Skipping unreadable image {rel}: {e}")

    if not records:
        raise ValidationError(f"no readable images found in {src_dir}")

    manifest = DatasetManifest(root=os.path.abspath(src_dir), records=records, header={"kind": "ingested"})
    if session is not None:
        with session() as s:
            s.add(ProcessingLog(filename=os.path.join(src_dir, MANIFEST_NAME), status="success",
                                records_processed=len(records),
                                error_message=f"{error_count} unreadable" if error_count else None))
            s.commit()
    logger.info(f"Ingestion completed. Images: {len(records)}, Subjects: {len(manifest.subject_ids())}, Errors: {error_count}")
    return manifest
