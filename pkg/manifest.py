"""On-disk description of an image dataset (real, toy or synthetic).

A manifest is a JSON-lines file: the first line is ``{"header": {...}}`` and
every following line is one image record
``{"subject_id", "path", "source", "m", "seed"}``. Paths are relative to the
directory holding the manifest file.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import pandas as pd
import torch

from app import __version__
from errors import ValidationError
from imaging import load_png

logger = logging.getLogger(__name__)

SOURCE_REAL = "real"
SOURCE_GENERATED = "generated"
SOURCE_OVERSAMPLED = "oversampled-inquiry"
SOURCES = (SOURCE_REAL, SOURCE_GENERATED, SOURCE_OVERSAMPLED)

MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class ImageRecord:
    subject_id: int
    path: str
    source: str = SOURCE_REAL
    m: float | None = None
    seed: int | None = None


@dataclass
class DatasetManifest:
    root: str
    records: list = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def subject_ids(self):
        """Subject ids in order of first appearance."""
        return list(dict.fromkeys(r.subject_id for r in self.records))

    def by_subject(self):
        groups = {}
        for record in self.records:
            groups.setdefault(record.subject_id, []).append(record)
        return groups

    def class_index(self):
        """Map subject id to a dense class index (sorted subject order)."""
        return {sid: i for i, sid in enumerate(sorted(self.subject_ids()))}

    def abspath(self, record):
        return os.path.join(self.root, record.path)

    def to_frame(self):
        return pd.DataFrame([asdict(r) for r in self.records], columns=["subject_id", "path", "source", "m", "seed"])

    def validate(self, check_files=True, per_subject=None):
        seen = set()
        for record in self.records:
            if record.source not in SOURCES:
                raise ValidationError(f"unknown source tag {record.source!r} for {record.path}")
            if record.path in seen:
                raise ValidationError(f"duplicate image path {record.path}")
            seen.add(record.path)
            if check_files and not os.path.exists(self.abspath(record)):
                raise ValidationError(f"manifest references missing file {record.path}")
        if per_subject is not None:
            for sid, records in self.by_subject().items():
                if len(records) != per_subject:
                    raise ValidationError(f"subject {sid} has {len(records)} images, expected {per_subject}")

    def select(self, exclude_sources=()):
        return DatasetManifest(
            root=self.root,
            records=[r for r in self.records if r.source not in exclude_sources],
            header=dict(self.header),
        )

    def load_images(self, resolution=None, channels=3):
        """Load every image as one batch; labels follow ``class_index``."""
        if not self.records:
            raise ValidationError("manifest is empty")
        index = self.class_index()
        images = torch.stack([load_png(self.abspath(r), resolution=resolution, channels=channels) for r in self.records])
        labels = torch.tensor([index[r.subject_id] for r in self.records], dtype=torch.long)
        logger.debug(f"Loaded {len(self.records)} images from {self.root}")
        return images, labels

    def write(self, path=None):
        path = path or os.path.join(self.root, MANIFEST_NAME)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"header": {"tool_version": __version__, **self.header}}, sort_keys=True) + "\n")
            for record in self.records:
                f.write(json.dumps(asdict(record), sort_keys=True) + "\n")
        logger.info(f"Manifest with {len(self.records)} records written to {path}")
        return path

    @classmethod
    def read(cls, path):
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        header, records = {}, []
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f):
                if not line.strip():
                    continue
                data = json.loads(line)
                if line_no == 0 and "header" in data:
                    header = data["header"]
                    continue
                records.append(ImageRecord(**data))
        return cls(root=os.path.dirname(os.path.abspath(path)), records=records, header=header)


def subject_dir(subject_index):
    return f"subject_{subject_index:05d}"


def image_name(image_index):
    return f"img_{image_index:04d}.png"
