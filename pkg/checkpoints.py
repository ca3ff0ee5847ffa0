"""Checkpoint files: one torch blob plus a sidecar ``key=value`` text header."""
import json
import logging
import os

import torch

from app import __version__
from errors import ValidationError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def header_path(path):
    return f"{path}.header"


def save_checkpoint(path, state, header):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(state, path)
    fields = {"format_version": FORMAT_VERSION, "tool_version": __version__, **header}
    with open(header_path(path), "w", encoding="utf-8") as f:
        for key in sorted(fields):
            f.write(f"{key}={json.dumps(fields[key], sort_keys=True)}\n")
    logger.info(f"Checkpoint written to {path}")
    return path


def read_header(path):
    fields = {}
    with open(header_path(path), "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key] = json.loads(value)
    if fields.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format {fields.get('format_version')!r} in {path}")
    return fields


def load_checkpoint(path):
    header = read_header(path)
    state = torch.load(path, map_location="cpu", weights_only=True)
    return state, header
