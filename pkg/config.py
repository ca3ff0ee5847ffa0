"""Pipeline configuration: a flat key-value file plus ``--set key=value`` overrides."""
import hashlib
import json
import logging
import types
import typing
from dataclasses import asdict, dataclass, fields, replace

from errors import ValidationError

logger = logging.getLogger(__name__)

# keys that locate a run rather than define it
_LOCATION_KEYS = ("workdir",)


@dataclass(frozen=True)
class PipelineConfig:
    workdir: str = "runs/toy"
    seed: int = 0
    resolution: int = 32
    channels: int = 3

    # toy data
    toy_identities: int = 100
    toy_per_identity: int = 30
    inquiry_pool: int = 60
    inquiry_count: int = 20
    eval_identities: int = 40
    eval_per_identity: int = 6
    eval_pairs: int = 600

    # identity encoder
    embedding_dim: int = 128
    encoder_widths: tuple[int, ...] = (32, 64, 64, 128)
    encoder_epochs: int = 20
    encoder_lr: float = 0.1
    encoder_batch_size: int = 128
    cosface_margin: float = 0.4
    cosface_scale: float = 64.0

    # diffusion
    diffusion_T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    diffusion_lambda: float = 0.05
    m_low: float = -1.0
    m_high: float = 1.0
    m_interval: float = 0.02
    diffusion_epochs: int = 30
    diffusion_batch_size: int = 64
    diffusion_lr: float = 1e-4
    denoiser_width: int = 32
    denoiser_mults: tuple[int, ...] = (1, 2)
    cond_width: int = 64
    cond_tokens: int = 4
    simmat_form: str = "squared"
    similarity_metric: str = "cosine"
    clamp_x0: bool = True

    # generation
    inquiry_threshold: float = 0.3
    generation_m: float = 0.0
    generation_m_mix: tuple[float, ...] = ()
    per_subject: int = 10
    oversample: int = 2
    ddim_steps: int = 20
    ddim_eta: float = 0.0

    # recognition training
    fr_epochs: int = 40
    fr_lr: float = 0.1
    fr_margin: float = 0.4
    fr_scale: float = 64.0
    fr_weight_decay: float = 5e-4
    fr_decay_epochs: tuple[int, ...] = (26, 34)
    fr_batch_size: int = 128

    # evaluation and sweeps
    baseline_avg: float | None = None
    sweep_m: tuple[float, ...] = ()
    sweep_lambda: tuple[float, ...] = ()

    def values(self):
        return {k: v for k, v in asdict(self).items() if k not in _LOCATION_KEYS}

    @property
    def digest(self):
        return digest_of(self.values())

    def digest_for(self, keys, *upstream):
        """Digest of a subset of keys chained with upstream digests."""
        values = self.values()
        return digest_of({"keys": {k: values[k] for k in sorted(keys)}, "upstream": list(upstream)})

    def with_overrides(self, overrides):
        return replace(self, **parse_overrides(overrides))

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"


def digest_of(obj):
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _format(value):
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _field_types():
    return typing.get_type_hints(PipelineConfig)


def _coerce(key, annotation, text):
    text = text.strip()
    origin = typing.get_origin(annotation)
    try:
        if origin in (typing.Union, types.UnionType):
            if text == "" or text.lower() == "none":
                return None
            inner = [a for a in typing.get_args(annotation) if a is not type(None)][0]
            return _coerce(key, inner, text)
        if origin is tuple:
            inner = typing.get_args(annotation)[0]
            return tuple(inner(part) for part in text.replace(" ", ",").split(",") if part)
        if annotation is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        return annotation(text)
    except ValueError as e:
        raise ValidationError(f"invalid value {text!r} for config key '{key}'") from e


def parse_overrides(items):
    """Parse ``key=value`` strings into typed values; unknown keys are rejected."""
    known = _field_types()
    parsed = {}
    for item in items:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            raise ValidationError(f"override {item!r} is not of the form key=value")
        if key not in known:
            raise ValidationError(f"unknown config key '{key}'")
        parsed[key] = _coerce(key, known[key], value)
    return parsed


def load_config(path=None, overrides=()):
    items = []
    if path:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if line:
                    items.append(line)
    config = PipelineConfig(**parse_overrides(list(items) + list(overrides)))
    logger.info(f"Configuration loaded (digest {config.digest[:12]})")
    return config
