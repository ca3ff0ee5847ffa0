"""Recognition-model training on a manifest: CosFace, step-decayed SGD and augmentation."""
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import pandas as pd
import torch
import torchvision.transforms.functional as TF

from errors import ValidationError
from identity_embedder import EncoderCheckpoint, EncoderConfig, EncoderTrainConfig, classification_accuracy, fit_cosface, step_decay

logger = logging.getLogger(__name__)

CROP_ATTEMPTS = 10


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple = (0.9, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    hue: float = 0.1
    erase_prob: float = 0.5
    erase_scale: tuple = (0.02, 0.1)
    erase_ratio: tuple = (0.3, 3.3)

    @classmethod
    def identity(cls):
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_prob=0.0, brightness=0.0, contrast=0.0,
                   saturation=0.0, hue=0.0, erase_prob=0.0)

    def validate(self):
        for name in ("flip_prob", "erase_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.hue <= 0.5:
            raise ValidationError("hue jitter must lie in [0, 0.5]")
        return self


@dataclass(frozen=True)
class FRTrainConfig:
    margin: float = 0.4
    scale: float = 64.0
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 40
    decay_epochs: tuple = (26, 34)
    decay_factor: float = 0.1
    batch_size: int = 128
    seed: int = 0
    embedding_dim: int = 128
    resolution: int = 32
    channels: int = 3
    widths: tuple = (32, 64, 64, 128)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        decays = list(self.decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ValidationError(f"decay epochs must be strictly increasing, got {decays}")
        if decays and decays[-1] >= self.epochs:
            raise ValidationError(f"decay epochs must be below the epoch count {self.epochs}")
        self.augment.validate()
        return self

    def encoder_config(self):
        return EncoderConfig(embedding_dim=self.embedding_dim, resolution=self.resolution,
                             channels=self.channels, widths=tuple(self.widths))


def learning_rate_at(epoch, config):
    """Learning rate of 1-based ``epoch`` under the step-decay rule."""
    return step_decay(config.learning_rate, config.decay_epochs, config.decay_factor)(epoch)


def _uniform(low, high, generator):
    return low + (high - low) * torch.rand(1, generator=generator, dtype=torch.float64).item()


def _randint(low, high, generator):
    return int(torch.randint(low, high, (1,), generator=generator).item())


def crop_params(height, width, scale, ratio, generator):
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(CROP_ATTEMPTS):
        target = area * _uniform(scale[0], scale[1], generator)
        aspect = math.exp(_uniform(log_ratio[0], log_ratio[1], generator))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            return _randint(0, height - h + 1, generator), _randint(0, width - w + 1, generator), h, w
    in_ratio = width / height
    if in_ratio < min(ratio):
        w, h = width, int(round(width / min(ratio)))
    elif in_ratio > max(ratio):
        h, w = height, int(round(height * max(ratio)))
    else:
        h, w = height, width
    return (height - h) // 2, (width - w) // 2, h, w


def erase_params(height, width, scale, ratio, generator):
    """Rectangle whose area fraction lies in ``scale``; None when no attempt fits."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(CROP_ATTEMPTS):
        target = area * _uniform(scale[0], scale[1], generator)
        aspect = math.exp(_uniform(log_ratio[0], log_ratio[1], generator))
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h < height and 0 < w < width and scale[0] * area <= h * w <= scale[1] * area:
            return _randint(0, height - h + 1, generator), _randint(0, width - w + 1, generator), h, w
    return None


def _augment_one(image, config, generator):
    _, height, width = image.shape
    x = (image + 1.0) / 2.0

    top, left, h, w = crop_params(height, width, config.crop_scale, config.crop_ratio, generator)
    if (top, left, h, w) != (0, 0, height, width):
        x = TF.resized_crop(x, top, left, h, w, [height, width], antialias=True)
    if torch.rand(1, generator=generator).item() < config.flip_prob:
        x = TF.hflip(x)
    if config.brightness > 0:
        x = TF.adjust_brightness(x, _uniform(1 - config.brightness, 1 + config.brightness, generator))
    if config.contrast > 0:
        x = TF.adjust_contrast(x, _uniform(1 - config.contrast, 1 + config.contrast, generator))
    if config.saturation > 0:
        x = TF.adjust_saturation(x, _uniform(1 - config.saturation, 1 + config.saturation, generator))
    if config.hue > 0:
        x = TF.adjust_hue(x, _uniform(-config.hue, config.hue, generator))

    x = x * 2.0 - 1.0
    if torch.rand(1, generator=generator).item() < config.erase_prob:
        rect = erase_params(height, width, config.erase_scale, config.erase_ratio, generator)
        if rect is not None:
            i, j, h, w = rect
            fill = torch.rand((x.shape[0], h, w), generator=generator, dtype=x.dtype) * 2.0 - 1.0
            x = TF.erase(x, i, j, h, w, fill)
    return x.clamp(-1.0, 1.0)


def augment(image, config, generator):
    """Crop, flip, colour jitter and random erasing of one image or a batch."""
    if image.dim() == 3:
        return _augment_one(image, config, generator)
    return torch.stack([_augment_one(x, config, generator) for x in image])


def train_fr(manifest, config=None, log_path=None):
    """Train a recognition model; returns (checkpoint with head, head, per-epoch history)."""
    config = (config or FRTrainConfig()).validate()
    if len(manifest.subject_ids()) < 2:
        raise ValidationError(f"recognition training needs at least 2 subjects, got {len(manifest.subject_ids())}")
    encoder_config = config.encoder_config().validate()
    images, labels = manifest.load_images(resolution=config.resolution, channels=config.channels)
    num_classes = len(manifest.class_index())
    logger.info(f"Training recognition model on {len(labels)} images / {num_classes} subjects")

    train_config = EncoderTrainConfig(
        epochs=config.epochs, batch_size=config.batch_size, learning_rate=config.learning_rate,
        momentum=config.momentum, weight_decay=config.weight_decay, decay_epochs=tuple(config.decay_epochs),
        decay_factor=config.decay_factor, margin=config.margin, scale=config.scale, seed=config.seed,
    )
    model, head, history = fit_cosface(
        images, labels, num_classes, encoder_config, train_config,
        lr_at=lambda epoch: learning_rate_at(epoch, config),
        augment=lambda x, g: augment(x, config.augment, g),
        class_ids=list(manifest.class_index()),
    )
    frame = pd.DataFrame(history, columns=["epoch", "loss", "lr", "train_acc"])
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        frame.to_csv(log_path, index=False)
    metrics = {
        "train_accuracy": classification_accuracy(model, head, images, labels),
        "final_loss": history[-1]["loss"] if history else None,
        "train_config": asdict(config),
    }
    checkpoint = EncoderCheckpoint(config=encoder_config, model=model, head=head, metrics=metrics)
    return checkpoint, head, frame
