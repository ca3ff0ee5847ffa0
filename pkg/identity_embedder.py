"""Identity encoder E_id: unit-hypersphere embeddings, CosFace head and identity centers."""
import logging
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from app import seed_everything
from checkpoints import load_checkpoint, save_checkpoint
from errors import DegenerateCenterError, DimensionError, NumericError, SubjectMappingError, ValidationError
from imaging import check_image, resize

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-4


@dataclass(frozen=True)
class EncoderConfig:
    embedding_dim: int = 128
    resolution: int = 32
    channels: int = 3
    widths: tuple = (32, 64, 64, 128)

    @property
    def arch(self):
        return f"convtrunk-{len(self.widths)}"

    def validate(self):
        if self.embedding_dim < 1:
            raise ValidationError(f"embedding_dim must be positive, got {self.embedding_dim}")
        if not self.widths:
            raise ValidationError("encoder needs at least one block")
        if self.resolution % (2 ** (len(self.widths) - 1)):
            raise ValidationError(
                f"resolution {self.resolution} is not divisible by the trunk stride {2 ** (len(self.widths) - 1)}")
        return self


@dataclass(frozen=True)
class EncoderTrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    margin: float = 0.4
    scale: float = 64.0
    seed: int = 0


class ConvTrunk(nn.Module):
    """Small convolutional trunk with a linear projection to the embedding."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        blocks = []
        in_ch = config.channels
        for i, width in enumerate(config.widths):
            blocks += [
                nn.Conv2d(in_ch, width, 3, stride=1 if i == 0 else 2, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.PReLU(width),
                nn.Conv2d(width, width, 3, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.PReLU(width),
            ]
            in_ch = width
        self.body = nn.Sequential(*blocks)
        side = config.resolution // (2 ** (len(config.widths) - 1))
        self.project = nn.Linear(in_ch * side * side, config.embedding_dim)

    def forward(self, x):
        return self.project(self.body(x).flatten(1))


class ClassifierHead(nn.Module):
    """Class weight rows on the hypersphere, with CosFace margin and scale.

    ``class_ids[k]`` is the subject id trained as class ``k``; without it,
    subject ids are taken as class indices directly.
    """

    def __init__(self, num_classes, embedding_dim, margin=0.4, scale=64.0, class_ids=None):
        super().__init__()
        if not 0.0 <= margin < 1.0:
            raise ValidationError(f"margin must lie in [0, 1), got {margin}")
        if scale <= 0:
            raise ValidationError(f"scale must be positive, got {scale}")
        if class_ids is not None and len(class_ids) != num_classes:
            raise ValidationError(f"{len(class_ids)} class ids given for {num_classes} classes")
        self.margin = float(margin)
        self.scale = float(scale)
        self.class_ids = None if class_ids is None else tuple(int(s) for s in class_ids)
        self.weight = nn.Parameter(torch.randn(num_classes, embedding_dim) * 0.01)

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def class_of(self, subject_id):
        """Class index trained for ``subject_id``."""
        if self.class_ids is None:
            if 0 <= subject_id < self.num_classes:
                return int(subject_id)
        else:
            index = {sid: k for k, sid in enumerate(self.class_ids)}
            if subject_id in index:
                return index[subject_id]
        raise SubjectMappingError(f"subject {subject_id} has no class in a head of {self.num_classes} classes")

    def cosine(self, embedding):
        return F.linear(F.normalize(embedding, dim=-1), F.normalize(self.weight, dim=-1))


@dataclass
class EncoderCheckpoint:
    config: EncoderConfig
    model: ConvTrunk
    head: ClassifierHead | None = None
    metrics: dict = field(default_factory=dict)

    def header(self, **extra):
        fields = {
            "kind": "encoder",
            "embedding_dim": self.config.embedding_dim,
            "resolution": self.config.resolution,
            "channels": self.config.channels,
            "widths": list(self.config.widths),
            "arch": self.config.arch,
            "metrics": self.metrics,
        }
        if self.head is not None:
            fields.update(num_classes=self.head.num_classes, margin=self.head.margin, scale=self.head.scale,
                          class_ids=None if self.head.class_ids is None else list(self.head.class_ids))
        fields.update(extra)
        return fields

    def save(self, path, **extra):
        state = {"model": self.model.state_dict(), "head": None if self.head is None else self.head.state_dict()}
        return save_checkpoint(path, state, self.header(**extra))

    @classmethod
    def load(cls, path):
        state, header = load_checkpoint(path)
        if header.get("kind") != "encoder":
            raise ValidationError(f"{path} is not an encoder checkpoint")
        config = EncoderConfig(embedding_dim=header["embedding_dim"], resolution=header["resolution"],
                               channels=header["channels"], widths=tuple(header["widths"]))
        model = ConvTrunk(config)
        model.load_state_dict(state["model"])
        model.eval()
        head = None
        if state.get("head") is not None:
            head = ClassifierHead(header["num_classes"], config.embedding_dim, header["margin"], header["scale"],
                                  class_ids=header.get("class_ids"))
            head.load_state_dict(state["head"])
        return cls(config=config, model=model, head=head, metrics=header.get("metrics", {}))


def freeze(encoder):
    encoder.model.eval()
    encoder.model.requires_grad_(False)
    return encoder


def _param_dtype(module):
    return next(module.parameters()).dtype


def embed(image, encoder, batch_size=256):
    """Unit-norm embeddings of one (C, H, W) image or an (N, C, H, W) batch."""
    cfg = encoder.config
    x = check_image(image, resolution=cfg.resolution, channels=cfg.channels)
    if x.min() < -1.0 - 1e-6 or x.max() > 1.0 + 1e-6:
        raise ValidationError("pixel values must lie in [-1, 1]")
    was_training = encoder.model.training
    encoder.model.eval()
    dtype = _param_dtype(encoder.model)
    with torch.no_grad():
        feats = torch.cat([encoder.model(chunk.to(dtype)) for chunk in x.split(batch_size)])
    encoder.model.train(was_training)
    out = F.normalize(feats, dim=-1)
    return out[0] if image.dim() == 3 else out


def embed_differentiable(x, encoder):
    """Embeddings that keep the graph back to ``x``; resizes to the encoder resolution."""
    x = resize(x, encoder.config.resolution)
    return F.normalize(encoder.model(x), dim=-1)


def _check_unit(v, name):
    norms = v.norm(dim=-1)
    if not torch.all((norms - 1.0).abs() <= UNIT_TOLERANCE):
        raise ValidationError(f"{name} is not unit-norm (norm {norms.min().item():.6f}..{norms.max().item():.6f})")


def cosine_similarity(a, b):
    """Dot product of unit vectors (broadcast over leading dims), clamped to [-1, 1]."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"embedding sizes differ: {a.shape[-1]} vs {b.shape[-1]}")
    _check_unit(a, "a")
    _check_unit(b, "b")
    sims = (a * b).sum(dim=-1).clamp(-1.0, 1.0)
    # identical vectors are exactly self-similar
    return torch.where((a == b).all(dim=-1), torch.ones_like(sims), sims)


def cosface_logits(embedding, head, labels):
    cosine = head.cosine(embedding)
    one_hot = F.one_hot(labels, num_classes=head.num_classes).to(cosine.dtype)
    return head.scale * (cosine - head.margin * one_hot)


def cosface_loss(embedding, head, label):
    """Cross-entropy over ``scale * (cos_j - margin * [j == label])``."""
    single = embedding.dim() == 1
    labels = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    if labels.numel() and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise IndexError(f"label out of range for {head.num_classes} classes")
    embedding = embedding.unsqueeze(0) if single else embedding
    return F.cross_entropy(cosface_logits(embedding, head, labels), labels)


def identity_centers(head):
    """Normalised weight rows, one center per class in class order."""
    weight = head.weight.detach()
    norms = weight.norm(dim=-1)
    degenerate = torch.nonzero(norms <= 1e-12).flatten().tolist()
    if degenerate:
        raise DegenerateCenterError(f"zero-norm weight rows for classes {degenerate}")
    return weight / norms.unsqueeze(-1)


def classification_accuracy(model, head, images, labels, batch_size=256):
    model.eval()
    correct = 0
    with torch.no_grad():
        for x, y in zip(images.split(batch_size), labels.split(batch_size)):
            emb = F.normalize(model(x), dim=-1)
            correct += (head.cosine(emb).argmax(dim=-1) == y).sum().item()
    return correct / len(labels)


def fit_cosface(images, labels, num_classes, encoder_config, train_config, lr_at=None, augment=None, class_ids=None):
    """SGD-with-momentum CosFace training; returns (model, head, per-epoch history)."""
    seed_everything(train_config.seed)
    model = ConvTrunk(encoder_config)
    head = ClassifierHead(num_classes, encoder_config.embedding_dim, train_config.margin, train_config.scale,
                          class_ids=class_ids)
    lr_at = lr_at or (lambda epoch: train_config.learning_rate)
    optimizer = torch.optim.SGD(
        list(model.parameters()) + list(head.parameters()),
        lr=lr_at(1),
        momentum=train_config.momentum,
        weight_decay=train_config.weight_decay,
    )
    generator = torch.Generator().manual_seed(train_config.seed)
    n = len(labels)
    history = []
    for epoch in range(1, train_config.epochs + 1):
        lr = lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        total_loss, correct = 0.0, 0
        for idx in torch.randperm(n, generator=generator).split(train_config.batch_size):
            x, y = images[idx], labels[idx]
            if augment is not None:
                x = augment(x, generator)
            emb = F.normalize(model(x), dim=-1)
            loss = cosface_loss(emb, head, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(y)
            correct += (head.cosine(emb.detach()).argmax(dim=-1) == y).sum().item()
        if not torch.isfinite(head.weight).all():
            raise NumericError(f"classifier weights became non-finite at epoch {epoch}")
        row = {"epoch": epoch, "loss": total_loss / n, "lr": lr, "train_acc": correct / n}
        history.append(row)
        logger.info(f"epoch {epoch}: loss={row['loss']:.4f} acc={row['train_acc']:.4f} lr={lr:g}")
    model.eval()
    return model, head, history


def step_decay(base_lr, decay_epochs, factor=0.1):
    """Learning rate for 1-based epoch: multiplied by ``factor`` at each decay epoch."""
    return lambda epoch: base_lr * factor ** sum(1 for d in decay_epochs if epoch >= d)


def check_training_corpus(corpus, min_images=2):
    groups = corpus.by_subject()
    if not groups:
        raise ValidationError("training corpus is empty")
    if len(groups) < 2:
        raise ValidationError(f"training needs at least 2 identities, got {len(groups)}")
    small = [sid for sid, records in groups.items() if len(records) < min_images]
    if small:
        raise ValidationError(f"identities {small[:5]} have fewer than {min_images} images")


def train_encoder(corpus, config=None, encoder_config=None):
    """Train the identity encoder with CosFace on a manifest; returns the checkpoint."""
    config = config or EncoderTrainConfig()
    encoder_config = (encoder_config or EncoderConfig()).validate()
    check_training_corpus(corpus)
    images, labels = corpus.load_images(resolution=encoder_config.resolution, channels=encoder_config.channels)
    num_classes = len(corpus.class_index())
    logger.info(f"Training encoder on {len(labels)} images / {num_classes} identities")
    model, head, history = fit_cosface(
        images, labels, num_classes, encoder_config, config,
        lr_at=step_decay(config.learning_rate, config.decay_epochs, config.decay_factor),
        class_ids=list(corpus.class_index()),
    )
    accuracy = classification_accuracy(model, head, images, labels)
    logger.info(f"Encoder training accuracy: {accuracy:.4f}")
    metrics = {"train_accuracy": accuracy, "loss_history": [row["loss"] for row in history],
               "train_config": asdict(config)}
    return EncoderCheckpoint(config=encoder_config, model=model, head=head, metrics=metrics)
