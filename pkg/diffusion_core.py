"""Similarity-conditioned DDPM: schedule, forward process, denoiser and losses.

Timesteps index the schedule arrays directly: entry 0 is the clean image
(beta 0, alpha_bar 1) and entries 1..T are the diffusion steps.
"""
import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from app import seed_everything
from checkpoints import load_checkpoint, save_checkpoint
from errors import DimensionError, NumericError, ValidationError
from identity_embedder import embed, embed_differentiable, freeze
from imaging import check_image, resize

logger = logging.getLogger(__name__)

SIMMAT_FORMS = ("squared", "abs")
SIMILARITY_METRICS = ("cosine", "euclidean")


# --------------------------------------------------------------------------
# noise schedule and forward process


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    beta_start: float | None = None
    beta_end: float | None = None

    @classmethod
    def from_betas(cls, betas, beta_start=None, beta_end=None):
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise ValidationError("schedule needs at least one step")
        if not torch.all((betas > 0) & (betas < 1)):
            raise ValidationError("every beta must lie in (0, 1)")
        full = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
        alphas = 1.0 - full
        return cls(T=betas.numel(), betas=full, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0),
                   beta_start=beta_start, beta_end=beta_end)

    def check_t(self, t, low=1):
        t = torch.as_tensor(t)
        if t.numel() and (t.min() < low or t.max() > self.T):
            raise IndexError(f"timestep out of range [{low}, {self.T}]")
        return t.long()


def make_noise_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linearly spaced betas with cumulative-product alpha_bars."""
    if T < 1:
        raise ValidationError(f"T must be at least 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return NoiseSchedule.from_betas(betas, beta_start=beta_start, beta_end=beta_end)


def _coef(values, t, like):
    c = values[t].to(like.dtype)
    if c.dim() == 0:
        return c
    return c.reshape(-1, *([1] * (like.dim() - 1)))


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def forward_diffuse(x0, t, eps, schedule):
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps; ``t`` is an int or per-item tensor."""
    _check_same_shape(x0, eps, "forward_diffuse")
    t = schedule.check_t(t)
    ab = schedule.alpha_bars
    return _coef(ab.sqrt(), t, x0) * x0 + _coef((1.0 - ab).sqrt(), t, x0) * eps


def estimate_x0(x_t, eps_hat, t, schedule):
    """Closed-form clean-image estimate from a noisy image and predicted noise."""
    _check_same_shape(x_t, eps_hat, "estimate_x0")
    t = schedule.check_t(t)
    ab = schedule.alpha_bars
    if torch.any(ab[t] <= 0):
        raise NumericError("alpha_bar must be positive")
    return (x_t - _coef((1.0 - ab).sqrt(), t, x_t) * eps_hat) / _coef(ab.sqrt(), t, x_t)


# --------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 32
    channels: int = 3
    base_width: int = 32
    width_mults: tuple = (1, 2)
    embedding_dim: int = 128
    cond_width: int = 64
    cond_tokens: int = 4
    groups: int = 8

    def validate(self):
        if self.cond_width % self.cond_tokens:
            raise ValidationError(f"cond_width {self.cond_width} must split into {self.cond_tokens} tokens")
        if self.resolution % (2 ** (len(self.width_mults) - 1)):
            raise ValidationError(f"resolution {self.resolution} is not divisible by the UNet stride")
        return self


@dataclass
class ConditioningBundle:
    c_id: torch.Tensor
    m: torch.Tensor
    c_att: torch.Tensor
    t: torch.Tensor | None = None


def _norm(channels, groups):
    return nn.GroupNorm(math.gcd(groups, channels), channels)


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class AdaGNResBlock(nn.Module):
    """Residual block; the timestep enters as a GroupNorm scale and shift."""

    def __init__(self, in_ch, out_ch, time_dim, groups):
        super().__init__()
        self.norm1 = _norm(in_ch, groups)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = _norm(out_ch, groups)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Spatial queries attend over the condition tokens."""

    def __init__(self, channels, token_dim, groups):
        super().__init__()
        self.norm = _norm(channels, groups)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(token_dim, channels)
        self.to_v = nn.Linear(token_dim, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, tokens):
        n, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        attn = F.scaled_dot_product_attention(q, self.to_k(tokens), self.to_v(tokens))
        return x + self.out(attn).transpose(1, 2).reshape(n, c, h, w)


class Denoiser(nn.Module):
    """UNet noise predictor sigma_theta with the condition projections F1 and F2."""

    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        widths = [config.base_width * k for k in config.width_mults]
        time_dim = 4 * config.base_width
        token_dim = config.cond_width // config.cond_tokens
        g = config.groups

        self.time_mlp = nn.Sequential(nn.Linear(config.base_width, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.f1 = nn.Linear(1, config.cond_width)
        self.f2 = nn.Linear(config.embedding_dim + config.cond_width, config.cond_width)

        self.inp = nn.Conv2d(config.channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down.append(nn.ModuleDict({
                "res": AdaGNResBlock(prev, w, time_dim, g),
                "attn": CrossAttention(w, token_dim, g),
                "down": nn.Conv2d(w, w, 3, stride=2, padding=1) if i < len(widths) - 1 else nn.Identity(),
            }))
            prev = w
        self.mid_res = AdaGNResBlock(prev, prev, time_dim, g)
        self.mid_attn = CrossAttention(prev, token_dim, g)
        self.up = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.up.append(nn.ModuleDict({
                "res": AdaGNResBlock(prev + w, w, time_dim, g),
                "attn": CrossAttention(w, token_dim, g),
                "up": nn.Conv2d(w, w, 3, padding=1) if i > 0 else nn.Identity(),
            }))
            prev = w
        self.out_norm = _norm(prev, g)
        self.out = nn.Conv2d(prev, config.channels, 3, padding=1)

    def condition(self, c_id, m):
        """C_att = F2(cat(C_id, F1(m)))."""
        m = torch.as_tensor(m, dtype=c_id.dtype, device=c_id.device)
        c_sim = self.f1(m.reshape(-1, 1))
        if c_id.dim() == 1:
            c_id = c_id.unsqueeze(0)
        c_id = c_id.expand(c_sim.shape[0], -1)
        return self.f2(torch.cat([c_id, c_sim], dim=-1))

    def forward(self, x_t, t, c_att):
        n = x_t.shape[0]
        t = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(n)
        temb = self.time_mlp(timestep_embedding(t, self.config.base_width).to(x_t.dtype))
        tokens = c_att.reshape(n, self.config.cond_tokens, -1)

        h = self.inp(x_t)
        skips = []
        for level in self.down:
            h = level["attn"](level["res"](h, temb), tokens)
            skips.append(h)
            h = level["down"](h)
        h = self.mid_attn(self.mid_res(h, temb), tokens)
        for level in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            h = level["attn"](level["res"](h, temb), tokens)
            if not isinstance(level["up"], nn.Identity):
                h = level["up"](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))


def check_m(m):
    m = torch.as_tensor(m)
    if not torch.all((m >= -1.0) & (m <= 1.0)):
        raise ValidationError(f"similarity factor m must lie in [-1, 1], got {m.tolist()}")


def build_conditions(embedding, m, model, t=None):
    check_m(m)
    m = torch.as_tensor(m, dtype=embedding.dtype)
    return ConditioningBundle(c_id=embedding, m=m, c_att=model.condition(embedding, m), t=t)


def denoise(x_t, bundle, model):
    """Predicted noise for ``x_t`` under the bundle's conditions and timestep."""
    cfg = model.config
    batch = check_image(x_t, resolution=cfg.resolution, channels=cfg.channels)
    if bundle.t is None:
        raise ValidationError("conditioning bundle carries no timestep")
    if bundle.c_att.shape[-1] != cfg.cond_width:
        raise DimensionError(f"c_att width {bundle.c_att.shape[-1]} != {cfg.cond_width}")
    c_att = bundle.c_att.reshape(-1, cfg.cond_width).expand(batch.shape[0], -1)
    eps = model(batch, bundle.t, c_att)
    return eps[0] if x_t.dim() == 3 else eps


# --------------------------------------------------------------------------
# losses


def mse_loss(eps_hat, eps):
    _check_same_shape(eps_hat, eps, "mse_loss")
    return F.mse_loss(eps_hat, eps)


def similarity_matching(s, m, t, T, form="squared"):
    """(1 - t/T) * rec(1 - s) + (t/T) * rec(m - s), rec = square or abs; mean over the batch."""
    if form not in SIMMAT_FORMS:
        raise ValidationError(f"unknown similarity-matching form {form!r}")
    s = torch.as_tensor(s, dtype=torch.float64) if not torch.is_tensor(s) else s
    t = torch.as_tensor(t)
    if t.numel() and (t.min() < 0 or t.max() > T):
        raise IndexError(f"timestep out of range [0, {T}]")
    gamma = t.to(s.dtype) / T
    m = torch.as_tensor(m, dtype=s.dtype)
    rec = (lambda d: d * d) if form == "squared" else torch.abs
    return ((1.0 - gamma) * rec(1.0 - s) + gamma * rec(m - s)).mean()


def _straight_through_clamp(x):
    return x + (x.clamp(-1.0, 1.0) - x).detach()


def simmat_loss(x, x0_hat, m, t, T, encoder, form="squared", metric="cosine", clamp=True):
    """Similarity-matching loss between E(x) and E(x0_hat); differentiable in ``x0_hat``."""
    if metric not in SIMILARITY_METRICS:
        raise ValidationError(f"unknown similarity metric {metric!r}")
    t = torch.as_tensor(t)
    if t.numel() and (t.min() < 0 or t.max() > T):
        raise IndexError(f"timestep out of range [0, {T}]")
    with torch.no_grad():
        e_x = embed_differentiable(x, encoder)
    e_hat = embed_differentiable(_straight_through_clamp(x0_hat) if clamp else x0_hat, encoder)
    if metric == "cosine":
        s = (e_x * e_hat).sum(dim=-1)
    else:
        s = 1.0 - (e_x - e_hat).norm(dim=-1)
    return similarity_matching(s, m, t, T, form)


def total_loss(mse, simmat, lam):
    if lam < 0:
        raise ValidationError(f"lambda must be non-negative, got {lam}")
    for name, value in (("mse", mse), ("simmat", simmat)):
        if not math.isfinite(float(value)):
            raise NumericError(f"{name} loss is not finite")
    return mse + lam * simmat


# --------------------------------------------------------------------------
# training


def m_grid(low, high, interval):
    """Arithmetic grid low, low + interval, ... capped at high."""
    if low > high:
        raise ValidationError(f"inverted m range [{low}, {high}]")
    if interval <= 0:
        raise ValidationError(f"m interval must be positive, got {interval}")
    n = int(math.floor((high - low) / interval + 1e-9)) + 1
    return [min(round(low + k * interval, 10), high) for k in range(n)]


def sample_m(grid, n, generator):
    idx = torch.randint(len(grid), (n,), generator=generator)
    return torch.as_tensor(grid, dtype=torch.float64)[idx]


@dataclass(frozen=True)
class DiffusionTrainConfig:
    lam: float = 0.05
    m_range: tuple = (-1.0, 1.0)
    m_interval: float = 0.02
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0
    simmat_form: str = "squared"
    similarity_metric: str = "cosine"
    clamp_x0: bool = True

    def validate(self):
        low, high = self.m_range
        if not -1.0 <= low <= high <= 1.0:
            raise ValidationError(f"m_range must satisfy -1 <= low <= high <= 1, got {self.m_range}")
        if self.lam < 0:
            raise ValidationError(f"lambda must be non-negative, got {self.lam}")
        if self.simmat_form not in SIMMAT_FORMS:
            raise ValidationError(f"unknown similarity-matching form {self.simmat_form!r}")
        if self.similarity_metric not in SIMILARITY_METRICS:
            raise ValidationError(f"unknown similarity metric {self.similarity_metric!r}")
        m_grid(low, high, self.m_interval)
        return self

    @property
    def grid(self):
        return m_grid(self.m_range[0], self.m_range[1], self.m_interval)


def compute_losses(model, encoder, schedule, x0, c_id, t, eps, m, config):
    """One training evaluation: returns the MSE, similarity-matching and total losses."""
    x_t = forward_diffuse(x0, t, eps, schedule)
    eps_hat = model(x_t, t, model.condition(c_id, m))
    x0_hat = estimate_x0(x_t, eps_hat, t, schedule)
    mse = mse_loss(eps_hat, eps)
    simmat = simmat_loss(x0, x0_hat, m, t, schedule.T, encoder, form=config.simmat_form,
                         metric=config.similarity_metric, clamp=config.clamp_x0)
    return {"mse": mse, "simmat": simmat, "total": total_loss(mse, simmat, config.lam)}


def train_diffusion(corpus, encoder, config, schedule, denoiser_config=None):
    """Train the conditioned denoiser with the encoder frozen; returns (model, history)."""
    config = config.validate()
    if len(corpus) == 0:
        raise ValidationError("diffusion training corpus is empty")
    denoiser_config = denoiser_config or DenoiserConfig(embedding_dim=encoder.config.embedding_dim)
    if denoiser_config.embedding_dim != encoder.config.embedding_dim:
        raise DimensionError("denoiser embedding_dim must match the encoder")
    freeze(encoder)
    images, _ = corpus.load_images(resolution=denoiser_config.resolution, channels=denoiser_config.channels)
    c_ids = identity_embeddings(images, encoder)
    grid = config.grid
    logger.info(f"Training denoiser on {len(images)} images, T={schedule.T}, m-grid of {len(grid)} points, lambda={config.lam}")

    seed_everything(config.seed)
    model = Denoiser(denoiser_config)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    generator = torch.Generator().manual_seed(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums = {"mse": 0.0, "simmat": 0.0, "total": 0.0}
        for idx in torch.randperm(len(images), generator=generator).split(config.batch_size):
            x0 = images[idx]
            n = len(idx)
            t = torch.randint(1, schedule.T + 1, (n,), generator=generator)
            eps = torch.randn(x0.shape, generator=generator)
            m = sample_m(grid, n, generator).to(x0.dtype)
            losses = compute_losses(model, encoder, schedule, x0, c_ids[idx], t, eps, m, config)
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            for key in sums:
                sums[key] += losses[key].item() * n
        row = {"epoch": epoch, **{key: value / len(images) for key, value in sums.items()}}
        history.append(row)
        logger.info(f"epoch {epoch}: mse={row['mse']:.4f} simmat={row['simmat']:.4f} total={row['total']:.4f}")
    model.eval()
    return model, history


def identity_embeddings(images, encoder):
    return embed(resize(images, encoder.config.resolution).clamp(-1.0, 1.0), encoder)


def save_denoiser(model, schedule, train_config, path, **extra):
    header = {
        "kind": "denoiser",
        "denoiser": asdict(model.config),
        "T": schedule.T,
        "beta_start": schedule.beta_start,
        "beta_end": schedule.beta_end,
        "m_range": list(train_config.m_range),
        "m_interval": train_config.m_interval,
        "lambda": train_config.lam,
        **extra,
    }
    return save_checkpoint(path, {"model": model.state_dict()}, header)


def load_denoiser(path):
    state, header = load_checkpoint(path)
    if header.get("kind") != "denoiser":
        raise ValidationError(f"{path} is not a denoiser checkpoint")
    cfg = dict(header["denoiser"])
    cfg["width_mults"] = tuple(cfg["width_mults"])
    model = Denoiser(DenoiserConfig(**cfg))
    model.load_state_dict(state["model"])
    model.eval()
    return model, make_noise_schedule(header["T"], header["beta_start"], header["beta_end"]), header
