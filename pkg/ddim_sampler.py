"""DDIM sampling under fixed identity and similarity conditions."""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from diffusion_core import check_m, estimate_x0, identity_embeddings
from errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 20
    eta: float = 0.0
    seed: int = 0
    batch_size: int = 64

    def validate(self, T):
        if self.num_steps < 1:
            raise ValidationError(f"num_steps must be at least 1, got {self.num_steps}")
        if self.num_steps > T:
            raise ValidationError(f"num_steps {self.num_steps} exceeds the schedule horizon T={T}")
        if self.eta < 0:
            raise ValidationError(f"eta must be non-negative, got {self.eta}")
        return self


def ddim_timesteps(T, num_steps):
    """Strictly decreasing subsequence from T down to 1 with uniform stride, then 0."""
    if num_steps == 1:
        steps = [T]
    else:
        steps = np.linspace(1, T, num_steps).round().astype(int)[::-1].tolist()
    return steps + [0]


def ddim_coefficients(alpha_bar_t, alpha_bar_prev, eta):
    """(sigma, eps coefficient) of x_prev = sqrt(ab_prev) x0_hat + c_eps eps_hat + sigma z."""
    sigma = eta * math.sqrt((1 - alpha_bar_prev) / (1 - alpha_bar_t)) * math.sqrt(1 - alpha_bar_t / alpha_bar_prev)
    c_eps = math.sqrt(max(1 - alpha_bar_prev - sigma ** 2, 0.0))
    return sigma, c_eps


def _noise(generators, shape, dtype):
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in generators])


@torch.no_grad()
def sample_batch(model, schedule, c_id, m, seeds, num_steps=20, eta=0.0):
    """Sample one image per seed; each image's noise stream is seeded on its own."""
    cfg = model.config
    dtype = next(model.parameters()).dtype
    SamplerConfig(num_steps=num_steps, eta=eta).validate(schedule.T)
    generators = [torch.Generator().manual_seed(int(s)) for s in seeds]
    shape = (cfg.channels, cfg.resolution, cfg.resolution)
    x = _noise(generators, shape, dtype)
    c_att = model.condition(c_id.to(dtype), torch.as_tensor(m, dtype=dtype))
    ab = schedule.alpha_bars
    steps = ddim_timesteps(schedule.T, num_steps)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        eps_hat = model(x, t, c_att)
        x0_hat = estimate_x0(x, eps_hat, t, schedule)
        sigma, c_eps = ddim_coefficients(ab[t].item(), ab[t_prev].item(), eta)
        x = math.sqrt(ab[t_prev].item()) * x0_hat + c_eps * eps_hat
        if sigma > 0:
            x = x + sigma * _noise(generators, shape, dtype)
    return x.clamp(-1.0, 1.0)


def ddim_sample(model, schedule, c_id, m, config):
    """One image for identity embedding ``c_id`` at similarity ``m``."""
    check_m(m)
    config.validate(schedule.T)
    model.eval()
    c_id = c_id.reshape(1, -1)
    return sample_batch(model, schedule, c_id, [float(m)], [config.seed], config.num_steps, config.eta)[0]


def sample_images(model, schedule, c_id, m_values, seeds, config):
    """Images for one identity with per-image m and seed, batched by ``config.batch_size``."""
    check_m(m_values)
    config.validate(schedule.T)
    model.eval()
    out = []
    for start in range(0, len(seeds), config.batch_size):
        chunk = seeds[start:start + config.batch_size]
        ids = c_id.reshape(1, -1).expand(len(chunk), -1)
        out.extend(sample_batch(model, schedule, ids, m_values[start:start + len(chunk)], chunk,
                                config.num_steps, config.eta).unbind(0))
    return out


@dataclass
class ConditionedSampler:
    """A trained denoiser bound to its schedule, the identity encoder and sampler settings."""

    model: object
    schedule: object
    encoder: object
    config: SamplerConfig = SamplerConfig()

    def describe(self):
        return {"T": self.schedule.T, "num_steps": self.config.num_steps, "eta": self.config.eta,
                "denoiser": repr(self.model.config), "encoder": repr(self.encoder.config)}

    def generate(self, inquiry, m_values, seeds):
        c_id = identity_embeddings(inquiry, self.encoder)
        return sample_images(self.model, self.schedule, c_id, list(m_values), list(seeds), self.config)


def generate_group(model, schedule, inquiry, encoder, m, n, base_seed, config=None):
    """``n`` samples sharing the inquiry identity and ``m``, seeds base_seed..base_seed+n-1."""
    if n < 1:
        raise ValidationError(f"group size must be at least 1, got {n}")
    config = config or SamplerConfig()
    c_id = identity_embeddings(inquiry, encoder)
    seeds = list(range(base_seed, base_seed + n))
    logger.debug(f"Generating {n} samples at m={m} from seed {base_seed}")
    return sample_images(model, schedule, c_id, [float(m)] * n, seeds, config)
