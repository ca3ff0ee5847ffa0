import os

import pytest
import torch

from config import PipelineConfig
from diffusion_core import Denoiser, DenoiserConfig, make_noise_schedule
from identity_embedder import ClassifierHead, ConvTrunk, EncoderCheckpoint, EncoderConfig, freeze
from toy_corpus import make_toy_corpus

TINY_ENCODER = EncoderConfig(embedding_dim=8, resolution=8, channels=3, widths=(4, 8))
TINY_DENOISER = DenoiserConfig(resolution=8, channels=3, base_width=4, width_mults=(1, 1), embedding_dim=8,
                               cond_width=8, cond_tokens=2, groups=2)


def make_encoder(num_classes=5, seed=0, dtype=torch.float32, config=TINY_ENCODER):
    torch.manual_seed(seed)
    model = ConvTrunk(config).to(dtype)
    head = ClassifierHead(num_classes, config.embedding_dim).to(dtype)
    return freeze(EncoderCheckpoint(config=config, model=model, head=head))


def make_denoiser(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return Denoiser(TINY_DENOISER).to(dtype).eval()


@pytest.fixture
def encoder():
    return make_encoder()


@pytest.fixture
def denoiser():
    return make_denoiser()


@pytest.fixture
def schedule():
    return make_noise_schedule(50)


@pytest.fixture
def toy_corpus(tmp_path):
    return make_toy_corpus(4, 3, 8, seed=7, out_dir=str(tmp_path / "toy"))


@pytest.fixture
def tiny_pipeline_config(tmp_path):
    return PipelineConfig(
        workdir=str(tmp_path / "run"), resolution=8,
        toy_identities=4, toy_per_identity=4, inquiry_pool=6, inquiry_count=3,
        eval_identities=4, eval_per_identity=3, eval_pairs=20,
        embedding_dim=8, encoder_widths=(4, 8), encoder_epochs=1, encoder_batch_size=8,
        diffusion_T=10, diffusion_epochs=1, diffusion_batch_size=8, denoiser_width=4, denoiser_mults=(1, 1),
        cond_width=8, cond_tokens=2, inquiry_threshold=1.0,
        per_subject=2, oversample=1, ddim_steps=2,
        fr_epochs=2, fr_decay_epochs=(1,), fr_batch_size=8,
        baseline_avg=94.26,
    )


def image_files(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, files in os.walk(root) for f in files
                  if f.endswith(".png"))
