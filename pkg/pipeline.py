"""End-to-end toy workflow with digest-keyed stage caching in the run ledger.

Stages, in order: toy_data, encoder, diffusion, inquiries, assemble, fr, eval.
Each stage's digest chains its own config keys with the digests of the stages
it reads from, so a changed key invalidates that stage and everything below it.
"""
import itertools
import logging
import os
import shutil
from dataclasses import replace
from datetime import datetime

import pandas as pd

from app import open_ledger
from dataset_generator import MixSchedule, assemble_dataset, select_inquiries
from ddim_sampler import ConditionedSampler, SamplerConfig, sample_images
from diffusion_core import DenoiserConfig, DiffusionTrainConfig, identity_embeddings, load_denoiser, make_noise_schedule, save_denoiser, train_diffusion
from errors import StageError, ValidationError
from fr_trainer import FRTrainConfig, train_fr
from identity_embedder import EncoderCheckpoint, EncoderConfig, EncoderTrainConfig, train_encoder
from imaging import load_png, make_grid_image
from ingest import ingest_directory
from manifest import MANIFEST_NAME, SOURCE_REAL, DatasetManifest, ImageRecord
from models import StageRun
from toy_corpus import make_toy_corpus
from verification_eval import EvalReport, evaluate_suite, make_toy_pairs, read_pair_list, write_pair_list

logger = logging.getLogger(__name__)

POOL_SEED_OFFSET = 1000
EVAL_SEED_OFFSET = 2000
PAIRS_NAME = "pairs.tsv"
REPORT_NAME = "report.json"

STAGES = ("toy_data", "encoder", "diffusion", "inquiries", "assemble", "fr", "eval")

STAGE_KEYS = {
    "toy_data": ("seed", "resolution", "channels", "toy_identities", "toy_per_identity", "inquiry_pool",
                 "eval_identities", "eval_per_identity", "eval_pairs"),
    "encoder": ("seed", "embedding_dim", "encoder_widths", "encoder_epochs", "encoder_lr", "encoder_batch_size",
                "cosface_margin", "cosface_scale"),
    "diffusion": ("seed", "diffusion_T", "beta_start", "beta_end", "diffusion_lambda", "m_low", "m_high",
                  "m_interval", "diffusion_epochs", "diffusion_batch_size", "diffusion_lr", "denoiser_width",
                  "denoiser_mults", "cond_width", "cond_tokens", "simmat_form", "similarity_metric", "clamp_x0"),
    "inquiries": ("inquiry_threshold", "inquiry_count"),
    "assemble": ("seed", "generation_m", "generation_m_mix", "per_subject", "oversample", "ddim_steps", "ddim_eta"),
    "fr": ("seed", "fr_epochs", "fr_lr", "fr_margin", "fr_scale", "fr_weight_decay", "fr_decay_epochs",
           "fr_batch_size"),
    "eval": ("baseline_avg",),
}

UPSTREAM = {
    "toy_data": (),
    "encoder": ("toy_data",),
    "diffusion": ("toy_data", "encoder"),
    "inquiries": ("toy_data", "encoder"),
    "assemble": ("diffusion", "inquiries"),
    "fr": ("assemble",),
    "eval": ("toy_data", "fr"),
}


def stage_digests(config):
    digests = {}
    for stage in STAGES:
        digests[stage] = config.digest_for(STAGE_KEYS[stage], *(digests[u] for u in UPSTREAM[stage]))
    return digests


def generation_schedule(config):
    if config.generation_m_mix:
        return MixSchedule.from_values(config.generation_m_mix)
    return MixSchedule.from_values([config.generation_m])


class PipelineRunner:
    """Runs the stages of one configuration; ``executed`` and ``skipped`` list (stage, digest)."""

    def __init__(self, config, session_factory=None):
        if config.baseline_avg is None:
            raise ValidationError("baseline_avg is required to report Gap-to-Real")
        self.config = config
        self.workdir = os.path.abspath(config.workdir)
        self.Session = session_factory or open_ledger(self.workdir)
        self.digests = stage_digests(config)
        self.artifacts = {}
        self.executed = []
        self.skipped = []

    def cached_artifact(self, stage, digest):
        with self.Session() as s:
            run = (s.query(StageRun)
                   .filter_by(stage=stage, digest=digest, status="success")
                   .order_by(StageRun.id.desc())
                   .first())
        if run is not None and run.artifact and os.path.exists(run.artifact):
            return run.artifact
        return None

    def stage_dir(self, stage, digest):
        return os.path.join(self.workdir, f"{stage}-{digest[:12]}")

    def run_stage(self, stage, digest, build):
        """Return the stage artifact, building it unless a successful run with ``digest`` exists.

        ``build(out_dir)`` returns (artifact path, records processed).
        """
        artifact = self.cached_artifact(stage, digest)
        if artifact is not None:
            logger.info(f"[{stage}] cache hit ({digest[:12]}), skipping")
            self.skipped.append((stage, digest))
            return artifact

        out_dir = self.stage_dir(stage, digest)
        with self.Session() as s:
            run = StageRun(stage=stage, digest=digest, status="running")
            s.add(run)
            s.commit()
            run_id = run.id
        logger.info(f"[{stage}] running into {out_dir}")
        try:
            artifact, count = build(out_dir)
        except Exception as e:
            with self.Session() as s:
                run = s.get(StageRun, run_id)
                run.status = "error"
                run.error_message = str(e)
                run.finished_at = datetime.utcnow()
                s.commit()
            logger.error(f"[{stage}] failed: {e}")
            raise StageError(stage, str(e)) from e

        with self.Session() as s:
            run = s.get(StageRun, run_id)
            run.status = "success"
            run.artifact = artifact
            run.records_processed = count
            run.finished_at = datetime.utcnow()
            s.commit()
        self.executed.append((stage, digest))
        logger.info(f"[{stage}] done: {count} records -> {artifact}")
        return artifact

    # ------------------------------------------------------------------
    # stage builders

    def build_toy_data(self, out_dir):
        c = self.config
        digest = self.digests["toy_data"]
        parts = {
            "train": make_toy_corpus(c.toy_identities, c.toy_per_identity, c.resolution, c.seed,
                                     os.path.join(out_dir, "train")),
            "pool": make_toy_corpus(c.inquiry_pool, 1, c.resolution, c.seed + POOL_SEED_OFFSET,
                                    os.path.join(out_dir, "pool")),
            "eval": make_toy_corpus(c.eval_identities, c.eval_per_identity, c.resolution,
                                    c.seed + EVAL_SEED_OFFSET, os.path.join(out_dir, "eval")),
        }
        for manifest in parts.values():
            manifest.header["config_digest"] = digest
            manifest.write()
        pairs = make_toy_pairs(parts["eval"], c.eval_pairs, c.seed)
        write_pair_list(pairs, os.path.join(out_dir, "eval", PAIRS_NAME))
        return out_dir, sum(len(m) for m in parts.values())

    def build_encoder(self, out_dir):
        c = self.config
        corpus = DatasetManifest.read(os.path.join(self.artifacts["toy_data"], "train"))
        encoder_config = EncoderConfig(embedding_dim=c.embedding_dim, resolution=c.resolution,
                                       channels=c.channels, widths=tuple(c.encoder_widths))
        train_config = EncoderTrainConfig(epochs=c.encoder_epochs, batch_size=c.encoder_batch_size,
                                          learning_rate=c.encoder_lr, margin=c.cosface_margin,
                                          scale=c.cosface_scale, seed=c.seed)
        checkpoint = train_encoder(corpus, train_config, encoder_config)
        path = checkpoint.save(os.path.join(out_dir, "encoder.pt"), config_digest=self.digests["encoder"])
        return path, len(corpus)

    def build_diffusion(self, out_dir):
        c = self.config
        corpus = DatasetManifest.read(os.path.join(self.artifacts["toy_data"], "train"))
        encoder = EncoderCheckpoint.load(self.artifacts["encoder"])
        train_config = DiffusionTrainConfig(
            lam=c.diffusion_lambda, m_range=(c.m_low, c.m_high), m_interval=c.m_interval,
            epochs=c.diffusion_epochs, batch_size=c.diffusion_batch_size, learning_rate=c.diffusion_lr,
            seed=c.seed, simmat_form=c.simmat_form, similarity_metric=c.similarity_metric, clamp_x0=c.clamp_x0,
        )
        denoiser_config = DenoiserConfig(
            resolution=c.resolution, channels=c.channels, base_width=c.denoiser_width,
            width_mults=tuple(c.denoiser_mults), embedding_dim=c.embedding_dim,
            cond_width=c.cond_width, cond_tokens=c.cond_tokens,
        ).validate()
        schedule = make_noise_schedule(c.diffusion_T, c.beta_start, c.beta_end)
        model, history = train_diffusion(corpus, encoder, train_config, schedule, denoiser_config)
        os.makedirs(out_dir, exist_ok=True)
        pd.DataFrame(history, columns=["epoch", "mse", "simmat", "total"]).to_csv(
            os.path.join(out_dir, "train_log.csv"), index=False)
        path = save_denoiser(model, schedule, train_config, os.path.join(out_dir, "denoiser.pt"),
                             encoder=self.artifacts["encoder"], config_digest=self.digests["diffusion"])
        return path, len(corpus)

    def build_inquiries(self, out_dir):
        c = self.config
        pool = DatasetManifest.read(os.path.join(self.artifacts["toy_data"], "pool"))
        encoder = EncoderCheckpoint.load(self.artifacts["encoder"])
        images, _ = pool.load_images(resolution=c.resolution, channels=c.channels)
        accepted = select_inquiries(images, encoder, c.inquiry_threshold)[:c.inquiry_count]
        if len(accepted) < c.inquiry_count:
            logger.warning(f"Only {len(accepted)} of the requested {c.inquiry_count} inquiries passed the filter")
        os.makedirs(out_dir, exist_ok=True)
        records = []
        for k, i in enumerate(accepted):
            rel = f"inquiry_{k:05d}.png"
            shutil.copyfile(pool.abspath(pool.records[i]), os.path.join(out_dir, rel))
            records.append(ImageRecord(subject_id=k, path=rel, source=SOURCE_REAL))
        manifest = DatasetManifest(root=out_dir, records=records,
                                   header={"kind": "inquiries", "threshold": c.inquiry_threshold,
                                           "pool_size": len(pool), "config_digest": self.digests["inquiries"]})
        manifest.write()
        return out_dir, len(records)

    def build_assemble(self, out_dir):
        c = self.config
        model, schedule, _ = load_denoiser(self.artifacts["diffusion"])
        encoder = EncoderCheckpoint.load(self.artifacts["encoder"])
        inquiries, _ = DatasetManifest.read(self.artifacts["inquiries"]).load_images(
            resolution=c.resolution, channels=c.channels)
        sampler = ConditionedSampler(model, schedule, encoder,
                                     SamplerConfig(num_steps=c.ddim_steps, eta=c.ddim_eta, seed=c.seed))
        manifest = assemble_dataset(list(inquiries), sampler, generation_schedule(c), c.per_subject,
                                    c.oversample, c.seed, out_dir)
        if manifest.header.get("partial"):
            logger.warning(f"Assembled dataset is partial: subjects {manifest.header['failed_subjects']} failed")
        manifest.header["pipeline_digest"] = self.digests["assemble"]
        return manifest.write(), len(manifest)

    def build_fr(self, out_dir):
        c = self.config
        manifest = DatasetManifest.read(self.artifacts["assemble"])
        fr_config = FRTrainConfig(
            margin=c.fr_margin, scale=c.fr_scale, learning_rate=c.fr_lr, weight_decay=c.fr_weight_decay,
            epochs=c.fr_epochs, decay_epochs=tuple(c.fr_decay_epochs), batch_size=c.fr_batch_size, seed=c.seed,
            embedding_dim=c.embedding_dim, resolution=c.resolution, channels=c.channels,
            widths=tuple(c.encoder_widths),
        )
        checkpoint, _, _ = train_fr(manifest, fr_config, log_path=os.path.join(out_dir, "train_log.csv"))
        path = checkpoint.save(os.path.join(out_dir, "fr.pt"), config_digest=self.digests["fr"])
        return path, len(manifest)

    def build_eval(self, out_dir):
        c = self.config
        encoder = EncoderCheckpoint.load(self.artifacts["fr"])
        pairs = read_pair_list(os.path.join(self.artifacts["toy_data"], "eval", PAIRS_NAME), name="toy")
        report = evaluate_suite([pairs], encoder, c.baseline_avg)
        path = report.write_json(os.path.join(out_dir, REPORT_NAME), config_digest=self.digests["eval"])
        return path, len(pairs.pairs)

    def run(self):
        """Run every stage in order and return the EvalReport."""
        logger.info(f"Pipeline run in {self.workdir} (config digest {self.config.digest[:12]})")
        for stage in STAGES:
            build = getattr(self, f"build_{stage}")
            self.artifacts[stage] = self.run_stage(stage, self.digests[stage], build)
        logger.info(f"Pipeline finished: {len(self.executed)} stages run, {len(self.skipped)} skipped")
        return EvalReport.read_json(self.artifacts["eval"])


def run_pipeline(config, session_factory=None):
    return PipelineRunner(config, session_factory).run()


def sweep_variants(config):
    """(label, config) pairs for the lambda x generation-m sweep; a single unlabeled run when no sweep is set."""
    lambdas = [("lambda", v) for v in config.sweep_lambda] or [None]
    ms = [("m", v) for v in config.sweep_m] or [None]
    variants = []
    for lam, m in itertools.product(lambdas, ms):
        overrides, parts = {}, []
        if lam is not None:
            overrides["diffusion_lambda"] = lam[1]
            parts.append(f"lambda={lam[1]:g}")
        if m is not None:
            overrides.update(generation_m=m[1], generation_m_mix=())
            parts.append(f"m={m[1]:g}")
        variants.append((",".join(parts) or "base", replace(config, **overrides)))
    return variants


def run_sweep(config):
    """One EvalReport per sweep value; shared upstream stages run once. Writes sweep.csv."""
    session_factory = open_ledger(os.path.abspath(config.workdir))
    reports = {}
    for label, variant in sweep_variants(config):
        logger.info(f"Sweep variant {label}")
        reports[label] = run_pipeline(variant, session_factory)
    rows = [{"variant": label, "avg": r.avg, "gap_to_real": r.gap_to_real} for label, r in reports.items()]
    pd.DataFrame(rows).to_csv(os.path.join(config.workdir, "sweep.csv"), index=False)
    return reports


def render_report_grid(model, schedule, encoder, inquiries, m_values, seed, path, config=None):
    """Inquiry followed by one sample per m value, one row per subject, written as a single PNG.

    Every cell of a row shares ``seed`` so columns differ only in m.
    """
    if not len(inquiries):
        raise ValidationError("report grid needs at least one inquiry")
    config = config or SamplerConfig()
    rows = []
    for inquiry in inquiries:
        c_id = identity_embeddings(inquiry, encoder)
        samples = sample_images(model, schedule, c_id, [float(m) for m in m_values], [seed] * len(m_values), config)
        rows.append([inquiry] + samples)
    make_grid_image(rows, path)
    logger.info(f"Sample grid of {len(rows)} subjects x {len(m_values)} m values written to {path}")
    return path


def load_inquiries(path, resolution, channels, limit=None):
    """Inquiry images from a manifest, a directory or a single image file."""
    if os.path.isfile(path) and not path.endswith(MANIFEST_NAME):
        return [load_png(path, resolution=resolution, channels=channels)]
    if os.path.exists(os.path.join(path, MANIFEST_NAME)) or path.endswith(MANIFEST_NAME):
        manifest = DatasetManifest.read(path)
    else:
        manifest = ingest_directory(path)
    records = manifest.records[:limit] if limit else manifest.records
    return [load_png(manifest.abspath(r), resolution=resolution, channels=channels) for r in records]
