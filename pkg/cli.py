"""Command-line surface: one subcommand per workflow step plus run-pipeline."""
import argparse
import json
import logging
import os
import sys

import pandas as pd

from app import __version__, configure_logging, open_ledger
from combine_manifests import combine_manifests
from config import load_config
from dataset_generator import MixSchedule, assemble_dataset, mix_m_schedule, select_inquiries
from ddim_sampler import ConditionedSampler, SamplerConfig, generate_group
from diffusion_core import DenoiserConfig, DiffusionTrainConfig, load_denoiser, make_noise_schedule, save_denoiser, train_diffusion
from errors import ValidationError
from fr_trainer import AugmentConfig, FRTrainConfig, train_fr
from identity_embedder import EncoderCheckpoint, EncoderConfig, EncoderTrainConfig, train_encoder
from imaging import save_png
from ingest import ingest_directory
from manifest import DatasetManifest, image_name, subject_dir
from pipeline import PipelineRunner, load_inquiries, render_report_grid, run_sweep
from similarity_analysis import bucket_by_similarity, export_embeddings, score_to_center, write_group_manifests
from toy_corpus import make_toy_corpus
from verification_eval import evaluate_suite, make_toy_pairs, pair_list_names, read_pair_list, write_pair_list

logger = logging.getLogger(__name__)


def _read_corpus(path, session=None):
    """A manifest file, a directory holding one, or a raw image directory."""
    if os.path.isfile(path) or os.path.exists(os.path.join(path, "manifest.jsonl")):
        return DatasetManifest.read(path)
    return ingest_directory(path, session=session)


def _encoder_for(args, header):
    path = args.encoder or header.get("encoder")
    if not path:
        raise ValidationError("no --encoder given and the denoiser header does not name one")
    return EncoderCheckpoint.load(path)


def cmd_make_toy_data(args):
    try:
        manifest = make_toy_corpus(args.identities, args.per_identity, args.resolution, args.seed, args.out)
        result = {"success": True, "manifest": os.path.join(args.out, "manifest.jsonl"),
                  "images": len(manifest), "subjects": len(manifest.subject_ids())}
        if args.pairs:
            pairs = make_toy_pairs(manifest, args.pairs, args.seed)
            result["pairs"] = write_pair_list(pairs, os.path.join(args.out, "pairs.tsv"))
        return result
    except Exception as e:
        logger.error(f"make-toy-data failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_train_encoder(args):
    try:
        corpus = _read_corpus(args.corpus)
        encoder_config = EncoderConfig(embedding_dim=args.dim, resolution=args.resolution, channels=args.channels)
        train_config = EncoderTrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                          learning_rate=args.lr, margin=args.margin, seed=args.seed)
        checkpoint = train_encoder(corpus, train_config, encoder_config)
        path = checkpoint.save(args.out)
        return {"success": True, "checkpoint": path, "train_accuracy": checkpoint.metrics["train_accuracy"]}
    except Exception as e:
        logger.error(f"train-encoder failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_train_diffusion(args):
    try:
        corpus = _read_corpus(args.corpus)
        encoder = EncoderCheckpoint.load(args.encoder)
        train_config = DiffusionTrainConfig(
            lam=args.lam, m_range=tuple(args.m_range), m_interval=args.m_interval, epochs=args.epochs,
            batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
            simmat_form=args.form, similarity_metric=args.metric,
        )
        denoiser_config = DenoiserConfig(
            resolution=encoder.config.resolution, channels=encoder.config.channels, base_width=args.width,
            embedding_dim=encoder.config.embedding_dim,
        ).validate()
        schedule = make_noise_schedule(args.T)
        model, history = train_diffusion(corpus, encoder, train_config, schedule, denoiser_config)
        path = save_denoiser(model, schedule, train_config, args.out, encoder=os.path.abspath(args.encoder))
        log_path = f"{os.path.splitext(args.out)[0]}_log.csv"
        pd.DataFrame(history).to_csv(log_path, index=False)
        return {"success": True, "checkpoint": path, "log": log_path, "final_loss": history[-1]["total"]}
    except Exception as e:
        logger.error(f"train-diffusion failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_filter_inquiries(args):
    try:
        encoder = EncoderCheckpoint.load(args.encoder)
        pool = _read_corpus(args.pool)
        images, _ = pool.load_images(resolution=encoder.config.resolution, channels=encoder.config.channels)
        accepted = select_inquiries(images, encoder, args.threshold)
        if args.count:
            accepted = accepted[:args.count]
        os.makedirs(args.out, exist_ok=True)
        for k, i in enumerate(accepted):
            save_png(images[i], os.path.join(args.out, f"inquiry_{k:05d}.png"))
        return {"success": True, "accepted": len(accepted), "pool": len(pool), "out": args.out}
    except Exception as e:
        logger.error(f"filter-inquiries failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_generate(args):
    try:
        model, schedule, header = load_denoiser(args.model)
        encoder = _encoder_for(args, header)
        config = SamplerConfig(num_steps=args.steps, eta=args.eta, seed=args.seed)
        inquiries = load_inquiries(args.inquiry, model.config.resolution, model.config.channels)
        written = 0
        for s, inquiry in enumerate(inquiries):
            images = generate_group(model, schedule, inquiry, encoder, args.m, args.per_subject,
                                    args.seed + s * args.per_subject, config)
            for j, image in enumerate(images):
                save_png(image, os.path.join(args.out, subject_dir(s), image_name(j)))
                written += 1
        return {"success": True, "images": written, "subjects": len(inquiries), "out": args.out}
    except Exception as e:
        logger.error(f"generate failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_assemble(args):
    try:
        model, schedule, header = load_denoiser(args.model)
        encoder = _encoder_for(args, header)
        if args.m_mix:
            schedule_m = mix_m_schedule(*args.m_mix)
        elif args.m_values:
            schedule_m = MixSchedule.from_values(args.m_values)
        else:
            schedule_m = MixSchedule.from_values([args.m])
        inquiries = load_inquiries(args.inquiries, model.config.resolution, model.config.channels)
        sampler = ConditionedSampler(model, schedule, encoder,
                                     SamplerConfig(num_steps=args.steps, eta=args.eta, seed=args.seed))
        manifest = assemble_dataset(inquiries, sampler, schedule_m, args.per_subject, args.oversample,
                                    args.seed, args.out)
        return {"success": not manifest.header["partial"], "images": len(manifest),
                "subjects": len(manifest.subject_ids()), "failed_subjects": manifest.header["failed_subjects"]}
    except Exception as e:
        logger.error(f"assemble failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_split_sim(args):
    try:
        manifest = DatasetManifest.read(args.manifest)
        encoder = EncoderCheckpoint.load(args.encoder)
        head = EncoderCheckpoint.load(args.head).head
        if head is None:
            raise ValidationError(f"{args.head} carries no classifier head")
        scored = score_to_center(manifest, encoder, head, exclude_oversampled=args.exclude_oversampled)
        groups = bucket_by_similarity(scored, args.groups)
        paths = write_group_manifests(groups, manifest, args.out)
        if args.export_embeddings:
            export_embeddings(manifest, encoder, args.export_embeddings, scored=scored)
        return {"success": True, "groups": [{"manifest": p, "mean_similarity": g.mean_similarity, "size": len(g.members)}
                                            for p, g in zip(paths, groups)]}
    except Exception as e:
        logger.error(f"split-sim failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_train_fr(args):
    try:
        manifest = DatasetManifest.read(args.manifest)
        config = FRTrainConfig(
            margin=args.margin, scale=args.scale, learning_rate=args.lr, epochs=args.epochs,
            decay_epochs=tuple(args.decay), batch_size=args.batch_size, seed=args.seed,
            embedding_dim=args.dim, resolution=args.resolution,
            augment=AugmentConfig.identity() if args.no_augment else AugmentConfig(),
        )
        checkpoint, _, history = train_fr(manifest, config, log_path=f"{os.path.splitext(args.out)[0]}_log.csv")
        path = checkpoint.save(args.out)
        return {"success": True, "checkpoint": path, "train_accuracy": checkpoint.metrics["train_accuracy"],
                "epochs": len(history)}
    except Exception as e:
        logger.error(f"train-fr failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_eval(args):
    try:
        encoder = EncoderCheckpoint.load(args.encoder)
        pair_lists = [read_pair_list(p, name=n) for p, n in zip(args.pairs, pair_list_names(args.pairs))]
        report = evaluate_suite(pair_lists, encoder, args.baseline)
        if args.report:
            report.write_json(args.report)
        return {"success": True, **report.to_dict()}
    except Exception as e:
        logger.error(f"eval failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_run_pipeline(args):
    try:
        config = load_config(args.config, args.set)
        if config.sweep_m or config.sweep_lambda:
            reports = run_sweep(config)
            return {"success": True, "reports": {label: r.to_dict() for label, r in reports.items()}}
        runner = PipelineRunner(config)
        report = runner.run()
        return {"success": True, "report": report.to_dict(),
                "executed": [s for s, _ in runner.executed], "skipped": [s for s, _ in runner.skipped]}
    except Exception as e:
        logger.error(f"run-pipeline failed: {e}")
        return {"success": False, "error": str(e), "stage": getattr(e, "stage", None)}


def cmd_report(args):
    try:
        model, schedule, header = load_denoiser(args.model)
        encoder = _encoder_for(args, header)
        inquiries = load_inquiries(args.inquiries, model.config.resolution, model.config.channels,
                                   limit=args.subjects)
        config = SamplerConfig(num_steps=args.steps, eta=args.eta, seed=args.seed)
        path = render_report_grid(model, schedule, encoder, inquiries, args.m, args.seed, args.out, config)
        return {"success": True, "grid": path, "rows": len(inquiries), "columns": len(args.m) + 1}
    except Exception as e:
        logger.error(f"report failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_combine(args):
    try:
        manifests = [DatasetManifest.read(p) for p in args.manifests]
        combined = combine_manifests(manifests, args.out)
        return {"success": True, "images": len(combined), "subjects": len(combined.subject_ids())}
    except Exception as e:
        logger.error(f"combine failed: {e}")
        return {"success": False, "error": str(e)}


def cmd_ingest(args):
    try:
        session = open_ledger(args.ledger) if args.ledger else None
        manifest = ingest_directory(args.src, session=session)
        path = manifest.write(args.out)
        return {"success": True, "manifest": path, "images": len(manifest), "subjects": len(manifest.subject_ids())}
    except Exception as e:
        logger.error(f"ingest failed: {e}")
        return {"success": False, "error": str(e)}


def _sampler_args(p, seed=0):
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=seed)


def build_parser():
    parser = argparse.ArgumentParser(prog="simface", description="Similarity-conditioned synthetic recognition data")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="overrides SIMFACE_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", help="render a procedural identity corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=100)
    p.add_argument("--per-identity", type=int, default=30)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=0, help="also write a verification pair list of this size")
    p.set_defaults(handler=cmd_make_toy_data)

    p = sub.add_parser("train-encoder", help="train the identity encoder with CosFace")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--margin", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_train_encoder)

    p = sub.add_parser("train-diffusion", help="train the similarity-conditioned denoiser")
    p.add_argument("--corpus", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)
    p.add_argument("--m-range", type=float, nargs=2, default=(-1.0, 1.0))
    p.add_argument("--m-interval", type=float, default=0.02)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--form", choices=("squared", "abs"), default="squared")
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_train_diffusion)

    p = sub.add_parser("filter-inquiries", help="keep mutually dissimilar inquiry candidates")
    p.add_argument("--pool", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--count", type=int, default=0, help="keep at most this many (0 keeps all)")
    p.set_defaults(handler=cmd_filter_inquiries)

    p = sub.add_parser("generate", help="sample images of inquiry identities at one m")
    p.add_argument("--model", required=True)
    p.add_argument("--encoder", default=None)
    p.add_argument("--inquiry", required=True, help="image, directory or manifest")
    p.add_argument("--m", type=float, default=0.0)
    p.add_argument("--per-subject", type=int, default=50)
    p.add_argument("--out", required=True)
    _sampler_args(p)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("assemble", help="build a synthetic dataset with its manifest")
    p.add_argument("--inquiries", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--encoder", default=None)
    p.add_argument("--m", type=float, default=0.0)
    p.add_argument("--m-mix", type=float, nargs=3, metavar=("LOW", "HIGH", "INTERVAL"))
    p.add_argument("--m-values", type=float, nargs="+")
    p.add_argument("--per-subject", type=int, default=50)
    p.add_argument("--oversample", type=int, default=5)
    p.add_argument("--out", required=True)
    _sampler_args(p)
    p.set_defaults(handler=cmd_assemble)

    p = sub.add_parser("split-sim", help="split a dataset into groups by similarity to identity centers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--groups", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude-oversampled", action="store_true")
    p.add_argument("--export-embeddings", default=None)
    p.set_defaults(handler=cmd_split_sim)

    p = sub.add_parser("train-fr", help="train a recognition model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--margin", type=float, default=0.4)
    p.add_argument("--scale", type=float, default=64.0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--decay", type=int, nargs="*", default=[26, 34])
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_train_fr)

    p = sub.add_parser("eval", help="10-fold verification accuracy, AVG and Gap-to-Real")
    p.add_argument("--encoder", required=True)
    p.add_argument("--pairs", nargs="+", required=True)
    p.add_argument("--baseline", type=float, required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("run-pipeline", help="run every stage with digest-keyed caching")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(handler=cmd_run_pipeline)

    p = sub.add_parser("report", help="render a subjects x m sample grid")
    p.add_argument("--model", required=True)
    p.add_argument("--encoder", default=None)
    p.add_argument("--inquiries", required=True)
    p.add_argument("--m", type=float, nargs="+", default=[-0.8, -0.4, 0.0, 0.4, 0.8])
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--out", required=True)
    _sampler_args(p)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("combine", help="concatenate manifests with disjoint subject ids")
    p.add_argument("--manifests", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_combine)

    p = sub.add_parser("ingest", help="describe an image directory as a manifest")
    p.add_argument("--src", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--ledger", default=None, help="work directory whose ledger records the run")
    p.set_defaults(handler=cmd_ingest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    result = args.handler(args)
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0 if result.get("success") else 1


if __name__ == "__main__":
    sys.exit(main())
