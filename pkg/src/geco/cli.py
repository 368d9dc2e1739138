"""Command-line front end tying the two stages and the evaluation together.

Subcommands: synth-data, train-cigm, gen-templates, train-geco, evaluate,
ablate, sweep. Every training/evaluation run appends a RunRecord line to
<out>/runs.jsonl.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import baselines, cigm, compat, data, evaluation
from .config import (
    ConfigError,
    ExperimentConfig,
    RunRecord,
    Stopwatch,
    append_run_record,
    config_hash,
    load_config,
)
from .util import sha256_file


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="global seed (overrides config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--device", default="cpu", help="torch device (default cpu)")
    p.add_argument("--preset", help="named loss-weight preset "
                                    "(fashionvc, expreduced, fashiontaobao_tb)")


def _load_cfg(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "preset", None):
        cfg.apply_preset(args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _gen_cfg(cfg: ExperimentConfig) -> cigm.GeneratorConfig:
    return cigm.GeneratorConfig(
        image_size=cfg.dataset.image_size,
        depth=cfg.cigm.depth,
        base_channels=cfg.cigm.base_channels,
        noise_dim=cfg.cigm.noise_dim,
    )


def _disc_cfg(cfg: ExperimentConfig) -> cigm.DiscriminatorConfig:
    return cigm.DiscriminatorConfig(
        base_channels=cfg.cigm.disc_base_channels,
        n_down=cfg.cigm.disc_n_down,
    )


def _enc_cfg(cfg: ExperimentConfig) -> compat.EncoderConfig:
    return compat.EncoderConfig(
        variant=cfg.geco.encoder_variant,
        pretrained=cfg.geco.pretrained,
        weights_path=cfg.geco.weights_path,
    )


def _weights(cfg: ExperimentConfig) -> compat.LossWeights:
    return compat.LossWeights(
        alpha=cfg.geco.alpha, beta=cfg.geco.beta,
        gamma=cfg.geco.gamma, tau=cfg.geco.tau,
    )


def cmd_synth_data(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    watch = Stopwatch()
    n_pairs = args.pairs if args.pairs is not None else cfg.dataset.synth_pairs
    image_size = args.image_size if args.image_size is not None else cfg.dataset.synth_image_size
    manifest = data.synth_toy_dataset(n_pairs, image_size, cfg.stage_seed("synth"), args.out)
    manifest_path = Path(args.out) / "manifest.csv"
    digest = sha256_file(manifest_path)
    record = RunRecord.start("synth-data", config_hash(cfg), cfg.seed)
    record.outputs = [str(manifest_path)]
    record.metrics = {"n_pairs": float(len(manifest.pairs))}
    record.wall_seconds = watch.elapsed()
    append_run_record(Path(args.out) / "runs.jsonl", record)
    print(f"wrote {manifest_path} ({len(manifest.pairs)} pairs, digest {digest})")
    return 0


def cmd_train_cigm(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    watch = Stopwatch()
    manifest = data.load_manifest(args.manifest)
    ckpt = cigm.train_cigm(
        manifest, _gen_cfg(cfg), _disc_cfg(cfg),
        epochs=cfg.cigm.epochs, lr=cfg.cigm.lr, batch_size=cfg.cigm.batch_size,
        l1_weight=cfg.cigm.l1_weight, rng_seed=cfg.stage_seed("cigm"),
        out_dir=args.out, save_every=cfg.cigm.save_every, device=args.device,
    )
    ckpt_path = Path(args.out) / "cigm.pt"
    record = RunRecord.start("train-cigm", config_hash(cfg), cfg.seed)
    record.input_hashes = {"manifest": sha256_file(args.manifest)}
    record.outputs = [str(ckpt_path)]
    record.metrics = {"epochs": float(ckpt.epoch)}
    record.wall_seconds = watch.elapsed()
    append_run_record(Path(args.out) / "runs.jsonl", record)
    print(f"wrote {ckpt_path} (epoch {ckpt.epoch})")
    return 0


def cmd_gen_templates(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    watch = Stopwatch()
    manifest = data.load_manifest(args.manifest)
    ckpt = cigm.CigmCheckpoint.load(args.ckpt)
    store = data.ImageStore(manifest, ckpt.gen_cfg.image_size)
    tops = [store.get(t) for t in manifest.top_ids]
    noise_seed = args.noise_seed if args.noise_seed is not None else cfg.stage_seed("templates")
    templates = cigm.generate_templates(ckpt, tops, noise_seed, args.out)
    index_path = Path(args.out) / "template_index.csv"
    record = RunRecord.start("gen-templates", config_hash(cfg), cfg.seed)
    record.input_hashes = {"manifest": sha256_file(args.manifest), "cigm": sha256_file(args.ckpt)}
    record.outputs = [str(index_path)]
    record.metrics = {"n_templates": float(len(templates))}
    record.wall_seconds = watch.elapsed()
    append_run_record(Path(args.out) / "runs.jsonl", record)
    print(f"wrote {index_path} ({len(templates)} templates, noise seed {noise_seed})")
    return 0


def cmd_train_geco(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    watch = Stopwatch()
    manifest = data.load_manifest(args.manifest)
    index = cigm.load_template_index(args.templates)
    ckpt = compat.train_geco(
        manifest, index, _enc_cfg(cfg), _weights(cfg),
        epochs=cfg.geco.epochs, lr=cfg.geco.lr, batch_size=cfg.geco.batch_size,
        rng_seed=cfg.stage_seed("geco"), out_dir=args.out,
        image_size=cfg.dataset.image_size,
        scheduler_step=cfg.geco.scheduler_step,
        scheduler_factor=cfg.geco.scheduler_factor,
        nce_outer_scale=cfg.geco.nce_outer_scale,
        device=args.device,
    )
    ckpt_path = Path(args.out) / "geco.pt"
    record = RunRecord.start("train-geco", config_hash(cfg), cfg.seed)
    record.input_hashes = {
        "manifest": sha256_file(args.manifest),
        "templates": sha256_file(args.templates),
    }
    record.outputs = [str(ckpt_path)]
    record.metrics = {"epochs": float(ckpt.epoch)}
    record.wall_seconds = watch.elapsed()
    append_run_record(Path(args.out) / "runs.jsonl", record)
    print(f"wrote {ckpt_path} (epoch {ckpt.epoch})")
    return 0


def _build_scorer(args: argparse.Namespace, cfg: ExperimentConfig,
                  manifest: data.PairManifest) -> tuple:
    """Returns (scorer, checkpoint_hash)."""
    if args.scorer == "random":
        return baselines.RandomScorer(cfg.stage_seed("random")), ""
    if args.ckpt is None:
        raise ConfigError(f"--ckpt is required for scorer {args.scorer!r}")
    if args.scorer == "geco":
        if args.templates is None:
            raise ConfigError("--templates is required for the geco scorer")
        ckpt = compat.GecoCheckpoint.load(args.ckpt)
        index = cigm.load_template_index(args.templates)
        scorer = compat.GecoScorer(ckpt.build_model(), manifest, index,
                                   ckpt.image_size, device=args.device)
        return scorer, sha256_file(args.ckpt)
    if args.scorer == "siamese":
        ckpt = baselines.SiameseCheckpoint.load(args.ckpt)
        scorer = baselines.SiameseScorer(ckpt.build_model(), manifest,
                                         ckpt.image_size, device=args.device)
        return scorer, sha256_file(args.ckpt)
    raise ConfigError(f"unknown scorer {args.scorer!r}")


def _run_protocol(protocol: str, scorer, manifest, cfg: ExperimentConfig,
                  seed: int, ckpt_hash: str, cfg_hash: str):
    if protocol == "full":
        return evaluation.evaluate_full(
            scorer, manifest, seed=seed,
            checkpoint_hash=ckpt_hash, config_hash=cfg_hash,
        )
    return evaluation.evaluate_mgcm(
        scorer, manifest, n_auc=cfg.eval.n_auc, n_mrr=cfg.eval.n_mrr,
        seed=seed, checkpoint_hash=ckpt_hash, config_hash=cfg_hash,
    )


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    if args.protocol:
        cfg.eval.protocol = args.protocol
        cfg.validate()
    watch = Stopwatch()
    manifest = data.load_manifest(args.manifest)
    scorer, ckpt_hash = _build_scorer(args, cfg, manifest)
    cfg_hash = config_hash(cfg)
    report, per_query = _run_protocol(
        cfg.eval.protocol, scorer, manifest, cfg, cfg.stage_seed("eval"), ckpt_hash, cfg_hash
    )
    report_path, queries_path = evaluation.write_eval_report(report, per_query, args.out)
    record = RunRecord.start("evaluate", cfg_hash, cfg.seed)
    record.input_hashes = {"manifest": sha256_file(args.manifest)}
    if ckpt_hash:
        record.input_hashes["checkpoint"] = ckpt_hash
    record.outputs = [str(report_path), str(queries_path)]
    record.metrics = {"auc": report.auc, "mrr": report.mrr}
    record.wall_seconds = watch.elapsed()
    append_run_record(Path(args.out) / "runs.jsonl", record)
    print(f"protocol={report.protocol} auc={report.auc:.4f} mrr={report.mrr:.4f} "
          f"n_queries={report.n_queries}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    watch = Stopwatch()
    manifest = data.load_manifest(args.manifest)
    index = cigm.load_template_index(args.templates)
    dataset_digest = sha256_file(args.manifest)
    cfg_hash = config_hash(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    base = _weights(cfg)
    variants = [
        ("w/o-InfoNCE", compat.LossWeights(base.alpha, 0.0, base.gamma, base.tau)),
        ("w/o-BPR", compat.LossWeights(0.0, base.beta, base.gamma, base.tau)),
        ("full", base),
    ]
    table_path = out_dir / "ablation.csv"
    with open(table_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "alpha", "beta", "tau", "auc", "mrr",
                         "seed", "dataset_digest"])
        for name, weights in variants:
            run_dir = out_dir / name.replace("/", "_")
            ckpt = compat.train_geco(
                manifest, index, _enc_cfg(cfg), weights,
                epochs=cfg.geco.epochs, lr=cfg.geco.lr, batch_size=cfg.geco.batch_size,
                rng_seed=cfg.stage_seed("geco"), out_dir=run_dir,
                image_size=cfg.dataset.image_size,
                scheduler_step=cfg.geco.scheduler_step,
                scheduler_factor=cfg.geco.scheduler_factor,
                nce_outer_scale=cfg.geco.nce_outer_scale,
                device=args.device,
            )
            scorer = compat.GecoScorer(ckpt.build_model(), manifest, index,
                                       ckpt.image_size, device=args.device)
            report, per_query = _run_protocol(
                cfg.eval.protocol, scorer, manifest, cfg, cfg.stage_seed("eval"),
                sha256_file(run_dir / "geco.pt"), cfg_hash,
            )
            evaluation.write_eval_report(report, per_query, run_dir)
            writer.writerow([name, weights.alpha, weights.beta, weights.tau,
                             f"{report.auc:.6f}", f"{report.mrr:.6f}",
                             cfg.seed, dataset_digest])
            f.flush()
            print(f"{name}: auc={report.auc:.4f} mrr={report.mrr:.4f}")

    record = RunRecord.start("ablate", cfg_hash, cfg.seed)
    record.input_hashes = {"manifest": dataset_digest, "templates": sha256_file(args.templates)}
    record.outputs = [str(table_path)]
    record.wall_seconds = watch.elapsed()
    append_run_record(out_dir / "runs.jsonl", record)
    print(f"wrote {table_path}")
    return 0


def _parse_grid(raw: Optional[str], default: Sequence[float]) -> List[float]:
    if raw is None:
        return list(default)
    values = [float(v) for v in raw.split(",") if v.strip() != ""]
    if not values:
        raise ConfigError("empty sweep grid")
    return values


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    watch = Stopwatch()
    manifest = data.load_manifest(args.manifest)
    index = cigm.load_template_index(args.templates)
    cfg_hash = config_hash(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    alphas = _parse_grid(args.alphas, [cfg.geco.alpha])
    betas = _parse_grid(args.betas, [cfg.geco.beta])
    taus = _parse_grid(args.taus, [cfg.geco.tau])

    table_path = out_dir / "sweep.csv"
    with open(table_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["alpha", "beta", "tau", "auc", "mrr", "seed"])
        f.flush()
        for alpha, beta, tau in itertools.product(alphas, betas, taus):
            weights = compat.LossWeights(alpha=alpha, beta=beta, gamma=cfg.geco.gamma, tau=tau)
            run_dir = out_dir / f"a{alpha}_b{beta}_t{tau}"
            ckpt = compat.train_geco(
                manifest, index, _enc_cfg(cfg), weights,
                epochs=cfg.geco.epochs, lr=cfg.geco.lr, batch_size=cfg.geco.batch_size,
                rng_seed=cfg.stage_seed("geco"), out_dir=run_dir,
                image_size=cfg.dataset.image_size,
                scheduler_step=cfg.geco.scheduler_step,
                scheduler_factor=cfg.geco.scheduler_factor,
                nce_outer_scale=cfg.geco.nce_outer_scale,
                device=args.device,
            )
            scorer = compat.GecoScorer(ckpt.build_model(), manifest, index,
                                       ckpt.image_size, device=args.device)
            report, _ = _run_protocol(
                cfg.eval.protocol, scorer, manifest, cfg, cfg.stage_seed("eval"),
                sha256_file(run_dir / "geco.pt"), cfg_hash,
            )
            writer.writerow([alpha, beta, tau, f"{report.auc:.6f}",
                             f"{report.mrr:.6f}", cfg.seed])
            f.flush()
            print(f"alpha={alpha} beta={beta} tau={tau}: "
                  f"auc={report.auc:.4f} mrr={report.mrr:.4f}")

    record = RunRecord.start("sweep", cfg_hash, cfg.seed)
    record.input_hashes = {"manifest": sha256_file(args.manifest)}
    record.outputs = [str(table_path)]
    record.wall_seconds = watch.elapsed()
    append_run_record(out_dir / "runs.jsonl", record)
    print(f"wrote {table_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geco",
        description="Two-stage top-bottom retrieval: template generation, "
                    "compatibility scoring, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic paired dataset")
    _add_common(p)
    p.add_argument("--pairs", type=int, help="number of positive pairs")
    p.add_argument("--image-size", type=int, help="side length of the images")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-cigm", help="train the stage-1 template generator")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_train_cigm)

    p = sub.add_parser("gen-templates", help="generate one template per top")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    p.add_argument("--noise-seed", type=int)
    p.set_defaults(func=cmd_gen_templates)

    p = sub.add_parser("train-geco", help="train the stage-2 compatibility model")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--templates", required=True, help="template index CSV")
    p.set_defaults(func=cmd_train_geco)

    p = sub.add_parser("evaluate", help="run an evaluation protocol")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", choices=["full", "mgcm"])
    p.add_argument("--scorer", choices=["random", "geco", "siamese"], default="geco")
    p.add_argument("--ckpt")
    p.add_argument("--templates")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare the loss-component variants")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--templates", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid sweep over alpha, beta, tau")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--templates", required=True)
    p.add_argument("--alphas", help="comma-separated values")
    p.add_argument("--betas", help="comma-separated values")
    p.add_argument("--taus", help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, data.ManifestError, compat.MissingTemplateError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
