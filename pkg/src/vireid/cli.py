"""Command-line surface: dataset synthesis, staged training, embedding
export, protocol evaluation, and report/plot emission.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config, save_config_snapshot
from .data import SyntheticSpec, load_manifest, save_synthetic_dataset, synthesize_dataset
from .errors import TrainingDiverged, ValidationError
from .evaluation import (EmbeddingSet, MetricsReport, load_embeddings, protocol_regdb,
                         protocol_sysu, save_embeddings)
from .inference import embed_samples
from .model import Stage
from .training import (checkpoint_load, checkpoint_save, initial_checkpoint, restore_model,
                       run_stage_hsa, run_stage_ife, run_stage_tsg)

_STAGE_ORDER = [Stage.TSG, Stage.IFE, Stage.HSA]
_STAGE_NUM = {Stage.TSG: 1, Stage.IFE: 2, Stage.HSA: 3}


def run_protocol(settings: dict, embeddings: EmbeddingSet) -> MetricsReport:
    """Dispatch the configured evaluation protocol on an embedding set."""
    if settings["protocol"] == "sysu":
        return protocol_sysu(embeddings, mode=settings["mode"], shot=settings["shot"],
                             trials=settings["trials"], seed=settings["seed"],
                             max_rank=settings["max_rank"])
    return protocol_regdb(embeddings, direction=settings["direction"],
                          repeats=settings["repeats"], seed=settings["seed"],
                          max_rank=settings["max_rank"],
                          gallery_per_id=settings["gallery_per_id"])


def _latest_checkpoint(run_dir: Path, stage: Stage) -> Path | None:
    stage_dir = run_dir / f"stage{_STAGE_NUM[stage]}"
    if not stage_dir.is_dir():
        return None
    candidates = sorted(stage_dir.glob("epoch_*.ckpt"))
    return candidates[-1] if candidates else None


def train_pipeline(cfg: RunConfig, run_dir, stages, *, resume=None, allow_skip=False,
                   evaluate: bool = True) -> dict:
    """Run the requested stages in order inside ``run_dir`` and optionally
    evaluate the final model. Returns a summary dict (paths and metrics)."""
    # pin the ambient generators so checkpoint bytes (which include rng
    # state) are identical across re-runs of the same config
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed % 2 ** 32)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config_snapshot(cfg, run_dir / "config.snapshot")
    config_hash = cfg.config_hash()

    samples, num_identities = cfg.train_samples()
    data = cfg.build_training_data(samples)
    if data.num_identities != num_identities:
        raise ValidationError(
            f"training data lists {data.num_identities} identities, expected {num_identities}")

    resume_record = None
    if resume is not None:
        resume_record = checkpoint_load(resume, expected_config_hash=config_hash)
        if resume_record.stage not in {s.value for s in _STAGE_ORDER}:
            raise ValidationError(f"cannot resume from a {resume_record.stage!r} checkpoint")
        model = restore_model(resume_record)
        # stages completed before the checkpointed one are already baked in
        resume_stage = Stage(resume_record.stage)
        stages = [s for s in stages if _STAGE_NUM[s] >= _STAGE_NUM[resume_stage]]
    else:
        model = cfg.build_model(num_identities)
    if model.num_identities != num_identities:
        raise ValidationError(
            f"model was built for {model.num_identities} identities, data has {num_identities}")

    log_path = run_dir / "metrics.log"
    log_fh = open(log_path, "a" if resume_record is not None else "w", encoding="utf-8")

    def log_fn(record):
        log_fh.write(json.dumps(record, sort_keys=True) + "\n")
        log_fh.flush()

    text_cache = resume_record.text_cache if resume_record is not None else None
    record = None
    try:
        for stage in stages:
            plan = cfg.plans[stage]
            stage_resume = None
            if resume_record is not None and resume_record.stage == stage.value:
                stage_resume = resume_record
            elif record is None and stage is not Stage.TSG:
                # starting mid-pipeline: pull the latest prior stage's output
                priors = _STAGE_ORDER[:_STAGE_NUM[stage] - 1]
                found = next(((p, _latest_checkpoint(run_dir, p)) for p in reversed(priors)
                              if _latest_checkpoint(run_dir, p) is not None), None)
                if found is None or found[0] is not priors[-1]:
                    if not allow_skip:
                        raise ValidationError(
                            f"stage {_STAGE_NUM[stage]} requested but stage "
                            f"{_STAGE_NUM[priors[-1]]} has no outputs under {run_dir} "
                            f"(pass --allow-skip to run it anyway)")
                if found is not None:
                    prev_record = checkpoint_load(found[1], expected_config_hash=config_hash)
                    model.load_state_dict(prev_record.model_state)
                    if prev_record.text_cache is not None:
                        text_cache = prev_record.text_cache
            if stage is Stage.TSG:
                record = run_stage_tsg(model, data, plan, run_dir=run_dir, resume=stage_resume,
                                       log_fn=log_fn, config_hash=config_hash)
                text_cache = record.text_cache
            elif stage is Stage.IFE:
                if text_cache is None:
                    cache_path = run_dir / "stage1" / "text_cache.pt"
                    if cache_path.exists():
                        text_cache = torch.load(cache_path, map_location="cpu",
                                                weights_only=False)
                    elif allow_skip:
                        text_cache = model.all_text_features().detach()
                    else:
                        raise ValidationError(
                            "stage 2 requires the stage-1 text cache "
                            "(run stage 1 first or pass --allow-skip)")
                record = run_stage_ife(model, data, plan, text_cache, run_dir=run_dir,
                                       resume=stage_resume, log_fn=log_fn,
                                       config_hash=config_hash)
            else:
                record = run_stage_hsa(model, data, plan, run_dir=run_dir, resume=stage_resume,
                                       log_fn=log_fn, config_hash=config_hash)
    finally:
        log_fh.close()

    if record is None:
        record = initial_checkpoint(model, config_hash)
    final_path = run_dir / "final.ckpt"
    checkpoint_save(record, final_path)

    summary = {"run_dir": str(run_dir), "final_checkpoint": str(final_path),
               "stages_run": [s.value for s in stages]}
    if evaluate:
        eval_samples = cfg.eval_samples()
        embeddings = embed_samples(model, eval_samples, cfg.augmentation)
        report = run_protocol(cfg.eval, embeddings)
        report_path = run_dir / "eval_report.json"
        report.save(report_path)
        summary["eval_report"] = str(report_path)
        summary["rank1"] = report.rank_at(1)
        summary["map"] = report.map
        summary["minp"] = report.minp
    return summary


# ---- commands ----------------------------------------------------------


def _cmd_synth_data(args) -> int:
    spec = SyntheticSpec(
        num_identities=args.ids, images_per_identity=args.images_per_id,
        image_size=(args.height, args.width), noise_std=args.noise,
        jitter=args.jitter, seed=args.seed, split=args.split)
    samples = synthesize_dataset(spec)
    manifest_path = save_synthetic_dataset(samples, args.out)
    print(f"wrote {len(samples)} images and {manifest_path}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    run_dir = args.run_dir or cfg.run_dir
    if run_dir is None:
        raise ValidationError("no run directory: set train.run_dir in the config or pass --run-dir")
    selector = {"all": list(_STAGE_ORDER), "1": [Stage.TSG], "2": [Stage.IFE],
                "3": [Stage.HSA], "none": []}[args.stage]
    summary = train_pipeline(cfg, run_dir, selector, resume=args.resume,
                             allow_skip=args.allow_skip, evaluate=not args.no_eval)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _load_model_for(args):
    record = checkpoint_load(args.checkpoint)
    return restore_model(record)


def _cmd_embed(args) -> int:
    cfg = load_config(args.config, args.set)
    model = _load_model_for(args)
    manifest = load_manifest(args.manifest)
    embeddings = embed_samples(model, manifest.samples, cfg.augmentation)
    save_embeddings(embeddings, args.out)
    print(f"wrote {len(embeddings)} embeddings to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.embeddings:
        embeddings = load_embeddings(args.embeddings)
    else:
        if not (args.checkpoint and args.manifest):
            raise ValidationError("pass either --embeddings or both --checkpoint and --manifest")
        model = _load_model_for(args)
        manifest = load_manifest(args.manifest)
        embeddings = embed_samples(model, manifest.samples, cfg.augmentation)
    report = run_protocol(cfg.eval, embeddings)
    from .reporting import format_report_table
    print(format_report_table(report))
    if args.out:
        report.save(args.out)
        print(f"report written to {args.out}")
    return 0


def _cmd_report(args) -> int:
    from .reporting import (format_report_table, load_metrics_log, write_cmc_plot,
                            write_loss_plots)
    run_dir = Path(args.run_dir)
    report_path = run_dir / "eval_report.json"
    log_path = run_dir / "metrics.log"
    if not report_path.exists() and not log_path.exists():
        raise FileNotFoundError(f"{run_dir} contains neither eval_report.json nor metrics.log")
    lines = []
    report = None
    if report_path.exists():
        report = MetricsReport.load(report_path)
        lines.append(format_report_table(report))
    records = load_metrics_log(log_path) if log_path.exists() else []
    if records:
        stages = sorted({r["stage"] for r in records})
        lines.append(f"step log: {len(records)} records across stages {stages}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    if args.plots:
        plot_dir = run_dir / "plots"
        written = write_loss_plots(records, plot_dir) if records else []
        if report is not None:
            plot_dir.mkdir(parents=True, exist_ok=True)
            written.append(write_cmc_plot(report, plot_dir / "cmc.png"))
        for path in written:
            print(f"plot: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vireid",
        description="Cross-modal person retrieval: staged training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth-data", help="write a synthetic dual-modality dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--ids", type=int, default=10)
    synth.add_argument("--images-per-id", type=int, default=20)
    synth.add_argument("--height", type=int, default=32)
    synth.add_argument("--width", type=int, default=16)
    synth.add_argument("--noise", type=float, default=0.06)
    synth.add_argument("--jitter", type=int, default=2)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--split", default="train")
    synth.set_defaults(func=_cmd_synth_data)

    train = sub.add_parser("train", help="run the staged training pipeline")
    train.add_argument("--config", required=True)
    train.add_argument("--set", action="append", metavar="KEY=VALUE", default=[])
    train.add_argument("--stage", choices=["1", "2", "3", "all", "none"], default="all")
    train.add_argument("--resume", default=None, help="checkpoint to resume from")
    train.add_argument("--run-dir", default=None)
    train.add_argument("--allow-skip", action="store_true",
                       help="allow a stage to run without the previous stage's outputs")
    train.add_argument("--no-eval", action="store_true",
                       help="skip the final evaluation pass")
    train.set_defaults(func=_cmd_train)

    embed = sub.add_parser("embed", help="export embeddings for a manifest")
    embed.add_argument("--checkpoint", required=True)
    embed.add_argument("--manifest", required=True)
    embed.add_argument("--config", required=True)
    embed.add_argument("--set", action="append", metavar="KEY=VALUE", default=[])
    embed.add_argument("--out", required=True)
    embed.set_defaults(func=_cmd_embed)

    evaluate = sub.add_parser("eval", help="run a retrieval protocol")
    evaluate.add_argument("--config", required=True)
    evaluate.add_argument("--set", action="append", metavar="KEY=VALUE", default=[])
    evaluate.add_argument("--embeddings", default=None)
    evaluate.add_argument("--checkpoint", default=None)
    evaluate.add_argument("--manifest", default=None)
    evaluate.add_argument("--out", default=None)
    evaluate.set_defaults(func=_cmd_eval)

    report = sub.add_parser("report", help="summarize a run directory")
    report.add_argument("--run-dir", required=True)
    report.add_argument("--plots", action="store_true")
    report.add_argument("--out", default=None)
    report.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
