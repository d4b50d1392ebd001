"""Command-line interface for the full pipeline.

Subcommands: preprocess, synth, train, eval, ensemble, probe, stats. All
take a flat key=value config file (see config.py) with dotted key prefixes:
`synth.*` for generation, `train.*` for the loop, `model.*` for
architecture. Fixed seeds and inputs give byte-identical outputs; run
directories are append-only and never overwritten without --force.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .audio import AudioFormatError, SilentClipError, load_wav, preprocess_clip, save_wav
from .data import (DatasetManifest, SynthConfig, generate_synthetic, load_manifest,
                   save_manifest)
from .metrics import (ReferenceLabels, age_sample_errors, cochran_q, country_correctness,
                      emotion_sample_errors, ensemble, linear_probe, read_predictions,
                      report_from_predictions, ttest_ind, write_predictions)
from .model import Model, ModelConfig, TaskId, load_checkpoint, save_checkpoint
from .training import (TrainConfig, log_to_jsonl, predict_split,
                       representations_for_split, train)


def worker_cap(default: int = 1) -> int:
    """Honour the B2V_THREADS cap; this build is single-threaded, so the
    effective count is min(cap, 1), but a malformed value is still an error."""
    raw = os.environ.get("B2V_THREADS")
    if raw is None:
        return default
    try:
        cap = int(raw)
    except ValueError:
        raise SystemExit(f"B2V_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise SystemExit("B2V_THREADS must be >= 1")
    return min(cap, default)


def _load_config(path) -> dict[str, str]:
    if path is None:
        return {}
    return cfgmod.load_config(path)


def _model_config(raw: dict[str, str]) -> ModelConfig:
    m = dict(raw)
    take = cfgmod.take
    defaults = ModelConfig()
    cfg = ModelConfig(
        encoder_mode=take(m, "encoder_mode", str, defaults.encoder_mode),
        conv_kernels=take(m, "conv_kernels", cfgmod.parse_int_tuple, defaults.conv_kernels),
        conv_strides=take(m, "conv_strides", cfgmod.parse_int_tuple, defaults.conv_strides),
        conv_channels=take(m, "conv_channels", cfgmod.parse_int_tuple, defaults.conv_channels),
        encoder_dim=take(m, "encoder_dim", int, defaults.encoder_dim),
        proj_dim=take(m, "proj_dim", int, defaults.proj_dim),
        hidden_dim=take(m, "hidden_dim", int, defaults.hidden_dim),
        n_countries=take(m, "n_countries", int, defaults.n_countries),
        n_emotions=take(m, "n_emotions", int, defaults.n_emotions),
        age_min=take(m, "age_min", float, defaults.age_min),
        age_max=take(m, "age_max", float, defaults.age_max),
        dtype=take(m, "dtype", str, defaults.dtype),
    )
    cfgmod.reject_unknown(m, "model")
    cfg.validate()
    return cfg


def _synth_config(raw: dict[str, str]) -> SynthConfig:
    m = dict(raw)
    take = cfgmod.take
    d = SynthConfig()
    cfg = SynthConfig(
        n_clips=take(m, "n_clips", int, d.n_clips),
        n_countries=take(m, "n_countries", int, d.n_countries),
        age_country_bias=take(m, "age_country_bias", float, d.age_country_bias),
        mode=take(m, "mode", str, d.mode),
        train_frac=take(m, "train_frac", float, d.train_frac),
        val_frac=take(m, "val_frac", float, d.val_frac),
        age_min=take(m, "age_min", float, d.age_min),
        age_max=take(m, "age_max", float, d.age_max),
        older_country=take(m, "older_country", int, d.older_country),
        feature_dim=take(m, "feature_dim", int, d.feature_dim),
        frames_min=take(m, "frames_min", int, d.frames_min),
        frames_max=take(m, "frames_max", int, d.frames_max),
        emotion_gain=take(m, "emotion_gain", float, d.emotion_gain),
        age_gain=take(m, "age_gain", float, d.age_gain),
        country_gain=take(m, "country_gain", float, d.country_gain),
        feature_noise=take(m, "feature_noise", float, d.feature_noise),
        sample_rate=take(m, "sample_rate", int, d.sample_rate),
        duration_min=take(m, "duration_min", float, d.duration_min),
        duration_max=take(m, "duration_max", float, d.duration_max),
        snr_db=take(m, "snr_db", float, d.snr_db),
    )
    cfgmod.reject_unknown(m, "synth")
    cfg.validate()
    return cfg


def _prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise SystemExit(f"{out}: refusing to write into a nonempty directory "
                         "(pass --force to override)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


# -- subcommands ------------------------------------------------------------

def cmd_preprocess(args) -> int:
    manifest = load_manifest(Path(args.input) / "manifest.csv")
    out = _prepare_out_dir(args.out, args.force)
    kept, failures = [], []
    for record in manifest.records:
        src = manifest.media_path(record)
        try:
            clip = preprocess_clip(load_wav(src))
        except (AudioFormatError, SilentClipError, OSError) as e:
            failures.append((record.clip_id, str(e)))
            continue
        dst = out / record.media
        dst.parent.mkdir(parents=True, exist_ok=True)
        save_wav(dst, clip)
        kept.append(record)
        if args.verbose:
            print(f"  {record.clip_id}: {clip.samples.size} samples @ {clip.sample_rate} Hz")
    save_manifest(DatasetManifest(kept, out, manifest.countries,
                                  manifest.age_min, manifest.age_max),
                  out / "manifest.csv")
    print(f"preprocess: {len(kept)} written, {len(failures)} failed")
    for clip_id, err in failures:
        print(f"  FAILED {clip_id}: {err}")
    return 1 if failures else 0


def cmd_synth(args) -> int:
    cfg = _synth_config(cfgmod.section(_load_config(args.config), "synth"))
    out = _prepare_out_dir(args.out, args.force)
    seed = 0 if args.seed is None else args.seed
    manifest = generate_synthetic(cfg, seed=seed, out_dir=out)
    counts = {s: len(manifest.split_indices(s)) for s in ("train", "validation", "test")}
    print(f"synth: {len(manifest.records)} clips at {out} "
          f"(train {counts['train']}, validation {counts['validation']}, "
          f"test {counts['test']})")
    return 0


def cmd_train(args) -> int:
    raw = _load_config(args.config)
    train_cfg = TrainConfig.from_mapping(cfgmod.section(raw, "train"))
    model_cfg = _model_config(cfgmod.section(raw, "model"))
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    manifest = load_manifest(Path(args.data) / "manifest.csv")
    out = _prepare_out_dir(args.out, args.force)

    result = train(train_cfg, model_cfg, manifest)

    if args.config:
        (out / "config_snapshot.txt").write_text(
            Path(args.config).read_text(encoding="utf-8"), encoding="utf-8")
    (out / "train_log.jsonl").write_text(log_to_jsonl(result.log), encoding="utf-8")
    save_checkpoint(out / "best.b2vc", result.best_checkpoint)
    report = None
    for _, _, rep in reversed(result.validations):
        if rep is not None:
            report = rep
            break
    _write_json(out / "result.json", {
        "best_metric": result.best_metric,
        "best_iteration": result.best_iteration,
        "iterations": result.iterations,
        "stopped_early": result.stopped_early,
        "validations": [[i, m] for i, m, _ in result.validations],
    })
    if report is not None:
        (out / "last_validation.json").write_text(report.to_json(), encoding="utf-8")
    print(f"train: {result.iterations} iterations, best validation "
          f"emotion ccc {result.best_metric:.4f} at iteration {result.best_iteration}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(Path(args.data) / "manifest.csv")
    model = Model.from_checkpoint(load_checkpoint(args.checkpoint))
    out = _prepare_out_dir(args.out, args.force)
    preds = predict_split(model, manifest, args.split)
    refs = ReferenceLabels.from_records(
        [r for r in manifest.records if r.split == args.split])
    report = report_from_predictions(preds, refs)
    write_predictions(out / "predictions.csv", preds)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    score = "undefined" if report.score is None else f"{report.score:.4f}"
    print(f"eval[{args.split}]: emotion ccc {report.emotion_ccc:.4f}, "
          f"country uar {report.country_uar:.4f}, age mae {report.age_mae_years:.3f}y, "
          f"score {score} ({report.sample_count} clips)")
    return 0


def cmd_ensemble(args) -> int:
    sets = [read_predictions(p) for p in args.inputs]
    merged = ensemble(sets)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_predictions(args.out, merged)
    print(f"ensemble: {len(sets)} sets over {len(merged.clip_ids)} clips -> {args.out}")
    return 0


def cmd_probe(args) -> int:
    manifest = load_manifest(Path(args.data) / "manifest.csv")
    model = Model.from_checkpoint(load_checkpoint(args.checkpoint))
    task = TaskId[args.task.upper()]
    reps, labels = representations_for_split(model, manifest, args.split,
                                             kind=args.kind, task=task)
    n_classes = len(manifest.countries)
    accuracy = linear_probe(reps, labels, n_classes, seed=args.seed)
    payload = {
        "accuracy": accuracy,
        "chance": 1.0 / n_classes,
        "samples": int(labels.size),
        "kind": args.kind,
        "task": task.name,
        "split": args.split,
    }
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write_json(args.out, payload)
    print(f"probe[{args.kind}/{task.name}]: country accuracy {accuracy:.4f} "
          f"(chance {1.0 / n_classes:.4f}, {labels.size} samples)")
    return 0


def cmd_stats(args) -> int:
    manifest = load_manifest(Path(args.data) / "manifest.csv")
    refs_records = [r for r in manifest.records if r.split == args.split]
    refs = ReferenceLabels.from_records(refs_records)
    ids = tuple(r.clip_id for r in refs_records)
    pred_a = read_predictions(args.pred_a)
    pred_b = read_predictions(args.pred_b)
    for name, p in (("A", pred_a), ("B", pred_b)):
        if p.clip_ids != ids:
            raise SystemExit(f"prediction file {name} does not cover split "
                             f"{args.split!r} in manifest order")
    t_emo, p_emo = ttest_ind(emotion_sample_errors(pred_a, refs),
                             emotion_sample_errors(pred_b, refs))
    t_age, p_age = ttest_ind(age_sample_errors(pred_a, refs),
                             age_sample_errors(pred_b, refs))
    correct = np.stack([country_correctness(pred_a, refs),
                        country_correctness(pred_b, refs)], axis=1)
    q, df, p_cou = cochran_q(correct)
    payload = {
        "emotion_t": t_emo, "emotion_p": p_emo,
        "age_t": t_age, "age_p": p_age,
        "country_q": q, "country_df": df, "country_p": p_cou,
        "samples": len(ids),
    }
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write_json(args.out, payload)
    print(f"stats[{args.split}]: emotion t={t_emo:.4f} p={p_emo:.4f}; "
          f"age t={t_age:.4f} p={p_age:.4f}; country Q={q:.4f} p={p_cou:.4f}")
    return 0


# -- argument parsing ------------------------------------------------------------

def _add_common(sub, config=True, out=True, seed=True):
    if config:
        sub.add_argument("--config", help="flat key=value config file")
    if out:
        sub.add_argument("--out", required=True, help="output directory or file")
    if seed:
        sub.add_argument("--seed", type=int, default=None, help="override the seed")
    sub.add_argument("--force", action="store_true",
                     help="allow writing into a nonempty output directory")
    sub.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="burst2vec",
        description="Multi-task vocal burst analysis: preprocessing, synthetic "
                    "data, adversarial training, evaluation, ensembling.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("preprocess", help="resample to 16 kHz and normalize level")
    p.add_argument("--input", required=True, help="dataset dir with manifest.csv")
    _add_common(p, config=False, seed=False)
    p.set_defaults(fn=cmd_preprocess)

    p = subs.add_parser("synth", help="generate a synthetic biased dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = subs.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="dataset dir with manifest.csv")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="validation")
    _add_common(p, config=False, seed=False)
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("ensemble", help="average prediction CSVs")
    p.add_argument("--inputs", nargs="+", required=True)
    _add_common(p, config=False, seed=False)
    p.set_defaults(fn=cmd_ensemble)

    p = subs.add_parser("probe", help="linear probe for leaked country information")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="validation")
    p.add_argument("--kind", default="specific",
                   choices=("shared", "specific", "combined"))
    p.add_argument("--task", default="age", choices=("emotion", "age", "country"))
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_probe)

    p = subs.add_parser("stats", help="significance tests between two prediction files")
    p.add_argument("--pred-a", required=True)
    p.add_argument("--pred-b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="validation")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_stats)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    worker_cap()
    try:
        return args.fn(args)
    except (cfgmod.ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
