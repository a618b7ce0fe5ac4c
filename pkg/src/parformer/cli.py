"""Command-line entry point: synth, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 I/O failure, 2 config or schema error, 3 corrupt
checkpoint, 4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .data import ManifestError, generate_synthetic, load_images, load_manifest, save_png, split_dataset, \
    stack_batch, write_manifest
from .feature_processing import sample_mask_plan
from .metrics import MetricsReport, write_per_attribute_csv, write_report_csv
from .model import init_params
from .numerics import ContractError
from .training import CheckpointError, evaluate, gradcheck, read_checkpoint, train, write_checkpoint, \
    write_train_csv

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_CORRUPT, EXIT_VERIFY = 0, 1, 2, 3, 4

# Ablation rows, in table order: (name, use ASL focusing, MACL, BRM, MVCL).
ABLATIONS = (
    ("bce", False, False, False, False),
    ("asl_only", True, False, False, False),
    ("macl_only", False, True, False, False),
    ("brm_only", False, False, True, False),
    ("mvcl_only", False, False, False, True),
    ("asl_macl", True, True, False, False),
    ("asl_macl_brm", True, True, True, False),
    ("full", True, True, True, True),
)
ABLATION_NAMES = tuple(a[0] for a in ABLATIONS)
ABLATION_HEADER = ["row", "method", "seed", "mA", "accu", "prec", "recall", "f1"]
SWEEP_KEYS = {"lambda1": "loss.lambda1", "mask_ratio": "train.mask_ratio", "temperature": "loss.temperature"}


def apply_ablation(cfg: RunConfig, name: str) -> RunConfig:
    """Switch components off in place; ``full`` leaves the config untouched."""
    for row_name, asl, macl, brm, mvcl in ABLATIONS:
        if row_name == name:
            break
    else:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {ABLATION_NAMES}")
    if not asl:
        # plain BCE: no focusing, averaged over the batch
        cfg.loss.gamma_pos = cfg.loss.gamma_neg = 0.0
        cfg.loss.asl_reduction = "mean"
    if not macl:
        cfg.loss.lambda1 = 0.0
    if not brm:
        cfg.train.mask_ratio = 0.0
    if not mvcl:
        cfg.loss.lambda2 = 0.0
    return cfg


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.synth.seed = args.seed
    return cfg.validate()


def _load_samples(manifest: str, cfg: RunConfig):
    samples = load_manifest(manifest, cfg.model.n_attributes)
    if not samples:
        raise ManifestError(f"{manifest}: no records")
    load_images(samples, Path(manifest).parent, cfg.synth)
    side = samples[0].image.shape[:2]
    if side != (cfg.model.image_h, cfg.model.image_w):
        raise ManifestError(f"{manifest}: images are {side}, config expects {(cfg.model.image_h, cfg.model.image_w)}")
    return samples


def _run_training(cfg: RunConfig, samples, log=None):
    tr, ev = split_dataset(samples, cfg.train.train_fraction, np.random.default_rng(cfg.train.seed))
    params = init_params(cfg.model, np.random.default_rng(cfg.train.seed))
    result = train(params, tr, None, cfg.model, cfg.loss, cfg.train, log=log)
    report = evaluate(params, ev, cfg.model, cfg.train.threshold)
    return result, report


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = generate_synthetic(cfg.synth, args.count)
    for s in samples:
        s.image_path = f"images/{s.id}.png"
        save_png(s.image, out / s.image_path)
    manifest = out / "manifest.jsonl"
    write_manifest(samples, manifest)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.ablate:
        apply_ablation(cfg, args.ablate)
    samples = _load_samples(args.manifest, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result, report = _run_training(cfg, samples, log=lambda m: print(m, file=sys.stderr))
    write_checkpoint(out / "checkpoint.parf", result.params, cfg.to_dict())
    write_train_csv(result.records, out / "train.csv")
    write_report_csv(report, out / "report.csv")
    if args.per_attribute:
        write_per_attribute_csv(report, out / "per_attribute.csv")
    print(f"mA={report.mA:.6f} accu={report.accu:.6f} f1={report.f1:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    header, params = read_checkpoint(args.checkpoint)
    try:
        cfg = RunConfig.from_dict(header)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{args.checkpoint}: unusable config header ({exc})") from None
    samples = _load_samples(args.manifest, cfg)
    if args.split == "heldout":
        _, samples = split_dataset(samples, cfg.train.train_fraction, np.random.default_rng(cfg.train.seed))
    report = evaluate(params, samples, cfg.model, cfg.train.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out / "report.csv")
    if args.per_attribute:
        write_per_attribute_csv(report, out / "per_attribute.csv")
    print(f"mA={report.mA:.6f} accu={report.accu:.6f} f1={report.f1:.6f}")
    return EXIT_OK


def _report_row(report: MetricsReport) -> list[str]:
    return [repr(float(v)) for v in report.row()]


def _ablation_table(base: RunConfig, samples, seeds, methods, path: Path) -> None:
    rows, per_method = [], {}
    for name in methods:
        row_no = ABLATION_NAMES.index(name) + 1
        for seed in seeds:
            cfg = RunConfig.from_dict(base.to_dict())
            cfg.train.seed = seed
            apply_ablation(cfg, name)
            _, report = _run_training(cfg, samples)
            per_method.setdefault(name, []).append(report)
            rows.append([row_no, name, seed, *_report_row(report)])
            print(f"row {row_no} {name} seed {seed} mA={report.mA:.4f}", file=sys.stderr)
    for name in methods:
        reports = per_method[name]
        medians = [statistics.median(r.row()[i] for r in reports) for i in range(5)]
        rows.append([ABLATION_NAMES.index(name) + 1, name, "median", *(repr(float(m)) for m in medians)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        w.writerows(rows)


def _parse_sweep(text: str) -> tuple[str, list[str]]:
    key, sep, values = text.partition("=")
    key = SWEEP_KEYS.get(key.strip(), key.strip())
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not sep or not vals:
        raise ConfigError(f"--sweep expects key=v1,v2,..., got {text!r}")
    return key, vals


def cmd_ablate(args) -> int:
    base = _load_run_config(args)
    samples = _load_samples(args.manifest, base)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.train.seed]
    methods = args.methods.split(",") if args.methods else list(ABLATION_NAMES)
    for m in methods:
        if m not in ABLATION_NAMES:
            raise ConfigError(f"unknown ablation {m!r}; expected one of {ABLATION_NAMES}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.sweep:
        _ablation_table(base, samples, seeds, methods, out / "ablation.csv")
        print(out / "ablation.csv")
        return EXIT_OK
    for spec in args.sweep:
        key, values = _parse_sweep(spec)
        path = out / f"sweep_{key.replace('.', '_')}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value", "seed", "mA", "accu", "prec", "recall", "f1"])
            for value in values:
                for seed in seeds:
                    cfg = RunConfig.from_dict(base.to_dict())
                    cfg.set(key, value)
                    cfg.train.seed = seed
                    cfg.validate()
                    _, report = _run_training(cfg, samples)
                    w.writerow([key, value, seed, *_report_row(report)])
        print(path)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_run_config(args)
    rng = np.random.default_rng(cfg.train.seed)
    params = init_params(cfg.model, rng, dtype=torch.float64)
    # a nonzero head so the backbone receives gradient through the attribute branch
    with torch.no_grad():
        params["attr_head.weight"].normal_(0.0, 0.02, generator=torch.Generator().manual_seed(cfg.train.seed))
    samples = generate_synthetic(cfg.synth, args.batch)
    images, attrs, views = stack_batch(samples)
    h, w = cfg.model.stage_grid(3)
    plan = sample_mask_plan(h, w, cfg.train.mask_ratio, rng) if cfg.train.mask_ratio > 0 else None
    report = gradcheck(
        params, torch.from_numpy(images), torch.from_numpy(attrs), torch.from_numpy(views),
        cfg.model, cfg.loss, plan, rng, coords_per_group=args.coords, tolerance=args.tolerance,
    )
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="parformer", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="key=value config file (defaults to the toy preset)")
        p.add_argument("--seed", type=int, help="overrides train.seed and synth.seed")
        if manifest:
            p.add_argument("--manifest", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p, manifest=False)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and write checkpoint, training log and held-out report")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", choices=ABLATION_NAMES)
    p.add_argument("--per-attribute", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("heldout", "all"), default="heldout")
    p.add_argument("--per-attribute", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation matrix or a hyperparameter sweep")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(ABLATION_NAMES)}")
    p.add_argument("--sweep", action="append", help="key=v1,v2,...; one CSV per key")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="compare autograd with finite differences")
    common(p, manifest=False)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--coords", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (ConfigError, ManifestError, ContractError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
