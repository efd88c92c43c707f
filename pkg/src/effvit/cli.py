"""Command-line surface: synth, extract, train, kfold, evaluate,
param-count, grad-check, export-features.

Any schema key can be overridden on the command line as `--key value`
(e.g. `--lora.rank 4 --train.lr 0`).  Every run directory receives the
fully resolved config; artifacts are CSV/plain text.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import data as datamod
from .config import ConfigValidationError, RunConfig, parse_config_file
from .configs import TrainConfig
from .evaluation import (
    cm_csv_lines,
    evaluate,
    export_features,
    format_metrics_row,
    kfold_evaluate,
    report_csv_lines,
    write_features_csv,
    write_lines,
)
from .gradcheck import grad_check, model_loss_closure, randomize_trainable
from .hybrid import build_model
from .lora import count_frozen, count_trainable
from .nifti import NiftiParseError, read_nifti
from .training import history_csv_lines, load_checkpoint, save_checkpoint, train


def _run_dir(root: Path, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"run-{stamp}-seed{seed}"
    path, i = base, 0
    while path.exists():  # never overwrite an existing run
        i += 1
        path = Path(f"{base}-{i}")
    path.mkdir(parents=True)
    return path


def _load_run_config(args, overrides: list[str]) -> RunConfig:
    raw = parse_config_file(args.config) if getattr(args, "config", None) else {}
    raw.update(_parse_overrides(overrides))
    for attr, key in (("model", "model"), ("seed", "seed")):
        v = getattr(args, attr, None)
        if v is not None:
            raw[key] = str(v)
    return RunConfig(raw)


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    errors = []
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            errors.append(f"unexpected argument {tok!r}")
            i += 1
            continue
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 1
        else:
            errors.append(f"missing value for override {tok!r}")
            i += 1
            continue
        out[key] = value
        i += 1
    if errors:
        raise ConfigValidationError(errors)
    return out


def _subject_list(samples) -> list[tuple[str, str]]:
    return sorted({(s.subject_id, s.label) for s in samples})


# -- subcommands -----------------------------------------------------------


def cmd_synth(args, overrides) -> int:
    samples = datamod.synth_generate(args.n, args.seed, args.size)
    manifest = datamod.write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples ({len(samples) // 3 if samples else 0} per class) "
          f"to {manifest}")
    return 0


def cmd_extract(args, overrides) -> int:
    rows = []
    import csv

    with open(args.labels, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    samples, failures = [], []
    for row in rows:
        path = Path(row["path"])
        try:
            vol = read_nifti(path.read_bytes())
            vol = datamod.pad_volume(vol, target=args.target)
            vol = datamod.normalize_volume(vol)
            samples.extend(
                datamod.extract_slices(vol, row["subject_id"], row["label"], n=args.n_slices)
            )
        except (OSError, NiftiParseError, datamod.PipelineError) as e:
            failures.append(f"{path}: {e}")
    manifest = datamod.write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {manifest}")
    if failures:
        print("failures:", file=sys.stderr)
        for line in failures:
            print(f"  {line}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args, overrides) -> int:
    cfg = _load_run_config(args, overrides)
    dataset = datamod.load_dataset(args.data)
    if cfg["data.balance"]:
        dataset = datamod.balance_augment(dataset, "AD", cfg["seed"])
    run_dir = _run_dir(Path(args.out), cfg["seed"])
    write_lines(run_dir / "config.txt", cfg.echo_lines())
    plan = datamod.make_holdout_split(
        _subject_list(dataset), ratio=cfg["data.split_ratio"], seed=cfg["seed"]
    )
    model = build_model(cfg.model_config(), seed=cfg["seed"])
    history = train(
        model,
        dataset,
        (plan.assignments["train"], plan.assignments["val"]),
        cfg.train_config(),
        checkpoint_path=run_dir / "best.evlc",
        config_echo={"config": cfg.echo_dict()},
    )
    write_lines(run_dir / "history.csv", history_csv_lines(history))
    val = set(plan.assignments["val"])
    report = evaluate(model, [s for s in dataset if s.subject_id in val])
    write_lines(run_dir / "report.csv", report_csv_lines([(cfg["model"], report)]))
    write_lines(run_dir / "confusion.csv", cm_csv_lines(report.cm))
    print(f"run dir: {run_dir}")
    print(f"final val: {format_metrics_row(report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1)}")
    return 0


def cmd_kfold(args, overrides) -> int:
    cfg = _load_run_config(args, overrides)
    dataset = datamod.load_dataset(args.data)
    if cfg["data.balance"]:
        dataset = datamod.balance_augment(dataset, "AD", cfg["seed"])
    run_dir = _run_dir(Path(args.out), cfg["seed"])
    write_lines(run_dir / "config.txt", cfg.echo_lines())
    k = args.k if args.k is not None else cfg["data.kfold_k"]

    def factory(fold: int):
        return build_model(cfg.model_config(), seed=cfg["seed"] + fold)

    reports, averaged = kfold_evaluate(
        factory, dataset, k=k, seed=cfg["seed"], train_cfg=cfg.train_config()
    )
    rows = [(f"fold{i}", r) for i, r in enumerate(reports)] + [("averaged", averaged)]
    write_lines(run_dir / "kfold_report.csv", report_csv_lines(rows))
    print(f"run dir: {run_dir}")
    print("averaged:", format_metrics_row(
        averaged["accuracy"], averaged["macro_precision"],
        averaged["macro_recall"], averaged["macro_f1"]))
    return 0


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    cfg = RunConfig(ckpt.meta.get("config", {}))
    model = build_model(cfg.model_config(), seed=cfg["seed"])
    ckpt.restore_params(model.registry())
    ckpt.restore_buffers(model)
    return model, cfg


def cmd_evaluate(args, overrides) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint)
    dataset = datamod.load_dataset(args.data)
    report = evaluate(model, dataset)
    lines = report_csv_lines([(cfg["model"], report)])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_lines(out / "report.csv", lines)
        write_lines(out / "confusion.csv", cm_csv_lines(report.cm))
    for line in lines:
        print(line)
    return 0


def cmd_param_count(args, overrides) -> int:
    cfg = _load_run_config(args, overrides)
    mc = cfg.model_config()
    trainable = count_trainable(mc)
    frozen = count_frozen(mc)
    for key in ("lora", "head", "bridge"):
        print(f"trainable.{key} = {trainable[key]}")
    print(f"trainable.total = {trainable['total']}")
    for key in ("vit_base", "backbone"):
        print(f"frozen.{key} = {frozen[key]}")
    print(f"frozen.total = {frozen['total']}")
    return 0


def cmd_grad_check(args, overrides) -> int:
    cfg = _load_run_config(args, overrides)
    model = build_model(cfg.model_config(), seed=cfg["seed"])
    params = model.registry()
    randomize_trainable(params, seed=cfg["seed"] + 7)
    probe = datamod.synth_generate(1, seed=cfg["seed"], size=cfg["vit.image_size"])
    images = np.stack([s.image for s in probe])
    labels = [s.label_index for s in probe]
    loss_fn = model_loss_closure(model, images, labels, sabotage=args.sabotage)
    result = grad_check(loss_fn, params, tolerance=args.tolerance)
    for line in result.lines():
        print(line)
    print("PASS" if result.passed else "FAIL")
    return 0 if result.passed else 1


def cmd_export_features(args, overrides) -> int:
    model, _ = _model_from_checkpoint(args.checkpoint)
    dataset = datamod.load_dataset(args.data)
    rows = export_features(model, dataset, args.layer)
    write_features_csv(args.out, rows)
    print(f"wrote {len(rows)} feature rows to {args.out}")
    return 0


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="effvit",
        description="Hybrid CNN+ViT with low-rank adapters: training and "
        "evaluation harness on a numpy autodiff core.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic 3-class dataset")
    p.add_argument("--n", type=int, required=True, help="samples per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="slice NIfTI volumes into samples")
    p.add_argument("--labels", required=True, help="CSV of subject_id,label,path")
    p.add_argument("--out", required=True)
    p.add_argument("--n-slices", type=int, default=4)
    p.add_argument("--target", type=int, default=224, help="padded volume extent")
    p.set_defaults(func=cmd_extract)

    for name, func in (("train", cmd_train), ("kfold", cmd_kfold)):
        p = sub.add_parser(name, help=f"{name} a model on a manifest dataset")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--data", required=True, help="manifest.csv path")
        p.add_argument("--out", required=True, help="root for run directories")
        p.add_argument("--model", choices=("vitlora", "effnet", "hybrid"))
        p.add_argument("--seed", type=int)
        if name == "kfold":
            p.add_argument("--k", type=int, help="fold count (default from config)")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("param-count", help="trainable/frozen parameter breakdown")
    p.add_argument("--config")
    p.add_argument("--model", choices=("vitlora", "effnet", "hybrid"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--config")
    p.add_argument("--model", choices=("vitlora", "effnet", "hybrid"))
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--sabotage", action="store_true",
                   help="corrupt a backward rule to prove the check bites")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-features", help="dump feature vectors as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", choices=("cls", "tap", "bridged"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if extra and args.func in (cmd_synth, cmd_extract, cmd_evaluate, cmd_export_features):
            raise ConfigValidationError([f"unexpected argument {t!r}" for t in extra])
        return args.func(args, extra)
    except ConfigValidationError as e:
        print(e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
