"""Command-line entry point: synth / train / eval / decompose / count / gradcheck.

Configuration comes from a TOML file ([model], [train], [synth] tables) with
flag overrides; every command serializes its resolved configuration next to
its outputs so runs are reproducible from the output directory alone. Errors
leave a machine-readable JSON line on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_ABLATIONS = {
    "single_scale": ("mode", "single_scale"),
    "bn": ("norm", "batchnorm"),
    "nonorm": ("norm", "none"),
    "reg_count": ("head", "reg_count"),
}


def _apply_thread_cap() -> None:
    """DYDEC_THREADS caps BLAS/OpenMP parallelism; must run before numpy loads."""
    cap = os.environ.get("DYDEC_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _load_toml(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _build_dataclass(cls, table: dict, overrides: dict):
    from dataclasses import fields

    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = {**table, **{k: v for k, v in overrides.items() if v is not None}}
    return cls(**merged)


def _model_config(config: dict, args) -> "object":
    from .model import ModelConfig

    table = dict(config.get("model", {}))
    if "backbone_plan" in table:
        table["backbone_plan"] = tuple(
            (None if s in (0, None) else int(s), int(c)) for s, c in table["backbone_plan"]
        )
    if "downsample_depths" in table:
        table["downsample_depths"] = tuple(table["downsample_depths"])
    overrides = {"seed": getattr(args, "seed", None)}
    for name in _ablation_overrides(getattr(args, "ablate", None)):
        overrides[name[0]] = name[1]
    return _build_dataclass(ModelConfig, table, overrides)


def _ablation_overrides(spec: str | None):
    if not spec:
        return []
    out = []
    for token in spec.split(","):
        token = token.strip()
        if token not in _ABLATIONS:
            raise ValueError(f"unknown ablation {token!r}, expected one of {sorted(_ABLATIONS)}")
        out.append(_ABLATIONS[token])
    return out


def _train_config(config: dict, args):
    from .train import TrainConfig

    return _build_dataclass(
        TrainConfig, dict(config.get("train", {})), {"seed": getattr(args, "seed", None)}
    )


def _synth_config(config: dict, args):
    from .synth import SnrSpec, SynthConfig

    table = dict(config.get("synth", {}))
    if "quotas" in table:
        table["quotas"] = {int(k): int(v) for k, v in table["quotas"].items()}
    if "snr" in table:
        snr = dict(table["snr"])
        for key in ("means_db", "weights"):
            if key in snr:
                snr[key] = tuple(snr[key])
        table["snr"] = SnrSpec(**snr)
    for key in ("area", "mic"):
        if key in table:
            table[key] = tuple(table[key])
    return _build_dataclass(SynthConfig, table, {"seed": getattr(args, "seed", None)})


def _write_resolved(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n"
    )


def _require_exists(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"path does not exist: {p}")


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    from .synth import generate_dataset

    _require_exists(args.config)
    config = _synth_config(_load_toml(args.config), args)
    out_dir = Path(args.out)
    manifest = generate_dataset(config, out_dir)
    _write_resolved(out_dir, {"command": "synth", "synth": config.to_jsonable()})
    print(json.dumps({"out": str(out_dir), "n_clips": manifest["n_clips"]}))
    return 0


def cmd_train(args) -> int:
    from .model import DyDecModel
    from .report import plot_history
    from .train import load_clip_dataset, train_loop

    _require_exists(args.config, args.data)
    raw = _load_toml(args.config)
    model_cfg = _model_config(raw, args)
    train_cfg = _train_config(raw, args)
    model = DyDecModel.build(model_cfg)

    dataset_dir = Path(args.data)
    dataset = load_clip_dataset(dataset_dir, _dataset_frames(model, dataset_dir))
    out_dir = Path(args.out)
    trainer, history = train_loop(
        model, dataset, train_cfg, out_dir=out_dir, max_steps=args.max_steps
    )
    plot_history(history, out_dir / "history.png")
    _write_resolved(
        out_dir,
        {
            "command": "train",
            "data": str(dataset_dir),
            "model": model_cfg.to_jsonable(),
            "train": train_cfg.to_jsonable(),
            "max_steps": args.max_steps,
        },
    )
    final = history[-1] if history else {}
    print(
        json.dumps(
            {
                "out": str(out_dir),
                "steps": trainer.step,
                "final_loss": final.get("loss"),
                "best_mae": None if trainer.best_params is None else trainer.best_mae,
            }
        )
    )
    return 0


def _dataset_frames(model, dataset_dir: Path) -> int:
    from .audio import read_wav
    from .counting import read_labels_jsonl

    records = read_labels_jsonl(dataset_dir / "labels.jsonl")
    if not records:
        raise ValueError(f"{dataset_dir}: empty labels.jsonl")
    clip = read_wav(dataset_dir / f"{records[0]['clip_id']}.wav")
    return model.output_frames(len(clip))


def cmd_eval(args) -> int:
    from .counting import read_labels_jsonl
    from .metrics import STRATA_KEYS, clip_difficulty, stratified_report
    from .report import plot_stratified_report

    strata_key = {
        "max": "max_polyp",
        "ratio": "ratio_polyp",
        "mean": "mean_polyp",
    }.get(args.stratify, args.stratify)
    if strata_key not in STRATA_KEYS:
        raise ValueError(f"--stratify must be one of max|ratio|mean, got {args.stratify!r}")

    if args.pred is not None:
        _require_exists(args.pred, args.labels)
        label_records = read_labels_jsonl(args.labels)
        with open(args.pred) as fh:
            preds = {
                rec["clip_id"]: float(rec["count"])
                for rec in (json.loads(line) for line in fh if line.strip())
            }
        missing = [r["clip_id"] for r in label_records if r["clip_id"] not in preds]
        if missing:
            raise ValueError(f"predictions missing for clips: {missing[:5]}")
    else:
        _require_exists(args.checkpoint, args.data)
        label_records = read_labels_jsonl(Path(args.data) / "labels.jsonl")
        preds = _predict_dataset(args.checkpoint, Path(args.data), label_records)

    records = []
    for rec in label_records:
        difficulty = clip_difficulty(rec["events"], rec["duration_s"])
        records.append(
            {
                "clip_id": rec["clip_id"],
                "y": float(len(rec["events"])),
                "y_hat": preds[rec["clip_id"]],
                **difficulty,
            }
        )
    report = stratified_report(records, strata_key)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(out_dir / "report.csv", out_dir / "report.json")
    plot_stratified_report(report, out_dir / f"report_{strata_key}.png")
    with open(out_dir / "predictions.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps({"clip_id": rec["clip_id"], "count": rec["y_hat"]}) + "\n")
    _write_resolved(
        out_dir,
        {
            "command": "eval",
            "stratify": strata_key,
            "pred": args.pred,
            "labels": args.labels,
            "checkpoint": args.checkpoint,
            "data": args.data,
        },
    )
    print(json.dumps({"out": str(out_dir), **report.global_metrics}))
    return 0


def _predict_dataset(checkpoint: str, data_dir: Path, label_records: list) -> dict:
    import numpy as np

    from .audio import read_wav
    from .train import load_checkpoint, predict_counts

    model, _ = load_checkpoint(checkpoint)
    clips = np.stack(
        [read_wav(data_dir / f"{rec['clip_id']}.wav").samples for rec in label_records]
    )
    counts = predict_counts(model, clips)
    return {rec["clip_id"]: float(c) for rec, c in zip(label_records, counts)}


def cmd_decompose(args) -> int:
    from .audio import read_wav
    from .frontend import decompose
    from .report import plot_tf_map

    _require_exists(args.wav, args.checkpoint, args.config)
    if args.checkpoint is not None:
        from .train import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)
        tree = model.tree
        mode = model.config.mode
    else:
        from .model import DyDecModel

        model = DyDecModel.build(_model_config(_load_toml(args.config), args))
        tree = model.tree
        mode = model.config.mode
    clip = read_wav(args.wav)
    tf = decompose(clip, tree, mode=mode)

    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    matrix_path = prefix.with_suffix(".bin")
    tf.values.astype("<f8").tofile(matrix_path)
    header = {
        "bins": tf.bins,
        "frames": tf.frames,
        "frame_rate": tf.frame_rate,
        "dtype": "<f8",
        "order": "row-major [bins, frames], rows low to high frequency",
        "source_wav": str(args.wav),
    }
    prefix.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    plot_tf_map(tf, prefix.with_suffix(".png"), title=Path(args.wav).name)
    print(json.dumps({"matrix": str(matrix_path), "bins": tf.bins, "frames": tf.frames}))
    return 0


def cmd_count(args) -> int:
    from .audio import read_wav
    from .train import load_checkpoint, predict_counts

    _require_exists(args.checkpoint, args.wav)
    model, _ = load_checkpoint(args.checkpoint)
    clip = read_wav(args.wav)
    count = float(predict_counts(model, clip.samples[None, :])[0])
    print(f"{count:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .train import gradient_check_suite

    rows = gradient_check_suite(seed=args.seed if args.seed is not None else 0)
    width = max(len(r["check"]) for r in rows)
    for row in rows:
        status = "pass" if row["pass"] else "FAIL"
        print(f"{row['check']:<{width}}  rel_err={row['rel_err']:.3e}  tol={row['tol']:.0e}  {status}")
    failures = sum(1 for r in rows if not r["pass"])
    print(f"{len(rows) - failures}/{len(rows)} gradient checks passed")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dydec",
        description="Trainable dyadic-decomposition sound counting toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="TOML config with a [synth] table")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True, help="TOML config ([model], [train])")
    p.add_argument("--data", required=True, help="dataset directory from `dydec synth`")
    p.add_argument("--out", required=True, help="output directory for checkpoints/history")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--ablate", default=None, help="comma list: single_scale,bn,nonorm,reg_count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="stratified counting report")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="dataset directory (wavs + labels.jsonl)")
    p.add_argument("--pred", default=None, help="predictions JSONL {clip_id, count}")
    p.add_argument("--labels", default=None, help="labels JSONL (with --pred)")
    p.add_argument("--out", required=True)
    p.add_argument("--stratify", default="max", help="max | ratio | mean")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decompose", help="dump a clip's time-frequency map")
    p.add_argument("--wav", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None, help="TOML [model] table for a fresh tree")
    p.add_argument("--out", required=True, help="output prefix (.bin/.json/.png)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablate", default=None)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("count", help="print the predicted count for one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: report and exit nonzero
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
