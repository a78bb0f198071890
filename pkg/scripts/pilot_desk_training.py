"""Pilot for the desk-scale learning criteria: run before freezing thresholds.

Generates the fixed 64-clip desk dataset, trains the full model and the three
ablation variants for a handful of seeds, and prints MAE trajectories.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from dydec.model import DyDecModel, ModelConfig
from dydec.synth import SnrSpec, SynthConfig, generate_dataset
from dydec.train import TrainConfig, Trainer, load_clip_dataset, predict_counts

DESK_DATASET = SynthConfig(
    quotas={1: 16, 2: 16, 3: 16, 4: 16},
    classes=[0],
    seed=20250810,
    duration_s=2.0,
    sample_rate=24000,
    max_events=6,
    snr=SnrSpec(mode="none"),
)

DESK_MODEL = ModelConfig(
    depth=6,
    band_top=12000.0,
    kernel_len=65,
    base_sample_rate=24000.0,
    backbone_plan=((5, 48), (5, 64), (3, 48), (None, 32)),
    lowpass_len=15,
)

DESK_TRAIN = TrainConfig(
    learning_rate=1e-3,
    epochs=10_000,
    batch_size=8,
    eval_every_steps=50,
    val_fraction=0.0,
)


def train_mae(model, dataset) -> float:
    pred = predict_counts(model, dataset.clips)
    return float(np.mean(np.abs(pred - dataset.counts)))


def run_one(dataset, seed: int, steps: int, variant: dict | None = None) -> dict:
    model_cfg = ModelConfig(**{**DESK_MODEL.__dict__, "seed": seed, **(variant or {})})
    train_cfg = TrainConfig(**{**DESK_TRAIN.__dict__, "seed": seed})
    model = DyDecModel.build(model_cfg)
    untrained = train_mae(model, dataset)
    trainer = Trainer(model, train_cfg)
    t0 = time.perf_counter()
    history = trainer.run(dataset, max_steps=steps)
    wall = time.perf_counter() - t0
    final = train_mae(model, dataset)
    traj = [(row["step"], row["train_mae"]) for row in history if "train_mae" in row]
    return {
        "seed": seed,
        "variant": variant or {},
        "untrained_mae": untrained,
        "final_mae": final,
        "trajectory": traj,
        "wall_s": wall,
    }


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="/tmp/desk_pilot")
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument(
        "--variant", default=None, choices=[None, "single_scale", "nonorm", "reg_count"]
    )
    args = parser.parse_args()

    out = Path(args.out)
    data_dir = out / "data"
    if not (data_dir / "manifest.json").exists():
        generate_dataset(DESK_DATASET, data_dir)
    probe = DyDecModel.build(DESK_MODEL)
    dataset = load_clip_dataset(data_dir, probe.output_frames(48000))
    print(f"dataset counts: {dataset.counts.astype(int).tolist()}")

    variant = {
        None: None,
        "single_scale": {"mode": "single_scale"},
        "nonorm": {"norm": "none"},
        "reg_count": {"head": "reg_count"},
    }[args.variant]

    for seed in args.seeds:
        result = run_one(dataset, seed, args.steps, variant)
        tag = args.variant or "full"
        print(
            f"[{tag} seed {seed}] untrained={result['untrained_mae']:.3f} "
            f"final={result['final_mae']:.3f} wall={result['wall_s']:.0f}s"
        )
        print("  trajectory:", [(s, round(m, 3)) for s, m in result["trajectory"]])
        (out / f"pilot_{tag}_{seed}.json").write_text(json.dumps(result))


if __name__ == "__main__":
    main()
