"""Optimization loop tying the front-end, backbone and counting loss together."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff
from .audio import read_wav
from .autodiff import GradTape, Var
from .counting import make_density_target, read_labels_jsonl
from .egnorm import EgNormParams, eg_normalize, eg_normalize_vjp
from .filterbank import SincBandPass, kernel_cutoff_gradients, materialize_kernel
from .model import DyDecModel, ModelConfig


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    decay_factor: float = 0.5
    decay_every_epochs: int = 20
    epochs: int = 60
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.0
    eval_every_steps: int = 25

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config: {self}")

    def to_jsonable(self) -> dict:
        return asdict(self)


def lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    """Stepwise decay: halve (decay_factor) every decay_every_epochs epochs."""
    return config.learning_rate * config.decay_factor ** (epoch // config.decay_every_epochs)


# ---------------------------------------------------------------------------
# Dataset container


@dataclass
class ClipDataset:
    clips: np.ndarray  # [n, samples]
    counts: np.ndarray  # [n]
    densities: np.ndarray  # [n, frames]
    clip_ids: list[str]
    sample_rate: int
    duration_s: float


def load_clip_dataset(dataset_dir: str | Path, output_frames: int) -> ClipDataset:
    """Load a generated dataset directory into memory with density targets."""
    dataset_dir = Path(dataset_dir)
    records = read_labels_jsonl(dataset_dir / "labels.jsonl")
    clips, counts, densities, ids = [], [], [], []
    rate = None
    duration = None
    for rec in records:
        clip = read_wav(dataset_dir / f"{rec['clip_id']}.wav")
        rate = clip.sample_rate
        duration = rec["duration_s"]
        target = make_density_target(rec["events"], output_frames, duration)
        clips.append(clip.samples)
        counts.append(len(rec["events"]))
        densities.append(target.values)
        ids.append(rec["clip_id"])
    return ClipDataset(
        clips=np.stack(clips),
        counts=np.array(counts, dtype=np.float64),
        densities=np.stack(densities),
        clip_ids=ids,
        sample_rate=rate,
        duration_s=duration,
    )


# ---------------------------------------------------------------------------
# Loss and gradients


def forward_backward(
    model: DyDecModel,
    batch_clips: np.ndarray,
    batch_densities: np.ndarray,
    batch_counts: np.ndarray,
    frozen_frontend: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """One traced forward pass and full backward sweep.

    Returns (loss, gradients keyed by parameter name). The loss is the mean
    per-clip density MSE, or the squared count error under the reg_count head.
    """
    tape = GradTape()
    scores = model.forward(tape, batch_clips, training=True, frozen_frontend=frozen_frontend)
    if model.config.head == "reg_count":
        counts = model.head_counts(tape, scores)
        loss_var = autodiff.mse(tape, counts, np.asarray(batch_counts, dtype=np.float64))
    else:
        loss_var = autodiff.mse(tape, scores, np.asarray(batch_densities, dtype=np.float64))
    loss = float(loss_var.data)
    if not np.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss {loss} (batch of {batch_clips.shape[0]}, "
            f"head={model.config.head}, norm={model.config.norm})"
        )
    tape.backward(loss_var)
    return loss, model.collect_gradients()


def predict_counts(model: DyDecModel, clips: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Predicted per-clip counts with no gradient tracking."""
    out = []
    for lo in range(0, clips.shape[0], batch_size):
        chunk = clips[lo : lo + batch_size]
        scores = model.forward(None, chunk, training=False, trainable=False)
        out.append(model.head_counts(None, scores).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
    lr: float | None = None,
) -> dict[str, np.ndarray]:
    """Standard Adam update; returns the new parameter values.

    State moments are created lazily and updated in place; the caller applies
    the returned values (and any feasibility clamps) to the model.
    """
    lr = config.learning_rate if lr is None else lr
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    updated = {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g**2
        m_hat = m / (1.0 - b1**state.t)
        v_hat = v / (1.0 - b2**state.t)
        updated[name] = np.asarray(value, dtype=np.float64) - lr * m_hat / (
            np.sqrt(v_hat) + config.eps
        )
    return updated


# ---------------------------------------------------------------------------
# Training loop with checkpoint/resume


class Trainer:
    """Owns optimizer state, the shuffle RNG, and the step/epoch counters."""

    def __init__(self, model: DyDecModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.adam = AdamState()
        self.rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x5EED)))
        self.step = 0
        self.epoch = 0
        self._epoch_order: list[int] = []
        self.history: list[dict] = []
        self.best_mae = np.inf
        self.best_params: dict[str, np.ndarray] | None = None

    def _next_batch(self, n_train: int) -> np.ndarray:
        batch = self.config.batch_size
        if not self._epoch_order:
            self._epoch_order = list(self.rng.permutation(n_train))
        take = [self._epoch_order.pop(0) for _ in range(min(batch, len(self._epoch_order)))]
        if not self._epoch_order:
            self.epoch += 1
        return np.array(take)

    def run(
        self,
        dataset: ClipDataset,
        max_steps: int | None = None,
        eval_hook=None,
    ) -> list[dict]:
        """Train until the epoch budget (or max_steps) is exhausted."""
        cfg = self.config
        n = dataset.clips.shape[0]
        n_val = int(round(cfg.val_fraction * n))
        # Deterministic split: validation takes the tail of a seeded permutation.
        split_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x51)))
        order = split_rng.permutation(n)
        train_idx, val_idx = order[: n - n_val], order[n - n_val :]

        while self.epoch < cfg.epochs:
            if max_steps is not None and self.step >= max_steps:
                break
            lr = lr_for_epoch(cfg, self.epoch)  # epoch of the batch about to run
            idx = train_idx[self._next_batch(len(train_idx))]
            loss, grads = forward_backward(
                self.model,
                dataset.clips[idx],
                dataset.densities[idx],
                dataset.counts[idx],
            )
            new_params = adam_step(self.model.parameters(), grads, self.adam, cfg, lr=lr)
            self.model.load_parameters(new_params)
            self.model.apply_constraints()
            self.step += 1

            row = {"step": self.step, "epoch": self.epoch, "lr": lr, "loss": loss}
            if cfg.eval_every_steps and self.step % cfg.eval_every_steps == 0:
                pred = predict_counts(self.model, dataset.clips[train_idx])
                row["train_mae"] = float(np.mean(np.abs(pred - dataset.counts[train_idx])))
                monitor = row["train_mae"]
                if len(val_idx):
                    pred_val = predict_counts(self.model, dataset.clips[val_idx])
                    row["val_mae"] = float(np.mean(np.abs(pred_val - dataset.counts[val_idx])))
                    monitor = row["val_mae"]
                if monitor < self.best_mae:
                    self.best_mae = monitor
                    self.best_params = {
                        k: np.array(v, copy=True) for k, v in self.model.parameters().items()
                    }
                if eval_hook is not None:
                    eval_hook(row)
            self.history.append(row)
        return self.history

    # -- persistence -----------------------------------------------------------

    def state_payload(self) -> dict:
        rng_state = self.rng.bit_generator.state
        return {
            "step": self.step,
            "epoch": self.epoch,
            "epoch_order": list(map(int, self._epoch_order)),
            "rng_state": rng_state,
            "best_mae": None if not np.isfinite(self.best_mae) else self.best_mae,
        }

    def restore_state(self, payload: dict) -> None:
        self.step = payload["step"]
        self.epoch = payload["epoch"]
        self._epoch_order = list(payload["epoch_order"])
        self.rng.bit_generator.state = payload["rng_state"]
        if payload.get("best_mae") is not None:
            self.best_mae = payload["best_mae"]


def save_checkpoint(path: str | Path, model: DyDecModel, trainer: Trainer | None = None) -> None:
    """Single-file checkpoint: parameters, optimizer state, configs, RNG state."""
    arrays: dict[str, np.ndarray] = {}
    for name, value in model.parameters().items():
        arrays[f"param:{name}"] = np.asarray(value, dtype=np.float64)
    meta = {
        "model_config": model.config.to_jsonable(),
        "train_config": trainer.config.to_jsonable() if trainer else None,
        "trainer_state": trainer.state_payload() if trainer else None,
        "bn_state": (
            None
            if model.bn_state is None
            else {
                "momentum": model.bn_state.momentum,
                "mean": {f"{d},{i}": v for (d, i), v in model.bn_state.mean.items()},
                "var": {f"{d},{i}": v for (d, i), v in model.bn_state.var.items()},
            }
        ),
    }
    if trainer is not None:
        for name, m in trainer.adam.m.items():
            arrays[f"adam_m:{name}"] = m
        for name, v in trainer.adam.v.items():
            arrays[f"adam_v:{name}"] = v
        arrays["adam_t"] = np.asarray(trainer.adam.t)
    arrays["meta_json"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[DyDecModel, Trainer | None]:
    """Rebuild a model (and trainer, when present) from a checkpoint file."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta_json"]))
        model = DyDecModel.build(ModelConfig.from_jsonable(meta["model_config"]))
        model.load_parameters(
            {
                key[len("param:") :]: data[key]
                for key in data.files
                if key.startswith("param:")
            }
        )
        if meta["bn_state"] is not None and model.bn_state is not None:
            model.bn_state.momentum = meta["bn_state"]["momentum"]
            for key, value in meta["bn_state"]["mean"].items():
                d, i = map(int, key.split(","))
                model.bn_state.mean[(d, i)] = value
            for key, value in meta["bn_state"]["var"].items():
                d, i = map(int, key.split(","))
                model.bn_state.var[(d, i)] = value
        trainer = None
        if meta["train_config"] is not None:
            trainer = Trainer(model, TrainConfig(**meta["train_config"]))
            trainer.restore_state(meta["trainer_state"])
            trainer.adam.t = int(data["adam_t"])
            for key in data.files:
                if key.startswith("adam_m:"):
                    trainer.adam.m[key[len("adam_m:") :]] = data[key]
                elif key.startswith("adam_v:"):
                    trainer.adam.v[key[len("adam_v:") :]] = data[key]
    return model, trainer


def write_history_csv(path: str | Path, history: list[dict]) -> None:
    fields = ["step", "epoch", "lr", "loss", "train_mae", "val_mae"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in fields})


def train_loop(
    model: DyDecModel,
    dataset: ClipDataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    max_steps: int | None = None,
) -> tuple[Trainer, list[dict]]:
    """Train, then write history and best/final checkpoints when out_dir is set."""
    trainer = Trainer(model, config)
    history = trainer.run(dataset, max_steps=max_steps)
    if out_dir is not None:
        from .filterbank import save_tree

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_history_csv(out_dir / "history.csv", history)
        save_checkpoint(out_dir / "checkpoint_final.npz", model, trainer)
        save_tree(out_dir / "tree_final.bin", model.tree)
        if trainer.best_params is not None:
            final = {k: np.array(v, copy=True) for k, v in model.parameters().items()}
            model.load_parameters(trainer.best_params)
            save_checkpoint(out_dir / "checkpoint_best.npz", model, trainer)
            model.load_parameters(final)
        else:
            save_checkpoint(out_dir / "checkpoint_best.npz", model, trainer)
    return trainer, history


# ---------------------------------------------------------------------------
# Gradient checking


def _rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / scale


def _vector_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def kernel_gradient_check(rng: np.random.Generator) -> list[dict]:
    """Analytic kernel cutoff gradients vs central differences (vector norm)."""
    rows = []
    for trial in range(3):
        rate = 24000.0
        f_low = float(rng.uniform(100.0, 5000.0))
        f_high = float(rng.uniform(f_low + 200.0, 11000.0))
        filt = SincBandPass(f_low, f_high, 257, rate)
        d_low, d_high = kernel_cutoff_gradients(filt)
        h = 1e-4
        for fieldname, analytic in (("f_low", d_low), ("f_high", d_high)):
            plus = SincBandPass(f_low, f_high, 257, rate)
            minus = SincBandPass(f_low, f_high, 257, rate)
            setattr(plus, fieldname, getattr(plus, fieldname) + h)
            setattr(minus, fieldname, getattr(minus, fieldname) - h)
            fd = (materialize_kernel(plus) - materialize_kernel(minus)) / (2 * h)
            rows.append(
                {
                    "check": f"kernel d/d{fieldname} ({trial})",
                    "rel_err": _vector_rel_err(fd, analytic),
                    "tol": 1e-5,
                }
            )
    return rows


def egnorm_gradient_check(rng: np.random.Generator) -> list[dict]:
    """Eg-norm analytic partials vs central differences at non-degenerate points."""
    rows = []
    for trial in range(3):
        x = rng.normal(0.0, 0.5, size=64)
        params = EgNormParams(
            sigma=float(rng.uniform(0.8, 2.5)),
            alpha=float(rng.uniform(0.4, 1.1)),
            delta=float(rng.uniform(1.0, 3.0)),
            gamma=float(rng.uniform(0.4, 0.9)),
        )
        g_out = rng.normal(size=x.shape)
        d_signal, d_params = eg_normalize_vjp(x, params, g_out)
        h = 1e-5

        def loss_at(p: EgNormParams, signal=x) -> float:
            return float(np.sum(g_out * eg_normalize(signal, p)))

        for pname in ("sigma", "alpha", "delta", "gamma"):
            fd = (
                loss_at(replace(params, **{pname: getattr(params, pname) + h}))
                - loss_at(replace(params, **{pname: getattr(params, pname) - h}))
            ) / (2 * h)
            rows.append(
                {
                    "check": f"egnorm d/d{pname} ({trial})",
                    "rel_err": _rel_err(fd, d_params[pname]),
                    "tol": 1e-4,
                }
            )
        fd_sig = np.zeros_like(x)
        for j in range(0, len(x), 7):  # spot-check a subset of input coordinates
            e = np.zeros_like(x)
            e[j] = h
            fd_sig[j] = (loss_at(params, x + e) - loss_at(params, x - e)) / (2 * h)
        picked = slice(0, len(x), 7)
        rows.append(
            {
                "check": f"egnorm d/dinput ({trial})",
                "rel_err": _vector_rel_err(fd_sig[picked], d_signal[picked]),
                "tol": 1e-4,
            }
        )
    return rows


MINIATURE_CONFIG = ModelConfig(
    depth=3,
    band_top=12000.0,
    kernel_len=65,
    base_sample_rate=24000.0,
    backbone_plan=((4, 12), (4, 16), (2, 8), (None, 8)),
    lowpass_len=15,
    seed=7,
)


def model_gradient_check(
    config: ModelConfig | None = None,
    n_samples: int = 4096,
    batch: int = 2,
    seed: int = 0,
) -> list[dict]:
    """Loss-level finite-difference checks for one parameter of each kind."""
    config = config or MINIATURE_CONFIG
    model = DyDecModel.build(config)
    rng = np.random.default_rng(seed)
    clips = rng.normal(0.0, 0.3, size=(batch, n_samples))
    frames = model.output_frames(n_samples)
    densities = np.abs(rng.normal(0.1, 0.05, size=(batch, frames)))
    counts = densities.sum(axis=1)

    _, grads = forward_backward(model, clips, densities, counts)

    picks = [
        ("tree.2.1.f_low", 1e-2),
        ("tree.2.2.f_high", 1e-2),
        ("tree.1.0.sigma", 1e-5),
        ("tree.2.3.alpha", 1e-5),
        ("tree.3.5.delta", 1e-5),
        ("tree.1.1.gamma", 1e-5),
        ("bb.0.cutoffs", 1e-3),
        ("bb.0.weight", 1e-6),
        ("bb.1.bias", 1e-6),
        ("bb.out.weight", 1e-6),
        ("bb.out.bias", 1e-6),
    ]
    if config.norm != "egnorm":
        picks = [(n, h) for n, h in picks if n.split(".")[-1] not in ("sigma", "alpha", "delta", "gamma")]
    if config.head == "reg_count":
        picks += [("head.weight", 1e-6), ("head.bias", 1e-6)]

    def loss_only() -> float:
        scores = model.forward(None, clips, training=True, trainable=False)
        if model.config.head == "reg_count":
            pred = model.head_counts(None, scores).data
            return float(np.mean((pred - counts) ** 2))
        return float(np.mean((scores.data - densities) ** 2))

    rows = []
    for name, h in picks:
        base = np.array(model.parameters()[name], copy=True)
        flat_idx = 0 if base.ndim == 0 else int(rng.integers(base.size))
        perturbed = base.reshape(-1).copy()

        perturbed[flat_idx] = base.reshape(-1)[flat_idx] + h
        model.set_parameter(name, perturbed.reshape(base.shape))
        loss_plus = loss_only()
        perturbed[flat_idx] = base.reshape(-1)[flat_idx] - h
        model.set_parameter(name, perturbed.reshape(base.shape))
        loss_minus = loss_only()
        model.set_parameter(name, base)

        fd = (loss_plus - loss_minus) / (2 * h)
        analytic = float(np.asarray(grads[name]).reshape(-1)[flat_idx])
        rows.append({"check": f"model d/d {name}[{flat_idx}]", "rel_err": _rel_err(fd, analytic), "tol": 1e-3})
    return rows


def gradient_check_suite(seed: int = 0) -> list[dict]:
    """All gradient checks: kernel-level, eg-norm-level, and full-model FD."""
    rng = np.random.default_rng(seed)
    rows = kernel_gradient_check(rng) + egnorm_gradient_check(rng) + model_gradient_check(seed=seed)
    for row in rows:
        row["pass"] = bool(row["rel_err"] < row["tol"])
    return rows
