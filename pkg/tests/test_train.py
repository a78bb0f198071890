import numpy as np
import pytest

from dydec.model import DyDecModel, ModelConfig
from dydec.synth import SnrSpec, SynthConfig, generate_dataset
from dydec.train import (
    AdamState,
    TrainConfig,
    Trainer,
    adam_step,
    forward_backward,
    gradient_check_suite,
    load_checkpoint,
    load_clip_dataset,
    lr_for_epoch,
    save_checkpoint,
    train_loop,
)

TINY_MODEL = ModelConfig(
    depth=2,
    band_top=12000.0,
    kernel_len=65,
    base_sample_rate=24000.0,
    backbone_plan=((5, 8), (5, 12), (3, 8), (None, 8)),
    lowpass_len=15,
    seed=0,
)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    config = SynthConfig(
        quotas={1: 4, 2: 4},
        classes=[2],
        seed=5,
        duration_s=1.0,
        sample_rate=24000,
        max_events=3,
        snr=SnrSpec(mode="none"),
    )
    generate_dataset(config, out)
    frames = DyDecModel.build(TINY_MODEL).output_frames(24000)
    return load_clip_dataset(out, frames)


def _variant(**overrides):
    return ModelConfig(**{**TINY_MODEL.__dict__, **overrides})


def test_lr_schedule_exact_values():
    cfg = TrainConfig()
    assert lr_for_epoch(cfg, 0) == 0.001
    assert lr_for_epoch(cfg, 19) == 0.001
    assert lr_for_epoch(cfg, 20) == 0.0005
    assert lr_for_epoch(cfg, 40) == 0.00025


def test_adam_zero_grads_leave_params():
    # from a fresh state, zero gradients produce a zero update
    cfg = TrainConfig(batch_size=1, epochs=1)
    params = {"w": np.array([1.0, -2.0]), "b": np.asarray(0.5)}
    grads = {"w": np.zeros(2), "b": np.asarray(0.0)}
    out = adam_step(params, grads, AdamState(), cfg)
    np.testing.assert_array_equal(out["w"], params["w"])
    np.testing.assert_array_equal(out["b"], params["b"])


def test_adam_moments_decay_under_zero_grads():
    cfg = TrainConfig(batch_size=1, epochs=1)
    state = AdamState()
    state.m["w"] = np.array([0.3, 0.3])
    state.v["w"] = np.array([0.2, 0.2])
    adam_step({"w": np.zeros(2)}, {"w": np.zeros(2)}, state, cfg)
    np.testing.assert_allclose(state.m["w"], 0.27)
    np.testing.assert_allclose(state.v["w"], 0.1998)


def test_adam_first_step_closed_form():
    cfg = TrainConfig()
    g = np.array([0.04, -3.0, 1e-12])
    params = {"w": np.zeros(3)}
    out = adam_step(params, {"w": g}, AdamState(), cfg)
    expected = -cfg.learning_rate * g / (np.abs(g) + cfg.eps)
    np.testing.assert_allclose(out["w"], expected, rtol=1e-12)


def test_perfect_prediction_gives_zero_loss_and_grads(tiny_dataset):
    model = DyDecModel.build(TINY_MODEL)
    clips = tiny_dataset.clips[:2]
    scores = model.forward(None, clips, trainable=False)
    loss, grads = forward_backward(model, clips, scores.data, scores.data.sum(axis=1))
    assert loss == 0.0
    for name, g in grads.items():
        np.testing.assert_array_equal(g, 0.0, err_msg=name)


def test_frozen_frontend_leaves_backbone_grads_identical(tiny_dataset):
    model = DyDecModel.build(TINY_MODEL)
    clips = tiny_dataset.clips[:4]
    dens = tiny_dataset.densities[:4]
    counts = tiny_dataset.counts[:4]
    _, full = forward_backward(model, clips, dens, counts)
    _, frozen = forward_backward(model, clips, dens, counts, frozen_frontend=True)
    for name in full:
        if name.startswith("bb."):
            np.testing.assert_array_equal(full[name], frozen[name], err_msg=name)
        elif name.startswith("tree."):
            np.testing.assert_array_equal(frozen[name], 0.0, err_msg=name)


def test_gradient_check_suite_all_pass():
    rows = gradient_check_suite(seed=0)
    failures = [r for r in rows if not r["pass"]]
    assert not failures, failures


def test_single_epoch_emits_history(tmp_path, tiny_dataset):
    model = DyDecModel.build(TINY_MODEL)
    cfg = TrainConfig(epochs=1, batch_size=4, seed=1, eval_every_steps=1)
    trainer, history = train_loop(model, tiny_dataset, cfg, out_dir=tmp_path)
    assert len(history) == 2  # 8 clips / batch 4
    assert (tmp_path / "history.csv").exists()
    assert (tmp_path / "checkpoint_final.npz").exists()
    assert (tmp_path / "checkpoint_best.npz").exists()
    text = (tmp_path / "history.csv").read_text()
    assert text.startswith("step,epoch,lr,loss")


def test_memorization_loss_decreases_monotonically(tiny_dataset):
    # Pilot-confirmed: full-batch Adam at lr 1e-3 decreases the loss at every
    # one of the first 20 steps in 10/10 seeds; the contract requires 9/10.
    ok = 0
    for seed in range(10):
        model = DyDecModel.build(_variant(seed=seed))
        cfg = TrainConfig(
            learning_rate=1e-3, epochs=1000, batch_size=8, seed=seed, eval_every_steps=0
        )
        history = Trainer(model, cfg).run(tiny_dataset, max_steps=20)
        losses = [row["loss"] for row in history]
        ok += all(b < a for a, b in zip(losses, losses[1:]))
    assert ok >= 9


def test_same_seed_same_trajectory(tiny_dataset):
    def run():
        model = DyDecModel.build(_variant(seed=3))
        cfg = TrainConfig(epochs=1000, batch_size=4, seed=3, eval_every_steps=0)
        return [row["loss"] for row in Trainer(model, cfg).run(tiny_dataset, max_steps=6)]

    assert run() == run()


def test_resume_is_bit_identical(tmp_path, tiny_dataset):
    cfg = TrainConfig(epochs=1000, batch_size=4, seed=9, eval_every_steps=0)

    model_a = DyDecModel.build(_variant(seed=9))
    trainer_a = Trainer(model_a, cfg)
    trainer_a.run(tiny_dataset, max_steps=3)
    save_checkpoint(tmp_path / "mid.npz", model_a, trainer_a)
    trainer_a.run(tiny_dataset, max_steps=6)

    model_b, trainer_b = load_checkpoint(tmp_path / "mid.npz")
    assert trainer_b is not None and trainer_b.step == 3
    trainer_b.run(tiny_dataset, max_steps=6)

    params_a, params_b = model_a.parameters(), model_b.parameters()
    for name in params_a:
        np.testing.assert_array_equal(params_a[name], params_b[name], err_msg=name)


def test_checkpoint_roundtrip_preserves_model(tmp_path):
    model = DyDecModel.build(TINY_MODEL)
    model.tree.node(2, 1).f_high = 5432.1
    model.backbone.stages[0].bias[2] = 0.25
    save_checkpoint(tmp_path / "ckpt.npz", model)
    loaded, trainer = load_checkpoint(tmp_path / "ckpt.npz")
    assert trainer is None
    assert loaded.tree.node(2, 1).f_high == 5432.1
    a, b = model.parameters(), loaded.parameters()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name], err_msg=name)


def test_invariants_hold_after_aggressive_steps(tiny_dataset):
    # Large learning rate pushes params against their bounds; clamps must hold.
    model = DyDecModel.build(TINY_MODEL)
    cfg = TrainConfig(learning_rate=0.5, epochs=1000, batch_size=8, seed=0, eval_every_steps=0)
    Trainer(model, cfg).run(tiny_dataset, max_steps=8)
    for d, i, filt, eg in model.tree.iter_nodes():
        assert 0.0 <= filt.f_low < filt.f_high <= model.tree.band_top
        assert eg.sigma >= 1e-3 and eg.delta >= 1e-3 and eg.gamma >= 1e-3
    for j, stage in enumerate(model.backbone.stages):
        if stage.cutoffs is not None:
            nyq = model.backbone.stage_rate(j) / 2.0
            assert np.all(stage.cutoffs > 0.0) and np.all(stage.cutoffs < nyq)


@pytest.mark.parametrize(
    "overrides",
    [
        {"mode": "single_scale"},
        {"norm": "batchnorm"},
        {"norm": "none"},
        {"head": "reg_count"},
    ],
)
def test_ablation_variants_train_a_step(tiny_dataset, overrides):
    model = DyDecModel.build(_variant(**overrides))
    cfg = TrainConfig(epochs=1000, batch_size=4, seed=0, eval_every_steps=0)
    history = Trainer(model, cfg).run(tiny_dataset, max_steps=2)
    assert len(history) == 2
    assert all(np.isfinite(row["loss"]) for row in history)


def test_batchnorm_state_updates_and_serializes(tmp_path, tiny_dataset):
    model = DyDecModel.build(_variant(norm="batchnorm"))
    cfg = TrainConfig(epochs=1000, batch_size=4, seed=0, eval_every_steps=0)
    Trainer(model, cfg).run(tiny_dataset, max_steps=1)
    assert model.bn_state is not None and len(model.bn_state.mean) == 6  # 2+4 nodes
    save_checkpoint(tmp_path / "bn.npz", model)
    loaded, _ = load_checkpoint(tmp_path / "bn.npz")
    assert loaded.bn_state.mean == model.bn_state.mean
    assert loaded.bn_state.var == model.bn_state.var
