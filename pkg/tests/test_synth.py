import numpy as np
import pytest

from dydec.counting import read_labels_jsonl
from dydec.metrics import max_polyp, polyphony_for_clip
from dydec.synth import (
    SceneEvent,
    SceneSpec,
    SnrSpec,
    SynthConfig,
    build_seed_bank,
    dataset_digest,
    generate_dataset,
    render_scene,
)

SR = 24000
NO_NOISE = SnrSpec(mode="none")


def _bank():
    return build_seed_bank(SR, [0, 1, 2, 3])


def test_seed_bank_properties():
    bank = _bank()
    assert len(bank) == 4
    for seed in bank.values():
        assert seed.duration <= 1.5
        assert np.max(np.abs(seed.template)) == pytest.approx(1.0)


def test_event_at_mic_is_unit_gain_zero_delay():
    bank = _bank()
    spec = SceneSpec(
        events=[SceneEvent(seed_id=0, position=(50.0, 50.0, 1.0), start_s=0.25)],
        duration_s=2.0,
        sample_rate=SR,
        snr=NO_NOISE,
    )
    result = render_scene(spec, bank)
    start = round(0.25 * SR)
    template = bank[0].template
    np.testing.assert_allclose(
        result.clip.samples[start : start + len(template)], template, atol=1e-12
    )
    assert result.labels[0].t_start == pytest.approx(0.25)
    assert result.labels[0].t_end == pytest.approx(0.25 + bank[0].duration)


def test_inverse_distance_attenuation():
    bank = _bank()
    # Two copies of the same seed at distances 10 m and 20 m, disjoint in time.
    spec = SceneSpec(
        events=[
            SceneEvent(seed_id=1, position=(60.0, 50.0, 1.0), start_s=0.1),
            SceneEvent(seed_id=1, position=(70.0, 50.0, 1.0), start_s=2.5),
        ],
        duration_s=5.0,
        sample_rate=SR,
        snr=NO_NOISE,
    )
    result = render_scene(spec, bank)
    seg = []
    for label in result.labels:
        lo = round(label.t_start * SR)
        hi = round(label.t_end * SR)
        seg.append(result.clip.samples[lo:hi])
    rms = [np.sqrt(np.mean(s**2)) for s in seg]
    assert rms[0] / rms[1] == pytest.approx(2.0, abs=1e-6)


def test_delay_follows_distance():
    bank = _bank()
    spec = SceneSpec(
        events=[SceneEvent(seed_id=0, position=(50.0, 50.0 + 34.3, 1.0), start_s=0.5)],
        duration_s=3.0,
        sample_rate=SR,
        snr=NO_NOISE,
    )
    result = render_scene(spec, bank)
    assert result.labels[0].t_start == pytest.approx(0.5 + 0.1, abs=1.0 / SR)


def test_event_exiting_clip_rejected():
    bank = _bank()
    spec = SceneSpec(
        events=[SceneEvent(seed_id=3, position=(50.0, 50.0, 1.0), start_s=1.9)],
        duration_s=2.0,
        sample_rate=SR,
        snr=NO_NOISE,
    )
    with pytest.raises(ValueError, match="exits"):
        render_scene(spec, bank)


def test_position_outside_area_rejected():
    bank = _bank()
    spec = SceneSpec(
        events=[SceneEvent(seed_id=0, position=(500.0, 50.0, 1.0), start_s=0.1)],
        duration_s=2.0,
        snr=NO_NOISE,
    )
    with pytest.raises(ValueError, match="outside area"):
        render_scene(spec, bank)


def test_measured_snr_matches_drawn():
    bank = _bank()
    rng = np.random.default_rng(0)
    errors = []
    for k in range(20):
        spec = SceneSpec(
            events=[
                SceneEvent(
                    seed_id=int(rng.integers(0, 4)),
                    position=tuple(rng.uniform(10, 90, size=3)),
                    start_s=float(rng.uniform(0.0, 2.0)),
                )
            ],
            duration_s=4.0,
            sample_rate=SR,
            snr=SnrSpec(mode="mixture"),
            rng_seed=k,
        )
        result = render_scene(spec, bank)
        measured = 10.0 * np.log10(np.mean(result.clean**2) / np.mean(result.noise**2))
        errors.append(abs(measured - result.snr_db))
    assert max(errors) < 0.5


def test_peak_clamp_rescales_globally():
    bank = _bank()
    events = [
        SceneEvent(seed_id=0, position=(50.0, 50.0, 1.0), start_s=0.2, gain=3.0),
        SceneEvent(seed_id=0, position=(50.0, 50.0, 1.0), start_s=0.2, gain=3.0),
    ]
    spec = SceneSpec(events=events, duration_s=2.0, sample_rate=SR, snr=NO_NOISE)
    result = render_scene(spec, bank)
    assert np.max(np.abs(result.clip.samples)) <= 1.0 + 1e-12
    # relative mix structure preserved
    assert np.max(np.abs(result.clean)) == pytest.approx(np.max(np.abs(result.clip.samples)))


def _desk_config(tmp, seed=11):
    return SynthConfig(
        quotas={1: 3, 2: 3},
        classes=[0, 1],
        seed=seed,
        duration_s=2.0,
        sample_rate=SR,
        max_events=4,
        snr=NO_NOISE,
    )


def test_generate_dataset_quota_and_labels(tmp_path):
    config = _desk_config(tmp_path)
    manifest = generate_dataset(config, tmp_path / "data")
    assert manifest["n_clips"] == 6
    by_level = {}
    for clip in manifest["clips"]:
        by_level.setdefault(clip["max_polyp"], 0)
        by_level[clip["max_polyp"]] += 1
    assert by_level == {1: 3, 2: 3}

    # label/audio consistency: recomputed max-polyp matches the stratum tag
    records = {r["clip_id"]: r for r in read_labels_jsonl(tmp_path / "data" / "labels.jsonl")}
    for clip in manifest["clips"]:
        rec = records[clip["clip_id"]]
        level = max_polyp(polyphony_for_clip(rec["events"], rec["duration_s"]))
        assert level == clip["max_polyp"]
        assert len(rec["events"]) == clip["n_events"]


def test_generate_dataset_deterministic(tmp_path):
    config = _desk_config(tmp_path)
    generate_dataset(config, tmp_path / "a")
    generate_dataset(config, tmp_path / "b")
    assert dataset_digest(tmp_path / "a") == dataset_digest(tmp_path / "b")


def test_generate_dataset_seed_changes_output(tmp_path):
    generate_dataset(_desk_config(tmp_path, seed=11), tmp_path / "a")
    generate_dataset(_desk_config(tmp_path, seed=12), tmp_path / "b")
    assert dataset_digest(tmp_path / "a") != dataset_digest(tmp_path / "b")


def test_unsatisfiable_quota_rejected(tmp_path):
    config = SynthConfig(quotas={9: 1}, max_events=4, snr=NO_NOISE)
    with pytest.raises(ValueError, match="unsatisfiable"):
        generate_dataset(config, tmp_path / "data")
