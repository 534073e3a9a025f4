import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stride.datagen import (
    SPEED_MM_S,
    STRIKES,
    Dataset,
    SubjectProfile,
    cop_to_mm,
    dataset_from_bytes,
    dataset_to_bytes,
    generate_base_dataset,
    generate_dataset,
    generate_trial,
    in_loss_window,
    invert_trial,
    invert_window,
    mean_toe_velocity,
    normalize_frame,
    random_profile,
    read_dataset,
    toi_targets,
    write_dataset,
)
from stride.errors import BadMagicError, ChecksumError, InvariantError, TruncatedError


def clean_profile(sid=1, L=263.2, swing=1.0):
    return SubjectProfile(sid, L, swing_scale=swing, jitter_px=0, pixel_noise=0.0, cop_noise=0.0,
                          velocity_jitter=0.0)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(2, 6, seed=9)


def test_centered_landing_without_noise_is_zero():
    tr = generate_trial(clean_profile(), "medium", "mid", seed=1, landing=0.0)
    assert tr.cop_norm == 0.0


def test_trial_is_deterministic():
    prof = random_profile(3, 5)
    a = generate_trial(prof, "fast", "fore", seed=42)
    b = generate_trial(prof, "fast", "fore", seed=42)
    assert a.same_as(b)
    assert a.frames.dtype == np.uint8 and a.frames.shape == (100, 2, 25, 50)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**40), strike=st.sampled_from(STRIKES), speed=st.sampled_from(("slow", "medium", "fast")))
def test_closed_form_inverse_on_clean_trials(seed, strike, speed):
    tr = generate_trial(clean_profile(), speed, strike, seed=seed)
    cop, idx = invert_trial(tr)
    assert idx == tr.impact_idx
    assert abs(cop - tr.cop_norm) < 1e-9
    # The two frames before impact determine the landing as well.
    cop_w, k = invert_window(tr.frames[tr.impact_idx - 3 : tr.impact_idx - 1])
    assert k == 2
    assert abs(cop_w - tr.cop_norm) < 1e-9


def test_generator_rejects_unknown_categories():
    with pytest.raises(ValueError):
        generate_trial(clean_profile(), "sprint", "mid", seed=0)
    with pytest.raises(ValueError):
        generate_trial(clean_profile(), "slow", "heel", seed=0)
    with pytest.raises(ValueError):
        SubjectProfile(1, 0.0)


def test_default_dataset_counts():
    ds = generate_dataset()
    assert len(ds.trials) == 720
    for sid in ds.subject_ids():
        trials = ds.subject_trials(sid)
        assert len(trials) == 90
        for s in STRIKES:
            assert sum(t.strike == s for t in trials) / len(trials) >= 0.25
    for t in ds.trials:
        t.check()


def test_seed_changes_dataset(small_ds):
    other = generate_dataset(2, 6, seed=10)
    assert any(not a.same_as(b) for a, b in zip(small_ds.trials, other.trials))
    assert generate_dataset(2, 6, seed=9) == small_ds


def test_single_trial_dataset():
    assert len(generate_dataset(1, 1, seed=0).trials) == 1
    with pytest.raises(ValueError):
        generate_dataset(0, 5)


def test_base_dataset_uses_separate_personas():
    base = generate_base_dataset(10, seed=0)
    assert len(base.trials) == 10
    assert min(base.subject_ids()) >= 1000


def test_normalize_frame_cases():
    f = np.zeros((2, 25, 50))
    f[0, 0, 0], f[1, 0, 0], f[0, 1, 1] = 10, 210, 110
    f[f == 0] = 10
    assert normalize_frame(f)[0, 1, 1] == pytest.approx(0.5)
    assert not normalize_frame(np.full((2, 25, 50), 77)).any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_normalize_frame_range(seed):
    raw = np.random.default_rng(seed).integers(0, 256, (2, 25, 50))
    if raw.min() == raw.max():
        return
    out = normalize_frame(raw)
    assert out.min() == 0.0 and out.max() == 1.0


def test_cop_to_mm():
    assert cop_to_mm(-0.5, 263.2) == 0.0
    assert cop_to_mm(0.5, 263.2) == pytest.approx(263.2)
    assert cop_to_mm(0.0, 200) == 100.0
    with pytest.raises(ValueError):
        cop_to_mm(0.6, 200)


def test_toi_targets():
    assert toi_targets(95, 94) == (1, 1 / 60)
    k, s = toi_targets(95, 80)
    assert k == 15 and s == pytest.approx(0.250)
    k, _ = toi_targets(95, 60)
    assert k == 35 and not in_loss_window(k)
    assert in_loss_window(1) and in_loss_window(15)
    with pytest.raises(ValueError):
        toi_targets(95, 95)


def test_slow_speed_without_jitter():
    tr = generate_trial(clean_profile(), "slow", "rear", seed=3)
    assert tr.torso_velocity == SPEED_MM_S["slow"] == 1000.0


def test_toe_velocity_domain():
    ds = generate_dataset(4, 30, seed=2)
    toe = np.array([t.toe_velocity for t in ds.trials])
    assert 2500 < toe.min() and toe.max() < 5500
    assert toe.min() < 3500 and toe.max() > 4500


def test_zero_swing_toe_equals_torso():
    assert abs(mean_toe_velocity(1234.5, 0.0) - 1234.5) < 1e-6
    tr = generate_trial(clean_profile(swing=0.0), "medium", "mid", seed=4)
    assert abs(tr.toe_velocity - tr.torso_velocity) < 1e-6


def test_dataset_round_trip(tmp_path, small_ds):
    path = tmp_path / "d.gait"
    write_dataset(small_ds, path)
    assert read_dataset(path) == small_ds


def test_dataset_corruption(small_ds):
    blob = dataset_to_bytes(small_ds)
    with pytest.raises(ChecksumError):
        dataset_from_bytes(blob[:-1] + bytes([blob[-1] ^ 1]))
    with pytest.raises(BadMagicError):
        dataset_from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(TruncatedError):
        dataset_from_bytes(blob[:100])


def test_dataset_invariant_violation_on_load(small_ds):
    bad = Dataset(small_ds.profiles, [small_ds.trials[0]], seed=small_ds.seed)
    bad.trials[0] = generate_trial(small_ds.profiles[0], "slow", "mid", seed=1, impact_idx=29)
    with pytest.raises(InvariantError):
        dataset_from_bytes(dataset_to_bytes(bad))
