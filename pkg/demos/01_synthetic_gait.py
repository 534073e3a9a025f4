"""A tour of the synthetic stair-approach clips.

Run with ``python3 demos/01_synthetic_gait.py``. Takes a few seconds.
"""

# %%
import numpy as np

from stride.datagen import (
    SubjectProfile, cop_to_mm, generate_dataset, generate_trial, invert_trial, normalize_frame, toi_targets,
)

# One subject with the noise switched off, so the scene geometry is exact.
prof = SubjectProfile(1, 260.0, jitter_px=0, pixel_noise=0.0, cop_noise=0.0, velocity_jitter=0.0)
trial = generate_trial(prof, "medium", "fore", seed=3)
print(f"{trial.frames.shape[0]} frames of shape {trial.frames.shape[1:]} (uint8), impact at frame {trial.impact_idx}")
print(f"strike {trial.strike!r}, normalized COP {trial.cop_norm:+.4f} = {cop_to_mm(trial.cop_norm, 260.0):.1f} mm")

# %%
# Each frame holds two stereo channels. A coarse ASCII view of the left channel,
# ten frames before impact: the step edge and the foot band close in over time.
f = normalize_frame(trial.frames[trial.impact_idx - 10])[0]
chars = " .:-=+*#%@"
for row in f[::3, ::2]:
    print("".join(chars[int(v * 9)] for v in row))

# %%
# Labels. COP is the same at every horizon; time-to-impact counts down.
for t in (trial.impact_idx - 15, trial.impact_idx - 3, trial.impact_idx - 1):
    frames_left, secs = toi_targets(trial.impact_idx, t)
    print(f"frame {t}: {frames_left} frames ({secs * 1000:.2f} ms) to impact")

# The renderer is invertible on clean clips, which the tests lean on.
cop, impact = invert_trial(trial)
print(f"recovered COP {cop:+.4f}, impact {impact}")

# %%
# A small noisy dataset, as the experiments use it.
ds = generate_dataset(n_subjects=2, trials_per_subject=12, seed=7)
for sid in ds.subject_ids():
    ts = ds.subject_trials(sid)
    strikes = {s: sum(t.strike == s for t in ts) for s in ("rear", "mid", "fore")}
    cops = np.array([t.cop_norm for t in ts])
    print(f"subject {sid}: insole {ds.profile(sid).insole_mm:.1f} mm, strikes {strikes}, "
          f"COP range [{cops.min():+.2f}, {cops.max():+.2f}]")
