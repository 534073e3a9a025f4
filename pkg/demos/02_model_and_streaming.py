"""Build the forecaster, count its parameters and stream a clip through it.

Run with ``python3 demos/02_model_and_streaming.py``. Takes a few seconds.
"""

# %%
import time

import numpy as np

from stride.datagen import generate_dataset, normalize_frame
from stride.model import (
    REPORTED_CNN_PARAMS, ForecasterConfig, ForecasterModel, StreamState, cnn_param_count, rnn_param_count,
    stream_predict,
)
from stride.training import predict_trial

cfg = ForecasterConfig(task="toi")
print(f"encoder {cnn_param_count(cfg)} parameters (published figure {REPORTED_CNN_PARAMS}), "
      f"recurrent head {rnn_param_count(cfg)}")

model = ForecasterModel.initialize(cfg, seed=1, dtype=np.float64)
for name, arr in list(model.params.items())[:3]:
    print(f"  {name:10s} {arr.shape}")
print("  ...")

# %%
# Every frame is encoded once into a 576-vector and kept in a ring buffer; the
# head re-runs over the last 15 latents from a zero state. Nothing is emitted
# until the buffer is full.
trial = generate_dataset(1, 1, seed=4).trials[0]
frames = normalize_frame(trial.frames).astype(np.float64)
state = StreamState.for_model(model)
out, t0 = [], time.perf_counter()
for x in frames[: trial.impact_idx]:
    y, state = stream_predict(model, x, state)
    out.append(y)
per_frame = (time.perf_counter() - t0) / trial.impact_idx * 1000
print(f"first forecast after {sum(o is None for o in out)} silent frames, {per_frame:.2f} ms per frame")

# %%
# Offline evaluation uses the same windows, so it reproduces the stream exactly.
offline = predict_trial(model, trial)
same = all(out[trial.impact_idx - k] == offline[k - 1] for k in range(1, 16))
print(f"stream and offline forecasts identical: {same}")
print("untrained TOI forecasts (s) at horizons 1..15:", np.round(offline, 3))
