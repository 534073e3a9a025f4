"""The CNN-RNN forecaster: per-frame encoder, two stacked tanh RNNs, mean readout."""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    InvariantError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from .numerics import (
    Rng,
    Tape,
    conv2d_same_nhwc,
    maxpool2_nhwc,
    maxpool2_nhwc_values,
    relu6,
    rnn_scan,
    rnn_scan_backward,
    rnn_step,
)

TASKS = ("cop", "toi")

# Count given in the source publication for the conv stack. No bias-bearing
# stack under the 2->12->32->32 channel plan can produce an odd total, so the
# implemented layers give 52,572 instead; kept here so tests can pin the gap.
REPORTED_CNN_PARAMS = 47_437
REPORTED_RNN_PARAMS = 34_147


@dataclass(frozen=True)
class ForecasterConfig:
    task: str = "cop"
    in_channels: int = 2
    height: int = 25
    width: int = 50
    block_channels: tuple = (12, 32, 32)
    convs_per_block: int = 3
    h1: int = 52
    h2: int = 19
    window: int = 15

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if len(self.block_channels) < 1 or self.convs_per_block < 1:
            raise ValueError("need at least one block with one conv")
        h, w = self.height, self.width
        for _ in self.block_channels:
            if h < 2 or w < 2:
                raise ValueError(f"input {self.height}x{self.width} is too small for {len(self.block_channels)} pooling stages")
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError("spatial extent collapses to zero")

    @property
    def pooled_hw(self) -> tuple[int, int]:
        h, w = self.height, self.width
        for _ in self.block_channels:
            h, w = h // 2, w // 2
        return h, w

    @property
    def latent_size(self) -> int:
        h, w = self.pooled_hw
        return self.block_channels[-1] * h * w

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.height, self.width)

    def conv_plan(self):
        """Yield ``(name, c_in, c_out)``; channels expand at the first conv of each block."""
        c = self.in_channels
        for bi, out in enumerate(self.block_channels, start=1):
            for ci in range(1, self.convs_per_block + 1):
                yield f"b{bi}c{ci}", c, out
                c = out

    def param_shapes(self) -> dict:
        shapes = {}
        for name, cin, cout in self.conv_plan():
            shapes[f"{name}.w"] = (cout, cin, 3, 3)
            shapes[f"{name}.b"] = (cout,)
        for name, n, m in (("rnn1", self.latent_size, self.h1), ("rnn2", self.h1, self.h2)):
            shapes[f"{name}.W_in"] = (m, n)
            shapes[f"{name}.W_rec"] = (m, m)
            shapes[f"{name}.b_in"] = (m,)
            shapes[f"{name}.b_rec"] = (m,)
        return shapes


def cnn_param_count(config: ForecasterConfig) -> int:
    return sum(9 * cin * cout + cout for _, cin, cout in config.conv_plan())


def rnn_param_count(config: ForecasterConfig) -> int:
    return sum(n * m + m * m + 2 * m for n, m in ((config.latent_size, config.h1), (config.h1, config.h2)))


def param_count(config: ForecasterConfig) -> int:
    return cnn_param_count(config) + rnn_param_count(config)


def is_encoder_param(name: str) -> bool:
    return not name.startswith("rnn")


@dataclass
class ForecasterModel:
    config: ForecasterConfig
    params: dict

    def __post_init__(self):
        shapes = self.config.param_shapes()
        if list(self.params) != list(shapes):
            raise ShapeError(f"parameter names {list(self.params)} do not match config {list(shapes)}")
        for k, s in shapes.items():
            if self.params[k].shape != s:
                raise ShapeError(f"parameter {k} has shape {self.params[k].shape}, expected {s}")

    # -- construction ------------------------------------------------------

    @classmethod
    def zeros(cls, config: ForecasterConfig, dtype=np.float32) -> "ForecasterModel":
        return cls(config, {k: np.zeros(s, dtype) for k, s in config.param_shapes().items()})

    @classmethod
    def initialize(cls, config: ForecasterConfig, seed: int, dtype=np.float32) -> "ForecasterModel":
        """He-normal conv kernels, uniform +-1/sqrt(fan_in) RNN weights, zero biases."""
        rng = Rng(seed)
        params = {}
        for k, s in config.param_shapes().items():
            if k.endswith(".w"):
                fan_in = s[1] * 9
                params[k] = (rng.normal(int(np.prod(s))) * np.sqrt(2.0 / fan_in)).reshape(s).astype(dtype)
            elif k.endswith((".W_in", ".W_rec")):
                bound = 1.0 / np.sqrt(s[1])
                params[k] = ((2.0 * rng.uniform(int(np.prod(s))) - 1.0) * bound).reshape(s).astype(dtype)
            else:
                params[k] = np.zeros(s, dtype)
        return cls(config, params)

    def copy(self) -> "ForecasterModel":
        return ForecasterModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "ForecasterModel":
        return ForecasterModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    @property
    def dtype(self):
        return self.params["rnn1.W_in"].dtype

    def n_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    # -- encoder -------------------------------------------------------------

    def encode(self, frames: np.ndarray, tape: Tape | None = None) -> np.ndarray:
        """Encode a batch ``(N, C, H, W)`` of normalized frames into ``(N, latent)``."""
        cfg = self.config
        if frames.ndim != 4 or frames.shape[1:] != cfg.frame_shape:
            raise ShapeError(f"encode: expected (N, {cfg.frame_shape}), got {frames.shape}")
        p = self.params
        x = np.ascontiguousarray(frames.transpose(0, 2, 3, 1), dtype=self.dtype)
        names = list(cfg.conv_plan())
        per_block = cfg.convs_per_block
        for i, (name, _, _) in enumerate(names):
            wname, bname = f"{name}.w", f"{name}.b"
            x, cols = conv2d_same_nhwc(x, p[wname], p[bname])
            if tape is not None:
                tape.push("conv", (cols, wname), (wname, bname))
                tape.push("relu6", x)
            x = relu6(x)
            if (i + 1) % per_block == 0:
                if tape is None:
                    x = maxpool2_nhwc_values(x)
                else:
                    in_shape = x.shape
                    x, arg = maxpool2_nhwc(x)
                    tape.push("pool", (arg, in_shape))
        if tape is not None:
            tape.push("flatten", x.shape)
        n = x.shape[0]
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2)).reshape(n, -1)

    # -- recurrent head --------------------------------------------------------

    def run_rnn(self, latents: np.ndarray, index: np.ndarray):
        """Run both RNNs over windows gathered from ``latents`` by ``index`` (T, B).

        Every column of ``index`` is an independent sequence started from zero
        hidden state. Returns per-step outputs (T, B) and a cache for
        :meth:`rnn_backward`.
        """
        p = self.params
        proj = latents @ p["rnn1.W_in"].T
        U1 = proj[index]
        B = index.shape[1]
        z1 = np.zeros((B, self.config.h1), self.dtype)
        H1 = rnn_scan(U1, z1, p["rnn1.W_rec"], p["rnn1.b_in"] + p["rnn1.b_rec"])
        U2 = H1 @ p["rnn2.W_in"].T
        z2 = np.zeros((B, self.config.h2), self.dtype)
        H2 = rnn_scan(U2, z2, p["rnn2.W_rec"], p["rnn2.b_in"] + p["rnn2.b_rec"])
        Y = H2.mean(axis=-1)
        return Y, (latents, index, H1, H2)

    def rnn_backward(self, dY: np.ndarray, cache, need_latent_grad: bool = False):
        latents, index, H1, H2 = cache
        p = self.params
        h2 = self.config.h2
        dH2 = np.broadcast_to((dY / h2)[..., None], H2.shape).astype(self.dtype)
        z2 = np.zeros_like(H2[0])
        dU2, dWr2, db2, _ = rnn_scan_backward(dH2, H2, z2, p["rnn2.W_rec"])
        T, B, m1 = H1.shape
        dWin2 = dU2.reshape(-1, h2).T @ H1.reshape(-1, m1)
        dH1 = dU2 @ p["rnn2.W_in"]
        z1 = np.zeros_like(H1[0])
        dU1, dWr1, db1, _ = rnn_scan_backward(dH1, H1, z1, p["rnn1.W_rec"])
        dproj = np.zeros((latents.shape[0], m1), self.dtype)
        np.add.at(dproj, index.reshape(-1), dU1.reshape(-1, m1))
        grads = {
            "rnn1.W_in": dproj.T @ latents,
            "rnn1.W_rec": dWr1,
            "rnn1.b_in": db1,
            "rnn1.b_rec": db1.copy(),
            "rnn2.W_in": dWin2,
            "rnn2.W_rec": dWr2,
            "rnn2.b_in": db2,
            "rnn2.b_rec": db2.copy(),
        }
        dlat = dproj @ p["rnn1.W_in"] if need_latent_grad else None
        return grads, dlat


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------


def encode_frame(model: ForecasterModel, frame: np.ndarray) -> np.ndarray:
    if frame.shape != model.config.frame_shape:
        raise ShapeError(f"encode_frame: expected {model.config.frame_shape}, got {frame.shape}")
    return model.encode(frame[None])[0]


def forecast_window(model: ForecasterModel, latents) -> np.ndarray:
    """Per-step outputs over one window of latents (oldest first), from zero state."""
    lat = np.asarray(latents, dtype=model.dtype)
    w = model.config.window
    if lat.ndim != 2 or lat.shape[0] != w or lat.shape[1] != model.config.latent_size:
        raise ShapeError(f"forecast_window: expected {w} latents of length {model.config.latent_size}, got {lat.shape}")
    Y, _ = model.run_rnn(lat, np.arange(w)[:, None])
    return Y[:, 0]


@dataclass
class StreamState:
    """Latent ring buffer plus optional persistent hidden states."""

    window: int
    mode: str = "windowed"
    latents: deque = field(default=None)
    h1: np.ndarray | None = None
    h2: np.ndarray | None = None
    frames_seen: int = 0

    def __post_init__(self):
        if self.mode not in ("windowed", "continuous"):
            raise ValueError(f"unknown stream mode {self.mode!r}")
        if self.latents is None:
            self.latents = deque(maxlen=self.window)

    @property
    def fill(self) -> int:
        return len(self.latents)

    @classmethod
    def for_model(cls, model: ForecasterModel, mode: str = "windowed") -> "StreamState":
        return cls(window=model.config.window, mode=mode)


def stream_predict(model: ForecasterModel, frame: np.ndarray, state: StreamState):
    """Push one normalized frame; return ``(prediction or None, state)``."""
    lat = encode_frame(model, frame)
    state.frames_seen += 1
    state.latents.append(lat)
    if state.mode == "continuous":
        p = model.params
        if state.h1 is None:
            state.h1 = np.zeros(model.config.h1, model.dtype)
            state.h2 = np.zeros(model.config.h2, model.dtype)
        state.h1 = rnn_step(lat, state.h1, p["rnn1.W_in"], p["rnn1.W_rec"], p["rnn1.b_in"], p["rnn1.b_rec"])
        state.h2 = rnn_step(state.h1, state.h2, p["rnn2.W_in"], p["rnn2.W_rec"], p["rnn2.b_in"], p["rnn2.b_rec"])
        return float(state.h2.mean()), state
    if state.fill < state.window:
        return None, state
    return float(forecast_window(model, np.stack(state.latents))[-1]), state


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------

WEIGHT_MAGIC = b"SFW1"
_HEADER = struct.Struct("<BHHHHHH")
_TASK_TAG = {"cop": 0, "toi": 1}
_TAG_TASK = {v: k for k, v in _TASK_TAG.items()}
DEFAULT_BLOCKS = ForecasterConfig().block_channels


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def weights_to_bytes(model: ForecasterModel) -> bytes:
    cfg = model.config
    if tuple(cfg.block_channels) != DEFAULT_BLOCKS or cfg.convs_per_block != 3:
        raise ValueError("weight files only describe the standard 3x3-conv, 12/32/32 channel plan")
    parts = [_HEADER.pack(_TASK_TAG[cfg.task], cfg.h1, cfg.h2, cfg.in_channels, cfg.height, cfg.width, cfg.window)]
    for v in model.params.values():
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return WEIGHT_MAGIC + payload + _checksum(payload)


def weights_from_bytes(blob: bytes) -> ForecasterModel:
    if blob[:4] != WEIGHT_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {WEIGHT_MAGIC!r}")
    if len(blob) < 4 + _HEADER.size + 8:
        raise TruncatedError(f"weight file of {len(blob)} bytes is shorter than its header")
    tag, h1, h2, c, h, w, win = _HEADER.unpack_from(blob, 4)
    if tag not in _TAG_TASK:
        raise VersionError(f"unknown task tag {tag}")
    try:
        cfg = ForecasterConfig(task=_TAG_TASK[tag], in_channels=c, height=h, width=w, h1=h1, h2=h2, window=win)
    except ValueError as exc:
        raise InvariantError(str(exc)) from exc
    shapes = cfg.param_shapes()
    need = 4 + _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes.values()) + 8
    if len(blob) < need:
        raise TruncatedError(f"weight file truncated: {len(blob)} bytes, config requires {need}")
    if len(blob) > need:
        raise ChecksumError(f"weight file has {len(blob) - need} trailing bytes")
    payload = blob[4 : need - 8]
    if _checksum(payload) != blob[need - 8 :]:
        raise ChecksumError("weight payload checksum mismatch")
    off = 4 + _HEADER.size
    params = {}
    for k, s in shapes.items():
        n = int(np.prod(s))
        params[k] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(s)
        off += 4 * n
    return ForecasterModel(cfg, params)


def save_weights(model: ForecasterModel, path) -> None:
    Path(path).write_bytes(weights_to_bytes(model))


def load_weights(path) -> ForecasterModel:
    return weights_from_bytes(Path(path).read_bytes())


def with_task(config: ForecasterConfig, task: str) -> ForecasterConfig:
    return replace(config, task=task)
