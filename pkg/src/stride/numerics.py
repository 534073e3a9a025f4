"""Dense kernels, their hand-derived adjoints, Adam, and a counter-based PRNG.

Image tensors use ``(C, H, W)`` at the public boundary. The batched helpers
suffixed ``_nhwc`` keep channels last because the im2col matmuls are
noticeably faster in that layout; the model code calls those directly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradientError, ShapeError

# ---------------------------------------------------------------------------
# PRNG
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(z: np.ndarray) -> np.ndarray:
    """Finalizer applied in place to a fresh uint64 array."""
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def derive_seed(*parts) -> int:
    """Hash an arbitrary tuple of ints/strings into a 64-bit seed."""
    text = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


@dataclass
class Rng:
    """SplitMix64 evaluated at ``seed + (counter + i + 1) * golden``.

    Output ``i`` depends only on ``(seed, counter + i)``, so streams are
    reproducible on any platform with wrapping 64-bit integer arithmetic.
    Every draw advances ``counter`` by the number of 64-bit words consumed.
    """

    seed: int
    counter: int = 0

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            idx *= _GOLDEN
            idx += np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
            return _splitmix(idx)

    def uniform(self, n: int | None = None):
        """Reals in [0, 1) with 53 random bits each."""
        k = 1 if n is None else n
        w = self._words(k)
        w >>= np.uint64(11)
        u = w.astype(np.float64)
        u *= 2.0**-53
        return float(u[0]) if n is None else u

    def normal(self, n: int | None = None):
        k = 1 if n is None else n
        u1 = 1.0 - self.uniform(k)
        u2 = self.uniform(k)
        r = np.log(u1)
        r *= -2.0
        np.sqrt(r, out=r)
        u2 *= 2.0 * np.pi
        z = np.cos(u2, out=u2)
        z *= r
        return float(z[0]) if n is None else z

    def integers(self, low: int, high: int, n: int | None = None):
        k = 1 if n is None else n
        span = high - low
        out = low + np.minimum((self.uniform(k) * span).astype(np.int64), span - 1)
        return int(out[0]) if n is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, *keys) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))


def rng_uniform(state: Rng, n: int) -> np.ndarray:
    return state.uniform(n)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _im2col_nhwc(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy, dx, :] = xp[:, dy : dy + h, dx : dx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    # (O, C, 3, 3) -> (9C, O) matching the (dy, dx, c) column order of im2col
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def conv2d_same_nhwc(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Batched 3x3 stride-1 zero-padded convolution; returns ``(out, cols)``."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or x.shape[3] != w.shape[1]:
        raise ShapeError(f"conv2d_same: input {x.shape} (NHWC) incompatible with kernels {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d_same: bias {b.shape} does not match {w.shape[0]} output channels")
    n, h, wd, _ = x.shape
    cols = _im2col_nhwc(x)
    K = _kernel_matrix(w)
    # One matmul per image: BLAS may pick a different kernel for a taller
    # matrix, and per-image calls keep every frame's result independent of
    # how many frames share the batch (streaming == offline, bit for bit).
    per = h * wd
    out = np.empty((n * per, w.shape[0]), dtype=np.result_type(cols, K))
    for i in range(n):
        np.matmul(cols[i * per : (i + 1) * per], K, out=out[i * per : (i + 1) * per])
    out += b
    return out.reshape(n, h, wd, w.shape[0]), cols


def conv2d_same_nhwc_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, need_dx: bool = True):
    n, h, wd, o = dout.shape
    c = w.shape[1]
    d2 = dout.reshape(-1, o)
    dw = (cols.T @ d2).reshape(3, 3, c, o).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ _kernel_matrix(w).T).reshape(n, h, wd, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy : dy + h, dx : dx + wd, :] += dcols[:, :, :, dy, dx, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def conv2d_same(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``out[o,y,x] = bias[o] + sum input[c,y+dy-1,x+dx-1] * kernels[o,c,dy,dx]``.

    Accepts ``(C, H, W)`` or a batch ``(N, C, H, W)``.
    """
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d_same: expected a C x H x W input, got shape {x.shape}")
    xb = x[None] if single else x
    out, _ = conv2d_same_nhwc(np.ascontiguousarray(xb.transpose(0, 2, 3, 1)), kernels, bias)
    out = out.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out[0] if single else out)


# ---------------------------------------------------------------------------
# Pooling and activation
# ---------------------------------------------------------------------------


def maxpool2_nhwc(x: np.ndarray):
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2: spatial extent {h}x{w} is below 2x2")
    ho, wo = h // 2, w // 2
    win = x[:, : 2 * ho, : 2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    arg = win.argmax(axis=-1)  # first maximum in (dy, dx) row-major order
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_nhwc_values(x: np.ndarray) -> np.ndarray:
    """Forward-only pooling (no argmax bookkeeping) for inference."""
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2: spatial extent {h}x{w} is below 2x2")
    ho, wo = h // 2, w // 2
    return x[:, : 2 * ho, : 2 * wo, :].reshape(n, ho, 2, wo, 2, c).max(axis=(2, 4))


def maxpool2_nhwc_backward(dout: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    n, h, w, c = in_shape
    ho, wo = h // 2, w // 2
    dwin = np.zeros((n, ho, wo, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, : 2 * ho, : 2 * wo, :] = dwin.reshape(n, 2 * ho, 2 * wo, c)
    return dx


def maxpool2(x: np.ndarray):
    """2x2/stride-2 max pool over a ``(C, H, W)`` tensor (floor semantics).

    Returns the pooled tensor and the flat in-window argmax (0..3, row-major).
    """
    if x.ndim != 3:
        raise ShapeError(f"maxpool2: expected C x H x W, got {x.shape}")
    out, arg = maxpool2_nhwc(np.ascontiguousarray(x.transpose(1, 2, 0))[None])
    return np.ascontiguousarray(out[0].transpose(2, 0, 1)), arg[0].transpose(2, 0, 1)


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0, 6)


def relu6_grad(x: np.ndarray) -> np.ndarray:
    return ((x > 0) & (x < 6)).astype(x.dtype)


# ---------------------------------------------------------------------------
# Recurrent cell
# ---------------------------------------------------------------------------


def rnn_step(x, h_prev, W_in, W_rec, b_in, b_rec):
    """One tanh step: ``tanh(W_in x + W_rec h_prev + b_in + b_rec)``."""
    m, n = W_in.shape
    if x.shape[-1] != n or h_prev.shape[-1] != m or W_rec.shape != (m, m) or b_in.shape != (m,) or b_rec.shape != (m,):
        raise ShapeError(
            f"rnn_step: x {x.shape}, h {h_prev.shape}, W_in {W_in.shape}, W_rec {W_rec.shape}, "
            f"b_in {b_in.shape}, b_rec {b_rec.shape}"
        )
    return np.tanh(x @ W_in.T + h_prev @ W_rec.T + b_in + b_rec)


def rnn_scan(U: np.ndarray, h0: np.ndarray, W_rec: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Unroll ``h_t = tanh(U_t + W_rec h_{t-1} + bias)`` over the leading axis of ``U``.

    ``U`` holds the already-projected inputs ``W_in x_t`` with shape (T, B, m).
    """
    H = np.empty_like(U)
    h = h0
    for t in range(U.shape[0]):
        h = np.tanh(U[t] + h @ W_rec.T + bias)
        H[t] = h
    return H


def rnn_scan_backward(dH: np.ndarray, H: np.ndarray, h0: np.ndarray, W_rec: np.ndarray):
    """Full BPTT through :func:`rnn_scan`.

    Returns ``(dU, dW_rec, dbias, dh0)``; ``dbias`` applies to both biases.
    """
    dU = np.empty_like(H)
    dW = np.zeros_like(W_rec)
    carry = np.zeros_like(h0)
    for t in range(H.shape[0] - 1, -1, -1):
        dz = (dH[t] + carry) * (1.0 - H[t] * H[t])
        dU[t] = dz
        h_prev = H[t - 1] if t > 0 else h0
        dW += dz.T @ h_prev
        carry = dz @ W_rec
    return dU, dW, dU.sum(axis=(0, 1)), carry


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient with respect to ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


# ---------------------------------------------------------------------------
# Op tape for the fixed conv stack
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Forward record of the CNN ops, replayed in reverse by :func:`backward`."""

    records: list = field(default_factory=list)

    def push(self, op: str, cache, params: tuple = ()):
        self.records.append((op, cache, params))


def backward(tape: Tape, grad: np.ndarray, params: dict, need_input_grad: bool = False):
    """Propagate ``grad`` (w.r.t. the last recorded output) back through ``tape``.

    Returns ``(param_grads, input_grad)``; ``input_grad`` is None unless requested.
    """
    grads = {}
    g = grad
    n = len(tape.records)
    for i in range(n - 1, -1, -1):
        op, cache, names = tape.records[i]
        first = i == 0
        if op == "conv":
            cols, wname = cache
            g, dw, db = conv2d_same_nhwc_backward(g, cols, params[wname], need_dx=need_input_grad or not first)
            grads[names[0]] = dw
            grads[names[1]] = db
        elif op == "relu6":
            g = g * relu6_grad(cache)
        elif op == "pool":
            arg, in_shape = cache
            g = maxpool2_nhwc_backward(g, arg, in_shape)
        elif op == "flatten":
            n, h, w, c = cache
            g = np.ascontiguousarray(g.reshape(n, c, h, w).transpose(0, 2, 3, 1))
        else:
            raise ShapeError(f"backward: unknown op {op!r} on tape")
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient after {op}")
    return grads, (g if need_input_grad else None)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, **kw) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Bias-corrected Adam update applied in place to the arrays in ``params``.

    Only keys present in ``grads`` are touched. The whole update is refused
    when any gradient element is non-finite.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"adam_step: gradient {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"adam_step: gradient {k!r} contains non-finite values")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        p = params[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return params, state
