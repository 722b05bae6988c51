"""Stacked LSTM binary classifier with hand-written backpropagation through time.

Each layer uses the standard cell without peepholes::

    a_t = W x_t + U h_{t-1} + b          (gate blocks stacked as i, f, c, o)
    i, f, o = sigmoid(a_i), sigmoid(a_f), sigmoid(a_o)
    g = tanh(a_c)
    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)

The head reads the last layer's final hidden state (or its time average with
``readout="mean"``) and emits ``sigmoid(w . h + b)``.  Everything runs in
float64 on batches shaped (B, T, D); a single (T, D) sequence is treated as
a batch of one.

Model file layout::

    magic b"TFAM" | version u32 | layer count L u32 | L+1 dims u32
    then float64 LE: for each layer W (4H x D_in), U (4H x H), b (4H),
    all row-major with gate blocks i, f, c, o; then head weights (H_L), head bias.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    BadMagicError,
    FormatError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

DEFAULT_HIDDEN = (128, 64, 32, 16)
READOUTS = ("last", "mean")

MODEL_MAGIC = b"TFAM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sII")

_TINY = np.nextafter(0.0, 1.0)
_ALMOST_ONE = np.nextafter(1.0, 0.0)


@dataclass
class LSTMLayer:
    W: np.ndarray  # (4H, D_in)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]


@dataclass
class ModelParams:
    layers: list
    head_w: np.ndarray  # (H_L,)
    head_b: np.ndarray  # (1,)

    @property
    def dims(self) -> tuple:
        return (self.layers[0].input_dim,) + tuple(l.hidden for l in self.layers)

    def arrays(self) -> list:
        """Every parameter array in serialization order (views, not copies)."""
        out = []
        for layer in self.layers:
            out += [layer.W, layer.U, layer.b]
        return out + [self.head_w, self.head_b]

    def names(self) -> list:
        out = []
        for k in range(len(self.layers)):
            out += [f"layer{k + 1}.W", f"layer{k + 1}.U", f"layer{k + 1}.b"]
        return out + ["head.w", "head.b"]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_arrays([np.zeros_like(a) for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ModelParams":
        arrays = list(arrays)
        if len(arrays) < 5 or (len(arrays) - 2) % 3:
            raise ShapeMismatchError(f"cannot build parameters from {len(arrays)} arrays")
        layers = [LSTMLayer(*arrays[i:i + 3]) for i in range(0, len(arrays) - 2, 3)]
        return cls(layers=layers, head_w=arrays[-2], head_b=arrays[-1])

    @classmethod
    def from_flat(cls, dims: Sequence[int], flat: np.ndarray) -> "ModelParams":
        shapes = param_shapes(dims)
        total = sum(int(np.prod(s)) for s in shapes)
        if flat.size != total:
            raise ShapeMismatchError(f"expected {total} values for dims {tuple(dims)}, got {flat.size}")
        arrays, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            arrays.append(np.array(flat[pos:pos + n], dtype=np.float64).reshape(s))
            pos += n
        return cls.from_arrays(arrays)


def _check_dims(dims: Sequence[int]) -> tuple:
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError(f"dims needs an input width and at least one hidden width, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dimensions must be positive, got {dims}")
    return dims


def param_shapes(dims: Sequence[int]) -> list:
    dims = _check_dims(dims)
    shapes = []
    for d_in, h in zip(dims[:-1], dims[1:]):
        shapes += [(4 * h, d_in), (4 * h, h), (4 * h,)]
    return shapes + [(dims[-1],), (1,)]


def param_count(dims: Sequence[int]) -> int:
    """Closed form: sum over layers of 4(H*D_in + H^2 + H), plus H_L + 1."""
    dims = _check_dims(dims)
    total = sum(4 * (h * d + h * h + h) for d, h in zip(dims[:-1], dims[1:]))
    return total + dims[-1] + 1


def init_params(dims: Sequence[int], seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; forget bias 1, other biases 0."""
    dims = _check_dims(dims)
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, h in zip(dims[:-1], dims[1:]):
        kw, ku = 1.0 / np.sqrt(d_in), 1.0 / np.sqrt(h)
        W = rng.uniform(-kw, kw, size=(4 * h, d_in))
        U = rng.uniform(-ku, ku, size=(4 * h, h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        layers.append(LSTMLayer(W, U, b))
    kh = 1.0 / np.sqrt(dims[-1])
    head_w = rng.uniform(-kh, kh, size=dims[-1])
    return ModelParams(layers=layers, head_w=head_w, head_b=np.zeros(1))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class LayerTrace:
    inputs: np.ndarray  # (B, T, D_in)
    gates: np.ndarray  # (B, T, 4H) post-activation i, f, g, o
    cells: np.ndarray  # (B, T, H)
    tanh_cells: np.ndarray  # (B, T, H)
    hidden: np.ndarray  # (B, T, H)


@dataclass
class ForwardTrace:
    layers: list = field(repr=False)
    readout: np.ndarray = field(repr=False)  # (B, H_L)
    logits: np.ndarray  # (B,)
    probs: np.ndarray  # (B,)
    mode: str = "last"
    batched: bool = True

    @property
    def z(self):
        return self.logits if self.batched else float(self.logits[0])

    @property
    def y_hat(self):
        return self.probs if self.batched else float(self.probs[0])


def _as_batch(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    if x.ndim == 2:
        x = x[None]
    elif x.ndim != 3:
        raise ShapeMismatchError(f"input must be (T, D) or (B, T, D), got shape {x.shape}")
    if x.shape[2] != params.dims[0]:
        raise ShapeMismatchError(f"input width {x.shape[2]} does not match model width {params.dims[0]}")
    if x.shape[1] < 1:
        raise ShapeMismatchError("input sequence is empty")
    return x, batched


def _layer_forward(layer: LSTMLayer, x: np.ndarray) -> LayerTrace:
    B, T, _ = x.shape
    H = layer.hidden
    pre = x @ layer.W.T + layer.b  # (B, T, 4H)
    gates = np.empty((B, T, 4 * H))
    cells = np.empty((B, T, H))
    tanh_cells = np.empty((B, T, H))
    hidden = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    UT = layer.U.T
    for t in range(T):
        a = pre[:, t] + h @ UT
        g = gates[:, t]
        g[:, :2 * H] = expit(a[:, :2 * H])
        g[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        g[:, 3 * H:] = expit(a[:, 3 * H:])
        c = g[:, H:2 * H] * c + g[:, :H] * g[:, 2 * H:3 * H]
        tc = np.tanh(c)
        h = g[:, 3 * H:] * tc
        cells[:, t] = c
        tanh_cells[:, t] = tc
        hidden[:, t] = h
    return LayerTrace(x, gates, cells, tanh_cells, hidden)


def forward(params: ModelParams, x, readout: str = "last") -> ForwardTrace:
    if readout not in READOUTS:
        raise ValueError(f"readout must be one of {READOUTS}, got {readout!r}")
    x, batched = _as_batch(params, x)
    traces = []
    inp = x
    for layer in params.layers:
        tr = _layer_forward(layer, inp)
        traces.append(tr)
        inp = tr.hidden
    top = traces[-1].hidden
    r = top[:, -1] if readout == "last" else top.mean(axis=1)
    z = r @ params.head_w + params.head_b[0]
    probs = np.clip(expit(z), _TINY, _ALMOST_ONE)
    return ForwardTrace(traces, r, z, probs, readout, batched)


def backward(params: ModelParams, trace: ForwardTrace, x, y) -> ModelParams:
    """Gradient of the batch-mean binary cross-entropy w.r.t. every parameter.

    Uses dL/dz = y_hat - y at the head (sigmoid and BCE fused).
    """
    x, _ = _as_batch(params, x)
    B, T, _ = x.shape
    if len(trace.layers) != len(params.layers) or trace.logits.shape != (B,):
        raise ShapeMismatchError("trace was not produced by forward() on these params and inputs")
    for layer, tr in zip(params.layers, trace.layers):
        if tr.hidden.shape[2] != layer.hidden or tr.inputs.shape[2] != layer.input_dim:
            raise ShapeMismatchError("trace layer shapes do not match params")
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), (B,))

    dz = (trace.probs - y) / B
    grad_head_w = trace.readout.T @ dz
    grad_head_b = np.array([dz.sum()])
    dr = np.outer(dz, params.head_w)
    H_top = params.layers[-1].hidden
    dh_seq = np.zeros((B, T, H_top))
    if trace.mode == "last":
        dh_seq[:, -1] = dr
    else:
        dh_seq[:] = dr[:, None, :] / T

    grads = []
    for layer, tr in zip(reversed(params.layers), reversed(trace.layers)):
        H = layer.hidden
        da = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        U = layer.U
        for t in range(T - 1, -1, -1):
            gt = tr.gates[:, t]
            i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
            tc = tr.tanh_cells[:, t]
            c_prev = tr.cells[:, t - 1] if t > 0 else 0.0
            dh = dh_seq[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dat = da[:, t]
            dat[:, :H] = dc * g * i * (1.0 - i)
            dat[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            dat[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dat[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dat @ U
        h_prev = np.zeros_like(tr.hidden)
        h_prev[:, 1:] = tr.hidden[:, :-1]
        dW = np.einsum("btg,btd->gd", da, tr.inputs)
        dU = np.einsum("btg,bth->gh", da, h_prev)
        db = da.sum(axis=(0, 1))
        grads.append((dW, dU, db))
        dh_seq = da @ layer.W

    arrays = []
    for dW, dU, db in reversed(grads):
        arrays += [dW, dU, db]
    return ModelParams.from_arrays(arrays + [grad_head_w, grad_head_b])


def loss_and_grad(params: ModelParams, x, y, readout: str = "last"):
    """Batch-mean BCE (computed from logits, no clamping) and its gradient."""
    trace = forward(params, x, readout)
    y_arr = np.broadcast_to(np.asarray(y, dtype=np.float64), trace.logits.shape)
    loss = float(np.mean(bce_from_logits(trace.logits, y_arr)))
    return loss, backward(params, trace, x, y), trace


def bce_from_logits(z, y):
    """Per-sample cross-entropy of sigmoid(z) against y, stable for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    return np.logaddexp(0.0, z) - y * z


def predict(params: ModelParams, x, readout: str = "last"):
    trace = forward(params, x, readout)
    return trace.y_hat


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_model(params: ModelParams, path) -> None:
    dims = params.dims
    flat = params.flat()
    if not np.all(np.isfinite(flat)):
        raise ValueError("refusing to save non-finite parameters")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(dims) - 1))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(flat.astype("<f8").tobytes())


def load_model(path, expected_dims: Sequence[int] | None = None, input_dim: int | None = None) -> ModelParams:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedFileError(path, _HEADER.size, len(data))
    magic, version, n_layers = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {MODEL_VERSION}")
    if n_layers < 1 or n_layers > 1024:
        raise FormatError(f"{path}: implausible layer count {n_layers}")
    dims_end = _HEADER.size + 4 * (n_layers + 1)
    if len(data) < dims_end:
        raise TruncatedFileError(path, dims_end, len(data))
    dims = struct.unpack_from(f"<{n_layers + 1}I", data, _HEADER.size)
    try:
        n = param_count(dims)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    expected = dims_end + 8 * n
    if len(data) < expected:
        raise TruncatedFileError(path, expected, len(data))
    if len(data) > expected:
        raise FormatError(f"{path}: {len(data) - expected} trailing bytes after parameters")
    if expected_dims is not None and tuple(expected_dims) != tuple(dims):
        raise ShapeMismatchError(f"{path}: model dims {dims} do not match configured {tuple(expected_dims)}")
    if input_dim is not None and dims[0] != input_dim:
        raise ShapeMismatchError(f"{path}: model input width {dims[0]} does not match configured {input_dim}")
    flat = np.frombuffer(data, dtype="<f8", count=n, offset=dims_end).astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise FormatError(f"{path}: parameters contain non-finite values")
    return ModelParams.from_flat(dims, flat)
