"""A small dense-layer engine with hand-written reverse-mode gradients.

Tensors are float64 numpy arrays. A network is a list of ``LayerSpec``;
``forward`` runs it and returns the output with a ``Tape`` that
``backward`` consumes. Parameters live in a ``ParamStore`` keyed by
``"<layer name>.<param>"``.

Supported layers (input layout in brackets):

    shared_mlp  dense layer applied per set element       [B, P, C]
    fc          dense layer on the last axis               [..., C]
    conv3x3     3x3 convolution, padding 1                 [B, C, H, W]
    maxpool3x3  3x3 max pooling, stride 1, padding 1       [B, C, H, W]
    max_over_set  max over the set axis                    [B, P, C] -> [B, C]
    relu, batchnorm (over all but the last axis, or channels for 4-D),
    dropout (inverted, keep probability), flatten
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch

TRAIN = "train"
EVAL = "eval"
BN_EPS = 1e-5
KINDS = ("shared_mlp", "fc", "conv3x3", "maxpool3x3", "max_over_set",
         "relu", "batchnorm", "dropout", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    dims: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"layer {self.name}: dims must be positive")
        if self.kind == "dropout" and not 0.0 < self.dims[0] <= 1.0:
            raise ValueError(f"layer {self.name}: keep probability must lie in (0, 1]")


def shared_mlp(name, c_in, c_out):
    return LayerSpec("shared_mlp", name, (c_in, c_out))


def fc(name, c_in, c_out):
    return LayerSpec("fc", name, (c_in, c_out))


def conv3x3(name, c_in, c_out):
    return LayerSpec("conv3x3", name, (c_in, c_out))


def maxpool3x3(name):
    return LayerSpec("maxpool3x3", name)


def max_over_set(name):
    return LayerSpec("max_over_set", name)


def relu(name):
    return LayerSpec("relu", name)


def batchnorm(name, channels):
    return LayerSpec("batchnorm", name, (channels,))


def dropout(name, keep):
    return LayerSpec("dropout", name, (keep,))


def flatten(name):
    return LayerSpec("flatten", name)


class ParamStore(OrderedDict):
    """Named float64 arrays. Iteration order is insertion order."""

    MAGIC = b"NFPS"
    VERSION = 1

    def weight_names(self) -> list[str]:
        """Names of weight matrices/kernels (the regularized parameters)."""
        return [k for k in self if k.endswith(".W")]

    def trainable_names(self) -> list[str]:
        return [k for k in self if k.rsplit(".", 1)[-1] in ("W", "b", "gamma", "beta")]

    def copy(self) -> "ParamStore":
        return ParamStore((k, v.copy()) for k, v in self.items())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(self.MAGIC)
        buf.write(struct.pack("<HI", self.VERSION, len(self)))
        for name, arr in self.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["ParamStore", int]:
        if data[offset:offset + 4] != cls.MAGIC:
            raise ValueError("not a parameter container")
        version, count = struct.unpack_from("<HI", data, offset + 4)
        if version != cls.VERSION:
            raise ValueError(f"unsupported parameter container version {version}")
        pos = offset + 10
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            store[name] = arr.astype(np.float64)
        return store, pos


def init_params(layers, rng, store: ParamStore | None = None) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = np.random.default_rng(rng)
    store = ParamStore() if store is None else store
    for spec in layers:
        if spec.kind in ("fc", "shared_mlp", "conv3x3"):
            c_in, c_out = spec.dims
            fan_in = c_in * 9 if spec.kind == "conv3x3" else c_in
            bound = 1.0 / np.sqrt(fan_in)
            shape = (c_out, c_in, 3, 3) if spec.kind == "conv3x3" else (c_out, c_in)
            store[f"{spec.name}.W"] = rng.uniform(-bound, bound, size=shape)
            store[f"{spec.name}.b"] = rng.uniform(-bound, bound, size=c_out)
        elif spec.kind == "batchnorm":
            (c,) = spec.dims
            store[f"{spec.name}.gamma"] = np.ones(c)
            store[f"{spec.name}.beta"] = np.zeros(c)
            store[f"{spec.name}.running_mean"] = np.zeros(c)
            store[f"{spec.name}.running_var"] = np.ones(c)
    return store


@dataclass
class Tape:
    entries: list = field(default_factory=list)
    bn_stats: dict = field(default_factory=dict)


# -- per-layer forward/backward ---------------------------------------------

def _check_last(spec, x, c):
    if x.shape[-1] != c:
        raise ShapeMismatch(f"layer {spec.name}: expected last dim {c}, got shape {x.shape}")


def _dense_fwd(spec, params, x, train, rng):
    if spec.kind == "shared_mlp" and x.ndim != 3:
        raise ShapeMismatch(f"layer {spec.name}: shared_mlp expects [B, P, C], got {x.shape}")
    _check_last(spec, x, spec.dims[0])
    w, b = params[f"{spec.name}.W"], params[f"{spec.name}.b"]
    return x @ w.T + b, x


def _dense_bwd(spec, params, x, g):
    w = params[f"{spec.name}.W"]
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    grads = {f"{spec.name}.W": g2.T @ x2, f"{spec.name}.b": g2.sum(axis=0)}
    return g @ w, grads


def _im2col(x):
    # rows (b, i, j); columns ordered (di, dj, c) so col2im works on plain slices
    b, c, h, w = x.shape
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # B, H, W, C, 3, 3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def _conv_fwd(spec, params, x, train, rng):
    if x.ndim != 4 or x.shape[1] != spec.dims[0]:
        raise ShapeMismatch(f"layer {spec.name}: expected [B, {spec.dims[0]}, H, W], got {x.shape}")
    w, b = params[f"{spec.name}.W"], params[f"{spec.name}.b"]
    bsz, _, h, wd = x.shape
    cols = _im2col(x)
    y = cols @ w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1).T + b
    return y.reshape(bsz, h, wd, -1).transpose(0, 3, 1, 2), (cols, x.shape)


def _conv_bwd(spec, params, cache, g):
    cols, shape = cache
    w = params[f"{spec.name}.W"]
    bsz, c, h, wd = shape
    o = w.shape[0]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g2.T @ cols).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
    grads = {f"{spec.name}.W": np.ascontiguousarray(dw), f"{spec.name}.b": g2.sum(axis=0)}
    # input gradient = 'same' correlation of g with the flipped, transposed kernels
    w_flip = w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(9 * o, c)
    dx = _im2col(g) @ w_flip
    return dx.reshape(bsz, h, wd, c).transpose(0, 3, 1, 2), grads


def _pool_fwd(spec, params, x, train, rng):
    if x.ndim != 4:
        raise ShapeMismatch(f"layer {spec.name}: expected [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    # channels-last padded copy; running max over the 9 window offsets
    xp = np.full((b, h + 2, w + 2, c), -np.inf)
    xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    best = xp[:, 0:h, 0:w, :].copy()
    arg = np.zeros(best.shape, dtype=np.int64)
    for k in range(1, 9):
        di, dj = divmod(k, 3)
        v = xp[:, di:di + h, dj:dj + w, :]
        arg += (k - arg) * (v > best)  # strict: ties keep the first window position
        np.maximum(best, v, out=best)
    return best.transpose(0, 3, 1, 2), (arg.transpose(0, 3, 1, 2), x.shape)


def _pool_bwd(spec, params, cache, g):
    arg, shape = cache
    b, c, h, w = shape
    di, dj = np.divmod(arg, 3)
    rows = np.arange(h)[:, None] + di
    cols = np.arange(w)[None, :] + dj
    plane = np.arange(b * c).reshape(b, c, 1, 1) * ((h + 2) * (w + 2))
    flat = plane + rows * (w + 2) + cols
    dxp = np.bincount(flat.ravel(), weights=g.ravel(), minlength=b * c * (h + 2) * (w + 2))
    return dxp.reshape(b, c, h + 2, w + 2)[:, :, 1:-1, 1:-1], {}


def _mos_fwd(spec, params, x, train, rng):
    if x.ndim != 3:
        raise ShapeMismatch(f"layer {spec.name}: max_over_set expects [B, P, C], got {x.shape}")
    arg = np.argmax(x, axis=1)
    return np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :], (arg, x.shape)


def _mos_bwd(spec, params, cache, g):
    arg, shape = cache
    dx = np.zeros(shape)
    np.put_along_axis(dx, arg[:, None, :], g[:, None, :], axis=1)
    return dx, {}


def _relu_fwd(spec, params, x, train, rng):
    mask = x > 0
    return x * mask, mask


def _relu_bwd(spec, params, mask, g):
    return g * mask, {}


def _bn_fwd(spec, params, x, train, rng):
    # statistics per channel: axis 1 of 4-D inputs, else the last axis
    (c,) = spec.dims
    shape = x.shape
    if (shape[1] if x.ndim == 4 else shape[-1]) != c:
        raise ShapeMismatch(f"layer {spec.name}: expected {c} channels, got shape {shape}")
    x2 = x.transpose(0, 2, 3, 1).reshape(-1, c) if x.ndim == 4 else x.reshape(-1, c)
    if train:
        mean = x2.mean(axis=0)
        var = np.mean((x2 - mean) ** 2, axis=0)
    else:
        mean = params[f"{spec.name}.running_mean"]
        var = params[f"{spec.name}.running_var"]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x2 - mean) * inv
    y = params[f"{spec.name}.gamma"] * xhat + params[f"{spec.name}.beta"]
    return _bn_unflat(y, shape), (xhat, inv, train, mean, var, shape)


def _bn_unflat(y2, shape):
    if len(shape) == 4:
        b, c, h, w = shape
        return y2.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    return y2.reshape(shape)


def _bn_bwd(spec, params, cache, g):
    xhat, inv, train, _, _, shape = cache
    c = xhat.shape[1]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, c) if g.ndim == 4 else g.reshape(-1, c)
    grads = {f"{spec.name}.gamma": np.sum(g2 * xhat, axis=0), f"{spec.name}.beta": g2.sum(axis=0)}
    gx = g2 * params[f"{spec.name}.gamma"]
    if not train:
        return _bn_unflat(gx * inv, shape), grads
    m = len(xhat)
    s1 = gx.sum(axis=0)
    s2 = np.sum(gx * xhat, axis=0)
    return _bn_unflat((inv / m) * (m * gx - s1 - xhat * s2), shape), grads


def _drop_fwd(spec, params, x, train, rng):
    keep = spec.dims[0]
    if not train or keep >= 1.0:
        return x, None
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def _drop_bwd(spec, params, mask, g):
    return (g if mask is None else g * mask), {}


def _flat_fwd(spec, params, x, train, rng):
    return x.reshape(x.shape[0], -1), x.shape


def _flat_bwd(spec, params, shape, g):
    return g.reshape(shape), {}


_FWD = {"fc": _dense_fwd, "shared_mlp": _dense_fwd, "conv3x3": _conv_fwd, "maxpool3x3": _pool_fwd,
        "max_over_set": _mos_fwd, "relu": _relu_fwd, "batchnorm": _bn_fwd, "dropout": _drop_fwd,
        "flatten": _flat_fwd}
_BWD = {"fc": _dense_bwd, "shared_mlp": _dense_bwd, "conv3x3": _conv_bwd, "maxpool3x3": _pool_bwd,
        "max_over_set": _mos_bwd, "relu": _relu_bwd, "batchnorm": _bn_bwd, "dropout": _drop_bwd,
        "flatten": _flat_bwd}


def forward(layers, params: ParamStore, x, mode: str = EVAL, rng=None) -> tuple[np.ndarray, Tape]:
    """Run ``layers`` on ``x``. Dropout and batch statistics only in TRAIN mode."""
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}")
    train = mode == TRAIN
    if train and rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    for spec in layers:
        x, cache = _FWD[spec.kind](spec, params, x, train, rng)
        tape.entries.append((spec, cache))
        if spec.kind == "batchnorm" and train:
            tape.bn_stats[spec.name] = (cache[3], cache[4])
    return x, tape


def backward(tape: Tape, upstream, params: ParamStore) -> tuple[dict, np.ndarray]:
    """Gradients of every parameter touched by ``tape`` and of its input."""
    g = np.asarray(upstream, dtype=np.float64)
    grads = {}
    for spec, cache in reversed(tape.entries):
        g, layer_grads = _BWD[spec.kind](spec, params, cache, g)
        for k, v in layer_grads.items():
            grads[k] = grads[k] + v if k in grads else v
    return grads, g


def sgd_step(params: ParamStore, grads: dict, lr: float, bn_stats: dict | None = None,
             bn_momentum: float = 0.9) -> ParamStore:
    """Plain SGD in place; batch-norm running stats blend in the batch stats."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"gradient {name} has shape {g.shape}, parameter {params[name].shape}")
        params[name] -= lr * g
    for layer, (mean, var) in (bn_stats or {}).items():
        rm, rv = params[f"{layer}.running_mean"], params[f"{layer}.running_var"]
        rm *= bn_momentum
        rm += (1.0 - bn_momentum) * mean
        rv *= bn_momentum
        rv += (1.0 - bn_momentum) * var
    return params


def l2_penalty(params: ParamStore, names=None) -> tuple[float, dict]:
    """Sum of squared weight entries and its gradient."""
    names = params.weight_names() if names is None else names
    total = sum(float(np.sum(params[n] ** 2)) for n in names)
    return total, {n: 2.0 * params[n] for n in names}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entrywise gap scaled by the larger gradient magnitude of the tensor."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


@dataclass
class GradCheckReport:
    errors: dict
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def numeric_grad(f, arr: np.ndarray, h: float, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if entries is None else entries):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(layers, params: ParamStore, x, loss_fn, h: float = 1e-6, tol: float = 1e-5,
               mode: str = EVAL, seed: int = 0, max_entries: int | None = None) -> GradCheckReport:
    """Compare backward() against central differences.

    ``loss_fn(y)`` returns ``(loss, dloss/dy)``. In TRAIN mode every
    forward pass reuses ``seed`` so dropout masks stay fixed. With
    ``max_entries`` only that many randomly chosen entries per tensor are
    probed (the rest are excluded from both sides).
    """
    x = np.array(x, dtype=np.float64)

    def run():
        y, tape = forward(layers, params, x, mode, np.random.default_rng(seed))
        return y, tape

    y, tape = run()
    loss, dy = loss_fn(y)
    grads, dx = backward(tape, dy, params)
    pick = np.random.default_rng(seed + 1)

    def scalar():
        return loss_fn(run()[0])[0]

    errors = {}
    targets = [(n, params[n]) for n in params.trainable_names() if n in grads] + [("input", x)]
    for name, arr in targets:
        analytic = dx if name == "input" else grads[name]
        entries = None
        if max_entries is not None and arr.size > max_entries:
            entries = np.sort(pick.choice(arr.size, max_entries, replace=False))
        numeric = numeric_grad(scalar, arr, h, entries)
        if entries is not None:
            analytic = analytic.reshape(-1)[entries]
            numeric = numeric.reshape(-1)[entries]
        errors[name] = relative_error(analytic, numeric)
    return GradCheckReport(errors, tol)
