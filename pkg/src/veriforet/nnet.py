"""A small convolutional network with exact reverse-mode gradients.

Only the primitives the package needs are implemented: 3x3 same-padded
convolution, ReLU, average pooling, global average pooling, dense, L2
normalization, sigmoid and per-sample standardization.  Networks take
``(N, H, W, C)`` image batches; activations are kept channel-major
``(C, N, H, W)`` internally so im2col copies are large contiguous blocks.
Parameters of a
:class:`Network` live in one flat float64 vector; layers receive views.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import raster
from .rng import Stream, derive

EMBED_SIZE = 32
EMBED_DIM = 16


class Layer:
    kind = "layer"

    def param_shapes(self) -> list[tuple]:
        return []

    def init(self, stream: Stream) -> list[np.ndarray]:
        return []

    def describe(self) -> dict:
        return {"type": self.kind}


class Conv3x3(Layer):
    kind = "conv3x3"

    def __init__(self, cin: int, cout: int):
        self.cin, self.cout = cin, cout

    def describe(self):
        return {"type": self.kind, "in": self.cin, "out": self.cout}

    def param_shapes(self):
        # Row index is (ky * 3 + kx) * cin + c.
        return [(9 * self.cin, self.cout), (self.cout,)]

    def init(self, stream):
        limit = np.sqrt(6.0 / (9 * self.cin))
        return [stream.uniform((9 * self.cin, self.cout), -limit, limit), np.zeros(self.cout)]

    def forward(self, p, x):
        w, b = p
        c, n, h, wd = x.shape
        if c != self.cin:
            raise ValueError(f"conv3x3 expects {self.cin} channels, got {c}")
        xp = np.zeros((c, n, h + 2, wd + 2))
        xp[:, :, 1:-1, 1:-1] = x
        cols = np.empty((9, c, n, h, wd))
        for k in range(9):
            dy, dx = divmod(k, 3)
            cols[k] = xp[:, :, dy:dy + h, dx:dx + wd]
        cols = cols.reshape(9 * c, -1)
        y = (w.T @ cols + b[:, None]).reshape(self.cout, n, h, wd)
        return y, (cols, x.shape)

    def backward(self, p, cache, dy, need_dx=True):
        w, _ = p
        cols, (c, n, h, wd) = cache
        d2 = dy.reshape(self.cout, -1)
        grads = [(d2 @ cols.T).T, d2.sum(axis=1)]
        if not need_dx:
            return None, grads
        dcols = (w @ d2).reshape(9, c, n, h, wd)
        dxp = np.zeros((c, n, h + 2, wd + 2))
        for k in range(9):
            dy_, dx_ = divmod(k, 3)
            dxp[:, :, dy_:dy_ + h, dx_:dx_ + wd] += dcols[k]
        return dxp[:, :, 1:-1, 1:-1], grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy, need_dx=True):
        return dy * mask, []


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, size: int = 2):
        self.size = size

    def describe(self):
        return {"type": self.kind, "size": self.size}

    def forward(self, p, x):
        c, n, h, w = x.shape
        k = self.size
        if h % k or w % k:
            raise ValueError(f"avgpool({k}) needs spatial dims divisible by {k}, got {h}x{w}")
        return x.reshape(c, n, h // k, k, w // k, k).mean(axis=(3, 5)), x.shape

    def backward(self, p, shape, dy, need_dx=True):
        c, n, h, w = shape
        k = self.size
        dx = np.broadcast_to(dy[:, :, :, None, :, None] / (k * k), (c, n, h // k, k, w // k, k))
        return dx.reshape(shape), []


class GlobalAvgPool(Layer):
    """(C, N, H, W) feature maps to (N, C) vectors."""

    kind = "gap"

    def forward(self, p, x):
        return x.mean(axis=(2, 3)).T, x.shape

    def backward(self, p, shape, dy, need_dx=True):
        c, n, h, w = shape
        return np.broadcast_to(dy.T[:, :, None, None] / (h * w), shape).copy(), []


class Dense(Layer):
    kind = "dense"

    def __init__(self, nin: int, nout: int):
        self.nin, self.nout = nin, nout

    def describe(self):
        return {"type": self.kind, "in": self.nin, "out": self.nout}

    def param_shapes(self):
        return [(self.nin, self.nout), (self.nout,)]

    def init(self, stream):
        limit = np.sqrt(6.0 / self.nin)
        return [stream.uniform((self.nin, self.nout), -limit, limit), np.zeros(self.nout)]

    def forward(self, p, x):
        w, b = p
        return x @ w + b, x

    def backward(self, p, x, dy, need_dx=True):
        w, _ = p
        return (dy @ w.T if need_dx else None), [x.T @ dy, dy.sum(axis=0)]


class L2Normalize(Layer):
    """Unit-norm rows; an all-zero row maps to the first basis vector."""

    kind = "l2norm"

    def forward(self, p, x):
        norm = np.linalg.norm(x, axis=1, keepdims=True)
        zero = norm == 0.0
        y = x / np.where(zero, 1.0, norm)
        y[zero[:, 0], 0] = 1.0
        return y, (y, norm, zero)

    def backward(self, p, cache, dy, need_dx=True):
        y, norm, zero = cache
        dx = (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / np.where(zero, 1.0, norm)
        dx[zero[:, 0]] = 0.0
        return dx, []


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, p, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y

    def backward(self, p, y, dy, need_dx=True):
        return dy * y * (1.0 - y), []


class Standardize(Layer):
    """Per-sample, per-channel zero mean / unit population std over H and W."""

    kind = "standardize"

    def forward(self, p, x):
        mean = x.mean(axis=(2, 3), keepdims=True)
        std = x.std(axis=(2, 3), keepdims=True)
        flat = raster._constant_channels(std, mean)
        y = (x - mean) / np.where(flat, 1.0, std)
        y = np.where(flat, 0.0, y)
        return y, (y, std, flat)

    def backward(self, p, cache, dy, need_dx=True):
        y, std, flat = cache
        dx = dy - dy.mean(axis=(2, 3), keepdims=True) - y * (dy * y).mean(axis=(2, 3), keepdims=True)
        return np.where(flat, 0.0, dx / np.where(flat, 1.0, std)), []


_LAYERS = {cls.kind: cls for cls in (Conv3x3, ReLU, AvgPool, GlobalAvgPool, Dense, L2Normalize, Sigmoid, Standardize)}


def build_layer(desc: dict) -> Layer:
    cls = _LAYERS[desc["type"]]
    if cls in (Conv3x3, Dense):
        return cls(desc["in"], desc["out"])
    if cls is AvgPool:
        return cls(desc["size"])
    return cls()


def _to_internal(x):
    # Image batches travel as (C, N, H, W) inside the network.
    return np.ascontiguousarray(np.moveaxis(x, 3, 0)) if x.ndim == 4 else x


def _from_internal(d):
    return np.ascontiguousarray(np.moveaxis(d, 0, 3)) if d.ndim == 4 else d


class Network:
    def __init__(self, arch: list[dict]):
        self.arch = [dict(d) for d in arch]
        self.layers = [build_layer(d) for d in self.arch]
        self.slices = []
        offset = 0
        for layer in self.layers:
            spans = []
            for shape in layer.param_shapes():
                size = int(np.prod(shape))
                spans.append((offset, offset + size, shape))
                offset += size
            self.slices.append(spans)
        self.size = offset
        # Finiteness is checked after parameterized and normalizing layers only.
        self._checked = {k for k, layer in enumerate(self.layers)
                         if layer.param_shapes() or isinstance(layer, (L2Normalize, Standardize, Sigmoid))}
        self._checked.add(len(self.layers) - 1)

    def views(self, params: np.ndarray, k: int) -> list[np.ndarray]:
        return [params[a:b].reshape(shape) for a, b, shape in self.slices[k]]

    def init(self, seed: int) -> np.ndarray:
        params = np.zeros(self.size)
        for k, layer in enumerate(self.layers):
            for view, value in zip(self.views(params, k), layer.init(Stream.from_path(seed, k))):
                view[...] = value
        return params

    def forward(self, params, x):
        x = _to_internal(x)
        caches = []
        for k, layer in enumerate(self.layers):
            x, cache = layer.forward(self.views(params, k), x)
            caches.append(cache)
            if k in self._checked and not np.isfinite(x).all():
                raise FloatingPointError(f"non-finite output in layer {k} ({layer.kind})")
        return _from_internal(x), caches

    def backward(self, params, caches, dout, need_dx=False):
        grad = np.zeros(self.size)
        d = _to_internal(np.asarray(dout, dtype=np.float64))
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            d, grads = layer.backward(self.views(params, k), caches[k], d, need_dx or k > 0)
            for (a, b, _), g in zip(self.slices[k], grads):
                grad[a:b] = g.ravel()
            if d is not None and k in self._checked and not np.isfinite(d).all():
                raise FloatingPointError(f"non-finite gradient in layer {k} ({layer.kind})")
        return grad, (_from_internal(d) if d is not None else None)

    def relu_pattern(self, params, x) -> np.ndarray:
        """Concatenated ReLU masks; used to spot kinks during finite differencing."""
        masks = []
        x = _to_internal(x)
        for k, layer in enumerate(self.layers):
            x, cache = layer.forward(self.views(params, k), x)
            if isinstance(layer, ReLU):
                masks.append(cache.ravel())
        return np.concatenate(masks) if masks else np.zeros(0, dtype=bool)


def trunk_architecture() -> list[dict]:
    return [
        {"type": "conv3x3", "in": 3, "out": 8}, {"type": "relu"}, {"type": "avgpool", "size": 2},
        {"type": "conv3x3", "in": 8, "out": 16}, {"type": "relu"}, {"type": "avgpool", "size": 2},
        {"type": "conv3x3", "in": 16, "out": 32}, {"type": "relu"}, {"type": "gap"},
    ]


def encoder_architecture() -> list[dict]:
    return trunk_architecture() + [{"type": "dense", "in": 32, "out": EMBED_DIM}, {"type": "l2norm"}]


@dataclass
class Model:
    """Architecture descriptor plus a flat parameter vector."""

    arch: list[dict]
    params: np.ndarray
    seed: int = 0
    history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    kind = "model"

    def __post_init__(self):
        self.network = Network(self.arch)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.network.size,):
            raise ValueError(f"expected {self.network.size} parameters, got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("parameters must be finite")

    @classmethod
    def create(cls, seed: int, arch: list[dict] | None = None, **kw):
        arch = arch if arch is not None else cls.default_architecture()
        return cls(arch, Network(arch).init(derive(seed, 0xA5)), seed=seed, **kw)

    @staticmethod
    def default_architecture():
        return encoder_architecture()

    def forward(self, x):
        return self.network.forward(self.params, np.asarray(x, dtype=np.float64))[0]

    def copy(self):
        return type(self)(self.arch, self.params.copy(), self.seed, list(self.history), dict(self.meta))


class EmbeddingModel(Model):
    kind = "embedding"


def prepare(img, size: int = EMBED_SIZE) -> np.ndarray:
    """Encoder input contract: resample to ``size`` (box down / nearest up), then standardize."""
    img = np.asarray(img, dtype=np.float64)
    mode = "box" if img.shape[0] >= size else "nearest"
    return raster.standardize(raster.resample(img, size, size, mode))


def embed(model: Model, img) -> np.ndarray:
    """Unit-norm embedding of one prepared ``32x32x3`` input."""
    x = np.asarray(img, dtype=np.float64)
    if x.shape != (EMBED_SIZE, EMBED_SIZE, 3):
        raise ValueError(f"embed expects a prepared {EMBED_SIZE}x{EMBED_SIZE}x3 input, got {x.shape}")
    return model.forward(x[None])[0]


def embed_batch(model: Model, xs, chunk: int = 256) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    return np.concatenate([model.forward(xs[k:k + chunk]) for k in range(0, len(xs), chunk)])


def grad(model: Model, x, loss_fn, wrt_input: bool = False, params=None):
    """Loss and exact gradient of ``loss_fn(network_output)``.

    ``loss_fn`` returns ``(loss, dloss/doutput)``.  Returns
    ``(loss, dparams, dinput)`` where ``dinput`` is None unless requested.
    """
    params = model.params if params is None else params
    out, caches = model.network.forward(params, np.asarray(x, dtype=np.float64))
    loss, dout = loss_fn(out)
    dparams, dx = model.network.backward(params, caches, dout, need_dx=wrt_input)
    return float(loss), dparams, dx


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps_hat=1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(grads))):
        raise FloatingPointError("adam_step received non-finite parameters or gradients")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps_hat), AdamState(m, v, t)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    skipped_kinks: int


def gradient_check(model: Model, sample_batch, h=1e-5, tol=1e-4, coords=200, seed=0,
                   loss_fn=None, wrt="params", floor=1e-6) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Relative error is ``|g - fd| / max(|g|, |fd|, floor)``.  Coordinates whose
    +-h perturbation flips any ReLU are skipped (the function is not
    differentiable across the kink) and replaced by the next sampled one.
    """
    x = np.asarray(sample_batch, dtype=np.float64)
    net, params = model.network, model.params
    if loss_fn is None:
        out_shape = model.forward(x).shape
        proj = Stream.from_path(seed, 0x6C).uniform(out_shape, -1.0, 1.0)
        loss_fn = lambda out: (float(np.sum(proj * out)), proj)

    def value(p, inp):
        return loss_fn(net.forward(p, inp)[0])[0]

    _, g_params, g_input = grad(model, x, loss_fn, wrt_input=(wrt == "input"))
    analytic = g_params if wrt == "params" else g_input.ravel()
    base_pattern = net.relu_pattern(params, x)
    order = Stream.from_path(seed, 0x6D).permutation(analytic.size)
    worst, checked, skipped = 0.0, 0, 0
    for k in order:
        if checked >= coords:
            break
        values, flipped = [], False
        for sign in (1.0, -1.0):
            if wrt == "params":
                p, inp = params.copy(), x
                p[k] += sign * h
            else:
                p, inp = params, x.copy()
                inp.reshape(-1)[k] += sign * h
            if not np.array_equal(net.relu_pattern(p, inp), base_pattern):
                flipped = True
                break
            values.append(value(p, inp))
        if flipped:
            skipped += 1
            continue
        fd = (values[0] - values[1]) / (2 * h)
        a = analytic[k]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
        checked += 1
    return GradCheckReport(worst, bool(worst < tol), checked, skipped)


MAGIC = b"VFW1"


def save_weights(model: Model, path) -> None:
    header = json.dumps({
        "architecture": model.arch, "kind": model.kind, "meta": model.meta,
        "paramCount": int(model.params.size), "seed": int(model.seed),
    }, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(model.params.astype("<f4").tobytes())


def load_weights(path, cls=None) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a VFW1 weights file")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    params = np.frombuffer(data[8 + hlen:], dtype="<f4").astype(np.float64)
    if params.size != header["paramCount"]:
        raise ValueError(f"{path}: expected {header['paramCount']} parameters, found {params.size}")
    if cls is None:
        cls = {sub.kind: sub for sub in _model_classes()}.get(header.get("kind"), Model)
    return cls(header["architecture"], params, seed=header["seed"], meta=header.get("meta", {}))


def _model_classes():
    seen, todo = [], [Model]
    while todo:
        c = todo.pop()
        seen.append(c)
        todo.extend(c.__subclasses__())
    return seen


def as_float32(params: np.ndarray) -> np.ndarray:
    """Round to the precision stored in weights files."""
    return params.astype(np.float32).astype(np.float64)
