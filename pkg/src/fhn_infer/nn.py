"""Small deterministic neural-network engine in float64 numpy.

Supports exactly the layers the reconstruction maps need: dense layers, 1-D
convolutions (cross-correlation, no padding), average pooling, flatten and
the Swish activation. Activations are channels-last, ``(batch, length,
channels)`` inside the convolutional stack and ``(batch, features)`` after
flattening, which happens in (position, channel) order.

All trainable parameters live in a single flat vector; each layer reads
views into it, so an optimizer only ever sees one array.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import FormatVersionMismatch, NonFiniteLoss, ShapeError
from .stochastic import RngStream, substream_id

MODEL_MAGIC = b"FHNNN1"


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Conv1d:
    filters: int
    kernel: int = 3
    stride: int = 2


@dataclass(frozen=True)
class AvgPool1d:
    size: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Activation:
    kind: str = "swish"


LayerSpec = Union[Dense, Conv1d, AvgPool1d, Flatten, Activation]
_LAYER_TYPES = {c.__name__: c for c in (Dense, Conv1d, AvgPool1d, Flatten, Activation)}


@dataclass(frozen=True)
class NetworkSpec:
    input_len: int
    layers: tuple
    output_len: int
    input_channels: int = 1

    def to_dict(self) -> dict:
        return {
            "input_len": self.input_len,
            "input_channels": self.input_channels,
            "output_len": self.output_len,
            "layers": [{"type": type(l).__name__, **l.__dict__} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            layers.append(_LAYER_TYPES[ld.pop("type")](**ld))
        return cls(d["input_len"], tuple(layers), d["output_len"], d.get("input_channels", 1))


def dense_spec(input_len: int, n_layers: int, units: int, output_len: int = 2) -> NetworkSpec:
    """``n_layers`` hidden Dense+Swish blocks followed by a linear output layer."""
    layers = []
    for _ in range(n_layers):
        layers += [Dense(units), Activation("swish")]
    layers.append(Dense(output_len))
    return NetworkSpec(input_len, tuple(layers), output_len)


def cnn_spec(input_len: int, n_filters: int, multipliers=(1, 2, 4), output_len: int = 2,
             dense_units=(32, 32), kernel: int = 3, stride: int = 2) -> NetworkSpec:
    """Conv+Swish+AvgPool blocks with ``n_filters * m`` filters, then a dense head."""
    layers = []
    for m in multipliers:
        layers += [Conv1d(n_filters * m, kernel, stride), Activation("swish"), AvgPool1d(2, 2)]
    layers.append(Flatten())
    for u in dense_units:
        layers += [Dense(u), Activation("swish")]
    layers.append(Dense(output_len))
    return NetworkSpec(input_len, tuple(layers), output_len)


def _window_out(length, size, stride):
    return (length - size) // stride + 1


def shape_chain(spec: NetworkSpec) -> list[tuple]:
    """Per-layer output shapes (excluding batch), starting with the input shape."""
    if spec.input_len < 1 or spec.input_channels < 1:
        raise ShapeError("input dimensions must be positive")
    shape = (spec.input_len, spec.input_channels)
    if not any(isinstance(l, Conv1d) for l in spec.layers):
        shape = (spec.input_len * spec.input_channels,)
    shapes = [shape]
    for layer in spec.layers:
        if isinstance(layer, Conv1d):
            if len(shape) != 2:
                raise ShapeError("Conv1d needs a (length, channels) input")
            if layer.kernel < 1 or layer.stride < 1 or layer.filters < 1:
                raise ShapeError(f"invalid {layer}")
            n = _window_out(shape[0], layer.kernel, layer.stride)
            if n < 1:
                raise ShapeError(f"{layer} on length {shape[0]} leaves no output")
            shape = (n, layer.filters)
        elif isinstance(layer, AvgPool1d):
            if len(shape) != 2:
                raise ShapeError("AvgPool1d needs a (length, channels) input")
            if layer.size < 1 or layer.stride < 1:
                raise ShapeError(f"invalid {layer}")
            n = _window_out(shape[0], layer.size, layer.stride)
            if n < 1:
                raise ShapeError(f"{layer} on length {shape[0]} leaves no output")
            shape = (n, shape[1])
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise ShapeError("Dense needs a flat input; add Flatten")
            if layer.units < 1:
                raise ShapeError(f"invalid {layer}")
            shape = (layer.units,)
        elif isinstance(layer, Activation):
            if layer.kind not in ("swish", "identity"):
                raise ShapeError(f"unknown activation {layer.kind!r}")
        else:
            raise ShapeError(f"unknown layer {layer!r}")
        shapes.append(shape)
    if shape != (spec.output_len,):
        raise ShapeError(f"network output {shape} does not match output_len {spec.output_len}")
    return shapes


def _layer_param_shapes(layer, in_shape):
    if isinstance(layer, Dense):
        return [(in_shape[0], layer.units), (layer.units,)]
    if isinstance(layer, Conv1d):
        return [(layer.kernel, in_shape[1], layer.filters), (layer.filters,)]
    return []


def param_count(spec: NetworkSpec) -> int:
    shapes = shape_chain(spec)
    total = 0
    for layer, s in zip(spec.layers, shapes):
        for p in _layer_param_shapes(layer, s):
            total += int(np.prod(p))
    return total


def _sigmoid(x):
    # 0.5 * (1 + tanh(x / 2)) is overflow-free and cheaper than expit here
    s = np.multiply(x, 0.5, out=np.empty(np.shape(x)))
    np.tanh(s, out=s)
    s *= 0.5
    s += 0.5
    return s


def swish(x):
    return x * _sigmoid(x)


def swish_grad(x, s=None):
    """d/dx of x * sigmoid(x); pass ``s = sigmoid(x)`` to skip recomputing it."""
    if s is None:
        s = _sigmoid(x)
    g = 1.0 - s
    g *= x
    g += 1.0
    g *= s
    return g


# -- layer kernels -----------------------------------------------------------
# Each forward returns (output, cache); each backward returns (dinput, [dparams]).

def _dense_fwd(params, x):
    w, b = params
    return x @ w + b, x


def _dense_bwd(params, x, dy):
    w, _ = params
    return dy @ w.T, [x.T @ dy, dy.sum(axis=0)]


def _conv_cols(x, k, s, n_out):
    span = s * (n_out - 1) + 1
    return np.stack([x[:, j:j + span:s, :] for j in range(k)], axis=2)


def _conv_fwd(params, x, layer):
    w, b = params
    k, c, f = w.shape
    n_out = _window_out(x.shape[1], k, layer.stride)
    cols = _conv_cols(x, k, layer.stride, n_out)
    y = cols.reshape(-1, k * c) @ w.reshape(k * c, f)
    return y.reshape(x.shape[0], n_out, f) + b, (cols, x.shape)


def _conv_bwd(params, cache, dy, layer, need_dx=True):
    w, _ = params
    cols, in_shape = cache
    k, c, f = w.shape
    bsz, n_out, _ = dy.shape
    dy2 = dy.reshape(-1, f)
    dw = (cols.reshape(-1, k * c).T @ dy2).reshape(k, c, f)
    if not need_dx:
        return None, [dw, dy.sum(axis=(0, 1))]
    dcols = (dy2 @ w.reshape(k * c, f).T).reshape(bsz, n_out, k, c)
    dx = np.zeros(in_shape)
    s = layer.stride
    span = s * (n_out - 1) + 1
    for j in range(k):
        dx[:, j:j + span:s, :] += dcols[:, :, j, :]
    return dx, [dw, dy.sum(axis=(0, 1))]


def _pool_fwd(x, layer):
    n_out = _window_out(x.shape[1], layer.size, layer.stride)
    if layer.size == layer.stride:
        y = x[:, :n_out * layer.size].reshape(x.shape[0], n_out, layer.size, x.shape[2]).mean(axis=2)
    else:
        span = layer.stride * (n_out - 1) + 1
        y = sum(x[:, j:j + span:layer.stride] for j in range(layer.size)) / layer.size
    return y, x.shape


def _pool_bwd(in_shape, dy, layer):
    n_out = dy.shape[1]
    dx = np.zeros(in_shape)
    g = dy / layer.size
    if layer.size == layer.stride:
        blocks = dx[:, :n_out * layer.size].reshape(in_shape[0], n_out, layer.size, in_shape[2])
        blocks += g[:, :, None, :]
        return dx
    span = layer.stride * (n_out - 1) + 1
    for j in range(layer.size):
        dx[:, j:j + span:layer.stride] += g
    return dx


class Network:
    """A NetworkSpec plus its flat parameter vector."""

    def __init__(self, spec: NetworkSpec, parameters: np.ndarray | None = None):
        self.spec = spec
        self.shapes = shape_chain(spec)
        layout = []
        offset = 0
        for layer, s in zip(spec.layers, self.shapes):
            entries = []
            for p in _layer_param_shapes(layer, s):
                size = int(np.prod(p))
                entries.append((offset, p))
                offset += size
            layout.append(entries)
        self.param_layout = layout
        self.n_params = offset
        if parameters is None:
            parameters = np.zeros(offset)
        parameters = np.ascontiguousarray(parameters, dtype=np.float64)
        if parameters.shape != (offset,):
            raise ShapeError(f"expected {offset} parameters, got {parameters.shape}")
        self.parameters = parameters

    def copy(self) -> "Network":
        return Network(self.spec, self.parameters.copy())

    def layer_params(self, i: int, flat: np.ndarray | None = None) -> list[np.ndarray]:
        flat = self.parameters if flat is None else flat
        return [flat[o:o + int(np.prod(s))].reshape(s) for o, s in self.param_layout[i]]

    def _prepare(self, x):
        x = np.asarray(x, dtype=np.float64)
        n_in = self.spec.input_len * self.spec.input_channels
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim == 2 and x.shape[1] != n_in or x.ndim > 3:
            raise ShapeError(f"input of shape {x.shape} does not match input size {n_in}")
        if len(self.shapes[0]) == 2:
            return x.reshape(x.shape[0], self.spec.input_len, self.spec.input_channels)
        return x.reshape(x.shape[0], n_in)

    def _forward(self, x, keep):
        caches = []
        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, Dense):
                x, cache = _dense_fwd(self.layer_params(i), x)
            elif isinstance(layer, Conv1d):
                x, cache = _conv_fwd(self.layer_params(i), x, layer)
            elif isinstance(layer, AvgPool1d):
                x, cache = _pool_fwd(x, layer)
            elif isinstance(layer, Flatten):
                cache = x.shape
                x = x.reshape(x.shape[0], -1)
            elif layer.kind == "swish":
                sig = _sigmoid(x)
                cache = (x, sig)
                x = x * sig
            else:
                cache = None
            if keep:
                caches.append(cache)
        return x, caches

    def forward(self, x) -> np.ndarray:
        """Predict for one input vector or a batch of row vectors."""
        single = np.ndim(x) == 1
        y, _ = self._forward(self._prepare(x), keep=False)
        return y[0] if single else y

    def predict(self, x, chunk: int = 1000) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([self.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)])

    def backward(self, x, target) -> tuple[float, np.ndarray]:
        """Batch-mean squared error and its exact gradient w.r.t. all parameters."""
        xb = self._prepare(x)
        t = np.asarray(target, dtype=np.float64).reshape(xb.shape[0], self.spec.output_len)
        y, caches = self._forward(xb, keep=True)
        resid = y - t
        loss = float(np.mean(resid * resid))
        dy = 2.0 * resid / resid.size
        grad = np.zeros(self.n_params)
        for i in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[i]
            cache = caches[i]
            if isinstance(layer, Dense):
                dy, dps = _dense_bwd(self.layer_params(i), cache, dy)
            elif isinstance(layer, Conv1d):
                dy, dps = _conv_bwd(self.layer_params(i), cache, dy, layer, need_dx=i > 0)
            elif isinstance(layer, AvgPool1d):
                dy, dps = _pool_bwd(cache, dy, layer), []
            elif isinstance(layer, Flatten):
                dy, dps = dy.reshape(cache), []
            elif layer.kind == "swish":
                g = swish_grad(*cache)
                g *= dy
                dy, dps = g, []
            else:
                dps = []
            for (o, s), g in zip(self.param_layout[i], dps):
                grad[o:o + g.size] = g.ravel()
        return loss, grad

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        header = json.dumps(self.spec.to_dict(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(struct.pack("<Q", self.n_params))
            fh.write(self.parameters.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:6] != MODEL_MAGIC:
            raise FormatVersionMismatch(f"{path}: not a model file")
        try:
            (hlen,) = struct.unpack_from("<I", data, 6)
            spec = NetworkSpec.from_dict(json.loads(data[10:10 + hlen]))
            (n,) = struct.unpack_from("<Q", data, 10 + hlen)
        except (struct.error, ValueError, KeyError) as exc:
            raise FormatVersionMismatch(f"{path}: corrupt header") from exc
        body = data[18 + hlen:]
        if len(body) != 8 * n:
            raise FormatVersionMismatch(f"{path}: expected {n} parameters, file truncated")
        return cls(spec, np.frombuffer(body, dtype="<f8").astype(np.float64))


def init_weights(spec: NetworkSpec, seed: int) -> Network:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    net = Network(spec)
    for i, layer in enumerate(spec.layers):
        entries = net.layer_params(i)
        if not entries:
            continue
        w = entries[0]
        if isinstance(layer, Conv1d):
            k, c, f = w.shape
            fan_in, fan_out = k * c, k * f
        else:
            fan_in, fan_out = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        u = RngStream(seed, substream_id(i, tag=2)).uniform(w.shape)
        w[...] = limit * (2.0 * u - 1.0)
    return net


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def fresh(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and ``params`` in place."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ShapeError("Adam state, parameters and gradient must share a shape")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.002
    shuffle_seed: int = 0
    loss: str = "mse"


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,valid_loss\n")
            for e, (a, b) in enumerate(zip(self.train_loss, self.valid_loss), start=1):
                fh.write(f"{e},{a!r},{b!r}\n")


def _mse(net, x, y, chunk=1000):
    total = 0.0
    for i in range(0, len(x), chunk):
        r = net.forward(x[i:i + chunk]) - y[i:i + chunk]
        total += float(np.sum(r * r))
    return total / y.size


def train(net: Network, x_train, y_train, cfg: TrainConfig,
          x_valid=None, y_valid=None, log=None) -> tuple[Network, History]:
    """Mini-batch Adam on the MSE loss; returns the final-epoch network.

    Batches are drawn from a per-epoch permutation seeded by
    ``cfg.shuffle_seed``; the last batch may be smaller. No early stopping.
    """
    if cfg.loss != "mse":
        raise ValueError(f"unsupported loss {cfg.loss!r}")
    net = net.copy()
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    n = len(x_train)
    state = AdamState.fresh(net.n_params, lr=cfg.lr)
    hist = History()
    for epoch in range(cfg.epochs):
        order = RngStream(cfg.shuffle_seed, substream_id(epoch, tag=3)).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grad = net.backward(x_train[idx], y_train[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, b, loss)
            total += loss * len(idx)
            adam_step(state, net.parameters, grad)
        hist.train_loss.append(total / n)
        hist.valid_loss.append(_mse(net, x_valid, y_valid) if x_valid is not None else float("nan"))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} train {hist.train_loss[-1]:.6g} "
                f"valid {hist.valid_loss[-1]:.6g}")
    return net, hist
