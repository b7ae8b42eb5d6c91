"""Array primitives, layers with exact backpropagation, losses and checkpoints.

Tensors are plain ``numpy.ndarray`` objects in float64. Image-like tensors
use a batch-first, channels-last layout ``(N, H, W, C)``; single samples
``(H, W, C)`` are accepted by the functional helpers. Dense weights are
stored ``(out, in)``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, DomainError, InvalidSpec, MalformedFile, StaleCache

DTYPE = np.float64


# ---------------------------------------------------------------------------
# Specs and configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    filter_size: int
    padding: int = 0
    stride: int = 1
    num_filters: int = 1

    def __post_init__(self):
        if self.filter_size < 1 or self.stride < 1 or self.padding < 0:
            raise InvalidSpec(f"invalid convolution spec {self}")
        if self.num_filters < 1:
            raise InvalidSpec("num_filters must be positive")

    def output_size(self, w1: int) -> int:
        return output_extent(w1, self.filter_size, self.padding, self.stride)


def output_extent(w1: int, f: int, p: int = 0, s: int = 1) -> int:
    """Output side length ``(W1 - F + 2P) / S + 1`` of a square convolution.

    Raises
    ------
    InvalidSpec
        If the stride does not tile the padded input exactly.
    """
    span = w1 - f + 2 * p
    if span < 0 or span % s:
        raise InvalidSpec(f"(W1 - F + 2P) = {span} is not a nonnegative multiple of S = {s}")
    return span // s + 1


@dataclass(frozen=True)
class LossConfig:
    l2_weight: float = 0.0
    sparsity_weight: float = 0.0
    sparsity_target: float = 0.05
    mode: str = "composite"

    def __post_init__(self):
        if self.mode not in ("composite", "mse_only"):
            raise InvalidSpec(f"unknown loss mode {self.mode!r}")
        if self.l2_weight < 0 or self.sparsity_weight < 0:
            raise InvalidSpec("loss weights must be nonnegative")
        if not 0.0 < self.sparsity_target < 1.0:
            raise InvalidSpec("sparsity_target must lie in (0, 1)")

    @property
    def lam(self) -> float:
        return 0.0 if self.mode == "mse_only" else self.l2_weight

    @property
    def beta(self) -> float:
        return 0.0 if self.mode == "mse_only" else self.sparsity_weight


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    mse: float
    l2: float
    kl: float


# ---------------------------------------------------------------------------
# Functional primitives
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def activate(x, kind: str = "sigmoid"):
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    if kind == "identity":
        return np.asarray(x, dtype=DTYPE)
    raise InvalidSpec(f"unknown activation {kind!r}")


def reshape(x, new_dims):
    x = np.asarray(x)
    new_dims = tuple(int(d) for d in np.atleast_1d(new_dims))
    if int(np.prod(new_dims)) != x.size:
        raise DimensionMismatch(f"cannot reshape {x.shape} ({x.size} values) to {new_dims}")
    return x.reshape(new_dims)


def _as_batch(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionMismatch(f"expected (H, W, C) or (N, H, W, C), got {x.shape}")


def _im2col(x, f, stride):
    # (N, H, W, C) -> (N, Ho, Wo, F, F, C), strided view copied to contiguous rows
    win = sliding_window_view(x, (f, f), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * ho * wo, -1), (n, ho, wo)


def conv2d(x, filters, bias, spec: ConvSpec):
    """Cross-correlate a batch with ``(F, F, C, K)`` filters and add a bias.

    The output side is ``(W1 - F + 2P) / S + 1``; no activation is applied.
    """
    xb, single = _as_batch(x)
    filters = np.asarray(filters, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    f = spec.filter_size
    if filters.ndim != 4 or filters.shape[:2] != (f, f):
        raise DimensionMismatch(f"filters {filters.shape} do not match F={f}")
    if filters.shape[2] != xb.shape[3]:
        raise DimensionMismatch(
            f"filter channels {filters.shape[2]} != input channels {xb.shape[3]}")
    if xb.shape[1] != xb.shape[2]:
        raise DimensionMismatch("only square inputs are supported")
    if bias.shape != (filters.shape[3],):
        raise DimensionMismatch(f"bias {bias.shape} vs {filters.shape[3]} filters")
    output_extent(xb.shape[1], f, spec.padding, spec.stride)
    if spec.padding:
        p = spec.padding
        xb = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
    cols, (n, ho, wo) = _im2col(xb, f, spec.stride)
    out = (cols @ filters.reshape(-1, filters.shape[3]) + bias).reshape(n, ho, wo, -1)
    return out[0] if single else out


def pool2d(x, window: int, mode: str = "average"):
    """Non-overlapping ``window x window`` pooling (stride equals window)."""
    xb, single = _as_batch(x)
    n, h, w, c = xb.shape
    if window < 1 or h % window or w % window:
        raise InvalidSpec(f"pool window {window} does not divide {h}x{w}")
    blocks = xb.reshape(n, h // window, window, w // window, window, c)
    if mode == "average":
        out = blocks.mean(axis=(2, 4))
    elif mode == "max":
        out = blocks.max(axis=(2, 4))
    else:
        raise InvalidSpec(f"unknown pooling mode {mode!r}")
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def kl_divergence(rho: float, rho_hat):
    """Bernoulli KL(rho || rho_hat), elementwise over ``rho_hat``."""
    rho_hat = np.asarray(rho_hat, dtype=DTYPE)
    return rho * np.log(rho / rho_hat) + (1 - rho) * np.log((1 - rho) / (1 - rho_hat))


def _check_rho_hat(rho_hat):
    if rho_hat.size and (np.any(rho_hat <= 0.0) or np.any(rho_hat >= 1.0)):
        raise DomainError("mean activations must lie strictly inside (0, 1)")


def loss_terms(prediction, target, weights=(), mean_activations=None,
               cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """MSE plus optional L2 weight decay and KL sparsity penalty.

    ``total = mean((pred - target)^2) + lam * sum(W^2) + beta * sum_j KL(rho || rho_hat_j)``.
    In ``mse_only`` mode the regularisers are dropped.
    """
    prediction = np.asarray(prediction, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if prediction.shape != target.shape:
        raise DimensionMismatch(f"prediction {prediction.shape} vs target {target.shape}")
    mse = float(np.mean((prediction - target) ** 2))
    l2 = kl = 0.0
    if cfg.lam > 0:
        l2 = cfg.lam * float(sum(np.sum(np.asarray(w) ** 2) for w in weights))
    if cfg.beta > 0 and mean_activations is not None:
        rho_hat = np.asarray(mean_activations, dtype=DTYPE)
        _check_rho_hat(rho_hat)
        kl = cfg.beta * float(np.sum(kl_divergence(cfg.sparsity_target, rho_hat)))
    return LossBreakdown(total=mse + l2 + kl, mse=mse, l2=l2, kl=kl)


def loss_gradients(prediction, target, weights=(), mean_activations=None,
                   cfg: LossConfig = LossConfig()):
    """Gradients of :func:`loss_terms` w.r.t. prediction, each weight and rho_hat.

    Returns ``(d_prediction, [d_weight, ...], d_rho_hat or None)``.
    """
    prediction = np.asarray(prediction, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    d_pred = 2.0 * (prediction - target) / prediction.size
    d_w = [2.0 * cfg.lam * np.asarray(w) if cfg.lam > 0 else np.zeros_like(w)
           for w in weights]
    d_rho = None
    if mean_activations is not None:
        rho_hat = np.asarray(mean_activations, dtype=DTYPE)
        if cfg.beta > 0:
            _check_rho_hat(rho_hat)
            rho = cfg.sparsity_target
            d_rho = cfg.beta * (-rho / rho_hat + (1 - rho) / (1 - rho_hat))
        else:
            d_rho = np.zeros_like(rho_hat)
    return d_pred, d_w, d_rho


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """A differentiable stage. Subclasses cache what backward() needs."""

    params: dict
    weight_keys: tuple = ()

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, input_grad=True):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StaleCache(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


class Conv2D(Layer):
    weight_keys = ("W",)

    def __init__(self, spec: ConvSpec, in_channels: int = 1):
        super().__init__()
        self.spec = spec
        f = spec.filter_size
        self.params = {"W": np.zeros((f, f, in_channels, spec.num_filters)),
                       "b": np.zeros(spec.num_filters)}

    def forward(self, x):
        xb, _ = _as_batch(x)
        W = self.params["W"]
        if W.shape[2] != xb.shape[3]:
            raise DimensionMismatch(
                f"filter channels {W.shape[2]} != input channels {xb.shape[3]}")
        if xb.shape[1] != xb.shape[2]:
            raise DimensionMismatch("only square inputs are supported")
        output_extent(xb.shape[1], self.spec.filter_size, self.spec.padding, self.spec.stride)
        p = self.spec.padding
        if p:
            xb = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
        cols, (n, ho, wo) = _im2col(xb, self.spec.filter_size, self.spec.stride)
        out = cols @ W.reshape(-1, W.shape[3]) + self.params["b"]
        self._cache = (cols, xb.shape)
        return out.reshape(n, ho, wo, -1)

    def backward(self, dout, input_grad=True):
        cols, padded_shape = self._take_cache()
        W = self.params["W"]
        k = W.shape[3]
        d2 = dout.reshape(-1, k)
        self.grads = {"W": (cols.T @ d2).reshape(W.shape), "b": d2.sum(axis=0)}
        if not input_grad:
            return None
        n, hp, wp, c = padded_shape
        f, s, p = self.spec.filter_size, self.spec.stride, self.spec.padding
        ho, wo = dout.shape[1], dout.shape[2]
        dcols = (d2 @ W.reshape(-1, k).T).reshape(n, ho, wo, f, f, c)
        dx = np.zeros(padded_shape)
        for i in range(f):
            for j in range(f):
                dx[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
        if p:
            dx = dx[:, p:-p, p:-p, :]
        return dx


class Pool2D(Layer):
    def __init__(self, window: int, mode: str = "average"):
        super().__init__()
        if mode not in ("average", "max"):
            raise InvalidSpec(f"unknown pooling mode {mode!r}")
        self.window = window
        self.mode = mode

    def forward(self, x):
        xb, _ = _as_batch(x)
        out = pool2d(xb, self.window, self.mode)
        self._cache = xb if self.mode == "max" else xb.shape
        return out

    def backward(self, dout, input_grad=True):
        cache = self._take_cache()
        w = self.window
        if self.mode == "average":
            n, h, wd, c = cache
            return np.repeat(np.repeat(dout / (w * w), w, axis=1), w, axis=2)
        x = cache
        n, h, wd, c = x.shape
        ho, wo = h // w, wd // w
        blocks = x.reshape(n, ho, w, wo, w, c).transpose(0, 1, 3, 5, 2, 4).reshape(-1, w * w)
        # ties route the gradient to the first maximal entry only
        winner = np.argmax(blocks, axis=1)
        dblocks = np.zeros_like(blocks)
        dblocks[np.arange(blocks.shape[0]), winner] = dout.reshape(-1)
        return (dblocks.reshape(n, ho, wo, c, w, w)
                .transpose(0, 1, 4, 2, 5, 3).reshape(n, h, wd, c))


class Activation(Layer):
    def __init__(self, kind: str = "sigmoid"):
        super().__init__()
        if kind not in ("sigmoid", "relu", "identity"):
            raise InvalidSpec(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        y = activate(x, self.kind)
        self._cache = y if self.kind == "sigmoid" else np.asarray(x)
        return y

    def backward(self, dout, input_grad=True):
        cache = self._take_cache()
        if self.kind == "sigmoid":
            return dout * cache * (1.0 - cache)
        if self.kind == "relu":
            return dout * (cache > 0)
        return dout


class Reshape(Layer):
    """Reshape every sample in the batch to ``shape`` (row-major)."""

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        x = np.asarray(x)
        self._cache = x.shape
        return reshape(x, (x.shape[0],) + self.shape)

    def backward(self, dout, input_grad=True):
        return dout.reshape(self._take_cache())


class Dense(Layer):
    weight_keys = ("W",)

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.params = {"W": np.zeros((n_out, n_in)), "b": np.zeros(n_out)}

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[1]:
            raise DimensionMismatch(
                f"dense layer expects (N, {self.params['W'].shape[1]}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dout, input_grad=True):
        x = self._take_cache()
        self.grads = {"W": dout.T @ x, "b": dout.sum(axis=0)}
        return dout @ self.params["W"] if input_grad else None


class Network:
    """A fixed sequence of layers with named, flat parameter access.

    Parameter names are ``"<layer index>.<key>"``.
    """

    def __init__(self, layers):
        self.layers = list(layers)
        self.activations = []

    def forward(self, x, record=False):
        out = np.asarray(x, dtype=DTYPE)
        self.activations = []
        for layer in self.layers:
            out = layer.forward(out)
            if record:
                self.activations.append(out)
        return out

    def backward(self, dout, inject=None, input_grad=False):
        """Backpropagate ``dout``; ``inject`` adds extra gradients to layer outputs.

        Returns the gradient w.r.t. the network input when ``input_grad``.
        """
        inject = inject or {}
        grad = dout
        last = len(self.layers) - 1
        for idx in range(last, -1, -1):
            if idx in inject:
                grad = grad + inject[idx]
            grad = self.layers[idx].backward(grad, input_grad=(idx > 0 or input_grad))
        return grad

    def named_params(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.params.items()}

    def named_grads(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.grads.items()}

    def weight_names(self):
        return [f"{i}.{k}" for i, layer in enumerate(self.layers) for k in layer.weight_keys]

    def weights(self):
        params = self.named_params()
        return [params[name] for name in self.weight_names()]

    def set_params(self, params):
        for name, value in params.items():
            i, key = name.split(".", 1)
            layer = self.layers[int(i)]
            if key not in layer.params:
                raise KeyError(name)
            if layer.params[key].shape != np.shape(value):
                raise DimensionMismatch(
                    f"{name}: expected {layer.params[key].shape}, got {np.shape(value)}")
            layer.params[key] = np.array(value, dtype=DTYPE)


def network_loss(net: Network, x, target, cfg: LossConfig = LossConfig(),
                 sparse_layers=(), compute_grad=True):
    """Forward ``x`` through ``net`` and evaluate the (composite) loss.

    ``sparse_layers`` lists layer indices whose outputs are hidden sigmoid
    activations subject to the KL penalty. When ``compute_grad`` is set,
    parameter gradients are left in ``net.named_grads()``.
    """
    pred = net.forward(x, record=bool(sparse_layers))
    n = pred.shape[0]
    hidden = [net.activations[i] for i in sparse_layers]
    rho_hat = np.concatenate([h.mean(axis=0) for h in hidden]) if hidden else None
    weights = net.weights()
    breakdown = loss_terms(pred, target, weights, rho_hat, cfg)
    if not compute_grad:
        return breakdown
    d_pred, d_w, d_rho = loss_gradients(pred, target, weights, rho_hat, cfg)
    inject = {}
    offset = 0
    for idx, h in zip(sparse_layers, hidden):
        k = h.shape[1]
        if cfg.beta > 0:
            inject[idx] = np.broadcast_to(d_rho[offset:offset + k] / n, h.shape)
        offset += k
    net.backward(d_pred, inject=inject)
    if cfg.lam > 0:
        for name, dw in zip(net.weight_names(), d_w):
            i, key = name.split(".", 1)
            net.layers[int(i)].grads[key] = net.layers[int(i)].grads[key] + dw
    return breakdown


def sgd_step(params, grads, learning_rate: float):
    """Plain gradient step ``p - lr * g`` on a dict of arrays; returns a new dict."""
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise DimensionMismatch(f"{name}: gradient {np.shape(g)} vs param {np.shape(p)}")
        out[name] = p - learning_rate * g
    return out


def numeric_gradient(fn, params, step=1e-4):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``params``.

    ``params`` is a dict of arrays mutated in place during probing and
    restored afterwards.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn()
            flat[i] = orig - step
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def relative_error(analytic, numeric, floor=1e-10):
    a = np.asarray(analytic)
    b = np.asarray(numeric)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic      8 bytes  b"LVSEGCKP"
#   version    uint8    1
#   count      uint32   number of tensors
#   per tensor:
#     name_len uint16, name (UTF-8)
#     rank     uint8, extents rank x uint32
#     data     prod(extents) x float64 LE, row-major

MAGIC = b"LVSEGCKP"
VERSION = 1


def dump_checkpoint(tensors) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def parse_checkpoint(data: bytes):
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise MalformedFile(f"checkpoint truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(len(MAGIC)) != MAGIC:
        raise MalformedFile("bad checkpoint magic")
    version, count = struct.unpack("<BI", take(5))
    if version != VERSION:
        raise MalformedFile(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").astype(DTYPE).reshape(dims)
        tensors[name] = arr
    if pos != len(data):
        raise MalformedFile(f"trailing bytes after checkpoint at byte {pos}")
    return tensors


def save_checkpoint(path, tensors):
    Path(path).write_bytes(dump_checkpoint(tensors))


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
