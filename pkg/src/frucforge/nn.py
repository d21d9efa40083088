"""Minimal tensor engine for the detector network.

Only the layers the network needs, each with a forward pass and an analytic
backward pass over plain numpy arrays (NCHW).  Convolution is defined as
cross-correlation (no kernel flip).  Compute dtype follows the parameter
dtype: float32 in production, float64 when a test wants tight
finite-difference comparisons.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInputError


# ---------------------------------------------------------------------------
# Parameter storage and Adam
# ---------------------------------------------------------------------------


class Param:
    __slots__ = ("name", "value", "grad", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.adam_m = np.zeros_like(value)
        self.adam_v = np.zeros_like(value)
        self.step_count = 0


class ParamStore:
    """Ordered named parameters with Adam state, plus non-trainable buffers
    (batch-norm running statistics)."""

    def __init__(self):
        self._params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise InvalidInputError(f"duplicate parameter name {name!r}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise InvalidInputError(f"duplicate buffer name {name!r}")
        self.buffers[name] = value
        return value

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def params(self):
        return self._params.values()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad[...] = 0

    def num_elements(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self._params.values()}
        return out

    def clone_values(self) -> dict[str, np.ndarray]:
        vals = {p.name: p.value.copy() for p in self._params.values()}
        vals.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return vals

    def load_values(self, vals: dict[str, np.ndarray]):
        for p in self._params.values():
            p.value[...] = vals[p.name]
        for k, v in self.buffers.items():
            v[...] = vals[f"buffer:{k}"]


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Classic Adam with bias correction; weight decay enters the gradient
    as a coupled L2 term."""
    for p in store.params():
        if p.grad is None:
            raise InvalidInputError(f"parameter {p.name} has no gradient")
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.value
        p.step_count += 1
        t = p.step_count
        p.adam_m[...] = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v[...] = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Functional ops
# ---------------------------------------------------------------------------


def _conv_check(x, w, stride, pad, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidInputError("conv expects 4-D input and weights")
    B, C, H, W = x.shape
    Co, Cg, k, k2 = w.shape
    if k != k2:
        raise InvalidInputError("conv kernel must be square")
    if C % groups or Co % groups:
        raise InvalidInputError(f"groups={groups} must divide channels {C}->{Co}")
    if Cg != C // groups:
        raise InvalidInputError(
            f"weight expects {Cg} channels per group, input provides {C // groups}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise InvalidInputError("conv output would be empty")
    return B, C, H, W, Co, Cg, k, Ho, Wo


def _im2col(xg: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """(B, G, Cg, Hp, Wp) padded input -> (B, G, Cg * k * k, Ho * Wo) columns."""
    B, G, Cg = xg.shape[:3]
    cols = np.empty((B, G, Cg, k * k, Ho, Wo), dtype=xg.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, :, ki * k + kj] = xg[:, :, :, ki:ki + (Ho - 1) * stride + 1:stride,
                                            kj:kj + (Wo - 1) * stride + 1:stride]
    return cols.reshape(B, G, Cg * k * k, Ho * Wo)


def conv2d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
               stride: int = 1, pad: int = 0, groups: int = 1) -> np.ndarray:
    """Grouped cross-correlation.  Output spatial size is
    floor((H + 2 pad - k) / stride) + 1."""
    B, C, H, W, Co, Cg, k, Ho, Wo = _conv_check(x, w, stride, pad, groups)
    G = groups
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xg = xp.reshape(B, G, Cg, xp.shape[2], xp.shape[3])
    cols = _im2col(xg, k, stride, Ho, Wo)
    w2 = w.reshape(G, Co // G, Cg * k * k)
    out = np.matmul(w2, cols).reshape(B, Co, Ho, Wo)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def conv2d_bwd(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray,
               stride: int = 1, pad: int = 0, groups: int = 1,
               has_bias: bool = False):
    """Analytic gradients of conv2d_fwd; returns (grad_x, grad_w, grad_b)."""
    B, C, H, W, Co, Cg, k, Ho, Wo = _conv_check(x, w, stride, pad, groups)
    if grad_out.shape != (B, Co, Ho, Wo):
        raise InvalidInputError(
            f"grad_out shape {grad_out.shape} != forward output {(B, Co, Ho, Wo)}")
    G = groups
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xg = xp.reshape(B, G, Cg, xp.shape[2], xp.shape[3])
    cols = _im2col(xg, k, stride, Ho, Wo)
    w2 = w.reshape(G, Co // G, Cg * k * k)
    go = grad_out.reshape(B, G, Co // G, Ho * Wo)

    gw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(Co, Cg, k, k)
    gcols = np.matmul(w2.transpose(0, 2, 1), go).reshape(B, G, Cg, k * k, Ho, Wo)
    gx_pad = np.zeros_like(xg)
    for ki in range(k):
        for kj in range(k):
            gx_pad[:, :, :, ki:ki + (Ho - 1) * stride + 1:stride,
                   kj:kj + (Wo - 1) * stride + 1:stride] += gcols[:, :, :, ki * k + kj]
    gx_pad = gx_pad.reshape(B, C, xp.shape[2], xp.shape[3])
    gx = gx_pad[:, :, pad:pad + H, pad:pad + W] if pad else gx_pad
    gb = grad_out.sum(axis=(0, 2, 3)) if has_bias else None
    return gx, gw, gb


def batchnorm_fwd(x, gamma, beta, running_mean, running_var, eps: float = 1e-5,
                  momentum: float = 0.1, training: bool = False):
    """Per-channel batch norm over (B, H, W); returns (out, cache).

    Training mode normalizes with batch statistics and folds them into the
    running statistics; eval mode normalizes with the running statistics.
    """
    if x.shape[1] != gamma.shape[0]:
        raise InvalidInputError(
            f"batchnorm channel mismatch: input {x.shape[1]}, gamma {gamma.shape[0]}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[...] = (1.0 - momentum) * running_var + momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
    cache = (x_hat, inv_std, gamma, training)
    return out, cache


def batchnorm_bwd(grad_out, cache):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    x_hat, inv_std, gamma, training = cache
    g_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    g_beta = grad_out.sum(axis=(0, 2, 3))
    g_xhat = grad_out * gamma[None, :, None, None]
    if not training:
        return g_xhat * inv_std[None, :, None, None], g_gamma, g_beta
    n = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    mean_g = g_xhat.mean(axis=(0, 2, 3))
    mean_gx = (g_xhat * x_hat).mean(axis=(0, 2, 3))
    gx = (g_xhat - mean_g[None, :, None, None]
          - x_hat * mean_gx[None, :, None, None]) * inv_std[None, :, None, None]
    return gx, g_gamma, g_beta


def relu_fwd(x):
    mask = x > 0
    return x * mask, mask


def relu_bwd(grad_out, mask):
    return grad_out * mask


def avgpool_fwd(x, k: int = 2, stride: int = 2):
    B, C, H, W = x.shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            out += x[:, :, ki:ki + (Ho - 1) * stride + 1:stride,
                     kj:kj + (Wo - 1) * stride + 1:stride]
    return out / (k * k), (x.shape, k, stride)


def avgpool_bwd(grad_out, cache):
    shape, k, stride = cache
    Ho, Wo = grad_out.shape[2], grad_out.shape[3]
    gx = np.zeros(shape, dtype=grad_out.dtype)
    g = grad_out / (k * k)
    for ki in range(k):
        for kj in range(k):
            gx[:, :, ki:ki + (Ho - 1) * stride + 1:stride,
               kj:kj + (Wo - 1) * stride + 1:stride] += g
    return gx


def global_avg_pool_fwd(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_bwd(grad_out, shape):
    B, C, H, W = shape
    return np.broadcast_to(grad_out[:, :, None, None] / (H * W), shape).copy()


def fully_connected_fwd(x, w, b):
    if x.shape[1] != w.shape[1]:
        raise InvalidInputError(f"fc shape mismatch: {x.shape} vs {w.shape}")
    return x @ w.T + b


def fully_connected_bwd(x, w, grad_out):
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def bce_loss(probs: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood over (B, 2) class probabilities.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log.  The
    returned gradient is with respect to the logits feeding the softmax
    (fused softmax-cross-entropy backward): (probs - onehot) / B.
    """
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise InvalidInputError(f"probs must be (B, 2), got {probs.shape}")
    if np.any((labels != 0) & (labels != 1)):
        raise InvalidInputError("labels must be 0 (original) or 1 (forged)")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-5):
        raise InvalidInputError("probability rows must sum to 1")
    n = probs.shape[0]
    p = np.clip(probs[np.arange(n), labels], 1e-7, 1.0 - 1e-7)
    loss = float(-np.log(p).mean())
    one_hot = np.zeros_like(probs)
    one_hot[np.arange(n), labels] = 1.0
    grad_logits = (probs - one_hot) / n
    return loss, grad_logits


# ---------------------------------------------------------------------------
# Layer objects (stateful wrappers used to assemble networks)
# ---------------------------------------------------------------------------


class Layer:
    def forward(self, x, training: bool = False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def out_shape(self, shape):
        return shape

    def macs(self, shape) -> int:
        return 0


class Conv2d(Layer):
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 stride: int = 1, pad: int = 0, groups: int = 1, bias: bool = False,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        fan_in = k * k * c_in // groups
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       size=(c_out, c_in // groups, k, k)).astype(dtype)
        self.w = store.add(f"{name}.w", w)
        self.b = store.add(f"{name}.b", np.zeros(c_out, dtype=dtype)) if bias else None
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.pad, self.groups = stride, pad, groups

    def forward(self, x, training: bool = False):
        self._x = x
        return conv2d_fwd(x, self.w.value, self.b.value if self.b else None,
                          self.stride, self.pad, self.groups)

    def backward(self, grad_out):
        gx, gw, gb = conv2d_bwd(self._x, self.w.value, grad_out, self.stride,
                                self.pad, self.groups, has_bias=self.b is not None)
        self.w.grad += gw
        if self.b is not None:
            self.b.grad += gb
        self._x = None
        return gx

    def out_shape(self, shape):
        c, h, w = shape
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        return (self.c_out, ho, wo)

    def macs(self, shape) -> int:
        _, ho, wo = self.out_shape(shape)
        return self.c_out * ho * wo * (self.k * self.k * self.c_in // self.groups)


class BatchNorm2d(Layer):
    def __init__(self, store: ParamStore, name: str, c: int, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float32):
        self.gamma = store.add(f"{name}.gamma", np.ones(c, dtype=dtype))
        self.beta = store.add(f"{name}.beta", np.zeros(c, dtype=dtype))
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(c, dtype=dtype))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(c, dtype=dtype))
        self.eps, self.momentum = eps, momentum

    def forward(self, x, training: bool = False):
        out, self._cache = batchnorm_fwd(x, self.gamma.value, self.beta.value,
                                         self.running_mean, self.running_var,
                                         self.eps, self.momentum, training)
        return out

    def backward(self, grad_out):
        gx, gg, gb = batchnorm_bwd(grad_out, self._cache)
        self.gamma.grad += gg
        self.beta.grad += gb
        self._cache = None
        return gx


class ReLU(Layer):
    def forward(self, x, training: bool = False):
        out, self._mask = relu_fwd(x)
        return out

    def backward(self, grad_out):
        gx = relu_bwd(grad_out, self._mask)
        self._mask = None
        return gx


class AvgPool2d(Layer):
    def __init__(self, k: int = 2, stride: int = 2):
        self.k, self.stride = k, stride

    def forward(self, x, training: bool = False):
        out, self._cache = avgpool_fwd(x, self.k, self.stride)
        return out

    def backward(self, grad_out):
        return avgpool_bwd(grad_out, self._cache)

    def out_shape(self, shape):
        c, h, w = shape
        return (c, (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1)


class GlobalAvgPool(Layer):
    def forward(self, x, training: bool = False):
        out, self._shape = global_avg_pool_fwd(x)
        return out

    def backward(self, grad_out):
        return global_avg_pool_bwd(grad_out, self._shape)

    def out_shape(self, shape):
        return (shape[0],)


class Linear(Layer):
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_out, c_in)).astype(dtype)
        self.w = store.add(f"{name}.w", w)
        self.b = store.add(f"{name}.b", np.zeros(c_out, dtype=dtype))
        self.c_in, self.c_out = c_in, c_out

    def forward(self, x, training: bool = False):
        self._x = x
        return fully_connected_fwd(x, self.w.value, self.b.value)

    def backward(self, grad_out):
        gx, gw, gb = fully_connected_bwd(self._x, self.w.value, grad_out)
        self.w.grad += gw
        self.b.grad += gb
        self._x = None
        return gx

    def out_shape(self, shape):
        return (self.c_out,)

    def macs(self, shape) -> int:
        return self.c_in * self.c_out


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x, training: bool = False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def macs(self, shape) -> int:
        total = 0
        for layer in self.layers:
            total += layer.macs(shape)
            shape = layer.out_shape(shape)
        return total


class ResidualUnit(Layer):
    """x + body(x); body must preserve the input shape."""

    def __init__(self, body: Layer):
        self.body = body

    def forward(self, x, training: bool = False):
        return x + self.body.forward(x, training)

    def backward(self, grad_out):
        return grad_out + self.body.backward(grad_out)

    def macs(self, shape) -> int:
        return self.body.macs(shape)


class TwoPath(Layer):
    """Elementwise sum of two parallel paths (downsampling block)."""

    def __init__(self, path_a: Layer, path_b: Layer):
        self.path_a = path_a
        self.path_b = path_b

    def forward(self, x, training: bool = False):
        a = self.path_a.forward(x, training)
        b = self.path_b.forward(x, training)
        if a.shape != b.shape:
            raise InvalidInputError(
                f"two-path shapes differ: {a.shape} vs {b.shape}")
        return a + b

    def backward(self, grad_out):
        return self.path_a.backward(grad_out) + self.path_b.backward(grad_out)

    def out_shape(self, shape):
        return self.path_a.out_shape(shape)

    def macs(self, shape) -> int:
        return self.path_a.macs(shape) + self.path_b.macs(shape)


def depthwise_separable(store: ParamStore, name: str, c_in: int, c_out: int, k: int = 3,
                        stride: int = 1, pad: int = 1, rng=None, dtype=np.float32) -> Sequential:
    """Depthwise k x k conv followed by a 1 x 1 pointwise conv."""
    return Sequential(
        Conv2d(store, f"{name}.dw", c_in, c_in, k, stride=stride, pad=pad,
               groups=c_in, rng=rng, dtype=dtype),
        Conv2d(store, f"{name}.pw", c_in, c_out, 1, rng=rng, dtype=dtype),
    )


def count_params(store: ParamStore) -> int:
    """Trainable element count (running statistics excluded)."""
    return store.num_elements()


def count_macs(net: Layer, input_shape: tuple[int, int, int]) -> int:
    """Multiply-accumulate count for one sample of shape (C, H, W)."""
    return net.macs(input_shape)


# ---------------------------------------------------------------------------
# Checkpoint file: magic "FCDW", u32 version, length-prefixed manifest text
# (key=value lines), array table, float32 payloads, trailing CRC32.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"FCDW"
_CKPT_VERSION = 1


def save_checkpoint(path, store: ParamStore, manifest: dict[str, str]) -> None:
    body = bytearray()
    body += _CKPT_MAGIC
    body += struct.pack("<I", _CKPT_VERSION)
    text = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
    body += struct.pack("<I", len(text)) + text
    entries = [(0, p.name, p.value) for p in store.params()]
    entries += [(1, name, arr) for name, arr in store.buffers.items()]
    body += struct.pack("<I", len(entries))
    for kind, name, arr in entries:
        nb = name.encode("utf-8")
        body += struct.pack("<BH", kind, len(nb)) + nb
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path):
    """Returns (params dict, buffers dict, manifest dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    if len(raw) < 8 + 4:
        raise FormatError(f"{path}: truncated checkpoint", offset=len(raw))
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise FormatError(f"{path}: checkpoint CRC mismatch", offset=len(raw) - 4)
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    pos = 8
    (text_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    manifest = {}
    for line in raw[pos:pos + text_len].decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            manifest[key] = value
    pos += text_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for _ in range(count):
        kind, name_len = struct.unpack_from("<BH", raw, pos)
        pos += 3
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
        (buffers if kind else params)[name] = arr
    return params, buffers, manifest
