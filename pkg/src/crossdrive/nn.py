"""Minimal CPU neural-network engine used by both RL algorithms.

Sequential networks of Conv2D / Dense / ReLU / Flatten / Softmax layers
with exact reverse-mode gradients, He-uniform initialization, SGD and
Adam, and a small binary weight format. Training arithmetic is float32;
building a network with dtype=float64 gives the shadow mode used by
finite-difference gradient checks.

Convolution runs as im2col + matmul. When kernel == stride (the
downsampling layout used by the compact default nets) im2col degenerates
to a reshape, which keeps single-core training runs cheap.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Input or parameter shapes do not chain consistently."""


class WeightFormatError(ValueError):
    """Weight file failed validation."""


def scale_frames(stacked: np.ndarray) -> np.ndarray:
    """Map uint8 pixel intensities to [0, 1] float32 network inputs."""
    return np.asarray(stacked, dtype=np.float32) / 255.0


class Layer:
    kind_code: int = 0

    def build(self, in_shape: tuple[int, ...], rng: np.random.Generator,
              dtype: np.dtype) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
        raise NotImplementedError

    @property
    def params(self) -> list[np.ndarray]:
        return []

    @property
    def grads(self) -> list[np.ndarray]:
        return []


class Conv2D(Layer):
    kind_code = 1

    def __init__(self, out_channels: int, kernel: int, stride: int):
        if out_channels <= 0 or kernel <= 0 or stride <= 0:
            raise ShapeError("Conv2D arguments must be positive")
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.w: np.ndarray | None = None
        self.b: np.ndarray | None = None
        self._dw: np.ndarray | None = None
        self._db: np.ndarray | None = None
        self._cols: np.ndarray | None = None
        self._x_shape: tuple[int, ...] | None = None

    def build(self, in_shape, rng, dtype):
        if len(in_shape) != 3:
            raise ShapeError(f"Conv2D expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        k, s = self.kernel, self.stride
        if h < k or w < k:
            raise ShapeError(f"kernel {k} larger than input {in_shape}")
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        fan_in = c * k * k
        limit = np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(-limit, limit, size=(self.out_channels, c, k, k)).astype(dtype)
        self.b = np.zeros(self.out_channels, dtype=dtype)
        return (self.out_channels, oh, ow)

    def _im2col(self, x: np.ndarray) -> tuple[np.ndarray, int, int]:
        bsz, c, h, w = x.shape
        k, s = self.kernel, self.stride
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        if k == s and h == oh * k and w == ow * k:
            cols = x.reshape(bsz, c, oh, k, ow, k).transpose(0, 2, 4, 1, 3, 5)
        else:
            sb, sc, sh, sw = x.strides
            windows = np.lib.stride_tricks.as_strided(
                x, shape=(bsz, c, oh, ow, k, k),
                strides=(sb, sc, sh * s, sw * s, sh, sw), writeable=False)
            cols = windows.transpose(0, 2, 3, 1, 4, 5)
        return np.ascontiguousarray(cols).reshape(bsz * oh * ow, c * k * k), oh, ow

    def forward(self, x):
        if self.w is None:
            raise RuntimeError("layer not built")
        if not x.flags.c_contiguous:
            x = np.ascontiguousarray(x)
        cols, oh, ow = self._im2col(x)
        self._cols = cols
        self._x_shape = x.shape
        wmat = self.w.reshape(self.out_channels, -1)
        out = cols @ wmat.T
        out += self.b
        return out.reshape(x.shape[0], oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout, need_input_grad=True):
        if self._cols is None:
            raise RuntimeError("backward called before forward")
        bsz, c, h, w = self._x_shape
        k, s = self.kernel, self.stride
        _, _, oh, ow = dout.shape
        dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, self.out_channels)
        self._dw = (dmat.T @ self._cols).reshape(self.w.shape)
        self._db = dmat.sum(axis=0)
        if not need_input_grad:
            return None
        dcols = dmat @ self.w.reshape(self.out_channels, -1)
        dcols = dcols.reshape(bsz, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        dx = np.zeros(self._x_shape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, :, i, j]
        return dx

    @property
    def params(self):
        return [self.w, self.b]

    @property
    def grads(self):
        return [self._dw, self._db]


class Dense(Layer):
    kind_code = 2

    def __init__(self, out_dim: int):
        if out_dim <= 0:
            raise ShapeError("Dense out_dim must be positive")
        self.out_dim = out_dim
        self.w: np.ndarray | None = None
        self.b: np.ndarray | None = None
        self._dw: np.ndarray | None = None
        self._db: np.ndarray | None = None
        self._x: np.ndarray | None = None

    def build(self, in_shape, rng, dtype):
        if len(in_shape) != 1:
            raise ShapeError(f"Dense expects flat input, got {in_shape} (add Flatten?)")
        fan_in = in_shape[0]
        limit = np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(-limit, limit, size=(fan_in, self.out_dim)).astype(dtype)
        self.b = np.zeros(self.out_dim, dtype=dtype)
        return (self.out_dim,)

    def forward(self, x):
        if self.w is None:
            raise RuntimeError("layer not built")
        self._x = x
        return x @ self.w + self.b

    def backward(self, dout, need_input_grad=True):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self._dw = self._x.T @ dout
        self._db = dout.sum(axis=0)
        if not need_input_grad:
            return None
        return dout @ self.w.T

    @property
    def params(self):
        return [self.w, self.b]

    @property
    def grads(self):
        return [self._dw, self._db]


class ReLU(Layer):
    kind_code = 3

    def __init__(self):
        self._mask: np.ndarray | None = None

    def build(self, in_shape, rng, dtype):
        return in_shape

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout, need_input_grad=True):
        if self._mask is None:
            raise RuntimeError("backward called before forward")
        return dout * self._mask


class Flatten(Layer):
    kind_code = 4

    def __init__(self):
        self._in_shape: tuple[int, ...] | None = None

    def build(self, in_shape, rng, dtype):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout, need_input_grad=True):
        if self._in_shape is None:
            raise RuntimeError("backward called before forward")
        return dout.reshape(self._in_shape)


class Softmax(Layer):
    kind_code = 5

    def __init__(self):
        self._out: np.ndarray | None = None

    def build(self, in_shape, rng, dtype):
        if len(in_shape) != 1:
            raise ShapeError(f"Softmax expects flat input, got {in_shape}")
        return in_shape

    def forward(self, x):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self._out = e / e.sum(axis=1, keepdims=True)
        return self._out

    def backward(self, dout, need_input_grad=True):
        if self._out is None:
            raise RuntimeError("backward called before forward")
        s = self._out
        return (dout - (dout * s).sum(axis=1, keepdims=True)) * s


_KIND_TO_CLASS = {1: Conv2D, 2: Dense, 3: ReLU, 4: Flatten, 5: Softmax}

#: paper-scale default; desk-scale experiment configs override this
DEFAULT_ARCH = "conv:16:8:4,relu,conv:32:4:2,relu,flatten,dense:256,relu"


def parse_arch(spec: str) -> list[Layer]:
    """Parse a compact layer list like ``conv:8:8:8,relu,flatten,dense:64``.

    Tokens: ``conv:OUT:KERNEL:STRIDE``, ``dense:N``, ``relu``, ``flatten``,
    ``softmax``. Heads (Q-values, logits, value) are appended by the
    callers, not written in the spec string.
    """
    layers: list[Layer] = []
    for token in spec.split(","):
        token = token.strip().lower()
        if not token:
            continue
        parts = token.split(":")
        try:
            if parts[0] == "conv" and len(parts) == 4:
                layers.append(Conv2D(int(parts[1]), int(parts[2]), int(parts[3])))
            elif parts[0] == "dense" and len(parts) == 2:
                layers.append(Dense(int(parts[1])))
            elif parts == ["relu"]:
                layers.append(ReLU())
            elif parts == ["flatten"]:
                layers.append(Flatten())
            elif parts == ["softmax"]:
                layers.append(Softmax())
            else:
                raise ValueError
        except ValueError:
            raise ShapeError(f"cannot parse architecture token {token!r}") from None
    if not layers:
        raise ShapeError("empty architecture spec")
    return layers


def split_arch_at_flatten(spec: str) -> tuple[str, str]:
    """Split an arch string into (trunk through flatten, head remainder)."""
    tokens = [t.strip() for t in spec.split(",") if t.strip()]
    flat_positions = [i for i, t in enumerate(tokens) if t.lower() == "flatten"]
    if not flat_positions:
        raise ShapeError("architecture needs a flatten token to split a trunk off")
    i = flat_positions[-1]
    return ",".join(tokens[:i + 1]), ",".join(tokens[i + 1:])


class Network:
    """Ordered layer stack with explicit build-time shape checking."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...],
                 seed: int = 0, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, rng, self.dtype)
        self.output_shape = shape
        self._forward_done = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"expected batch of {self.input_shape}, got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        self._forward_done = True
        return x

    def backward(self, dout: np.ndarray,
                 need_input_grad: bool = False) -> tuple[list[np.ndarray], np.ndarray | None]:
        """Backpropagate ``dout`` and return (parameter grads, input grad).

        Gradients align with :attr:`params`. The input gradient is only
        materialized when requested; the first layer of a stack rarely
        needs it.
        """
        if not self._forward_done:
            raise RuntimeError("backward called before forward")
        grad = np.asarray(dout, dtype=self.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            want = need_input_grad or i > 0
            grad = self.layers[i].backward(grad, need_input_grad=want)
        return self.grads, grad

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        own = self.params
        if len(own) != len(values):
            raise ShapeError(f"expected {len(own)} parameter arrays, got {len(values)}")
        for dst, src in zip(own, values):
            if dst.shape != src.shape:
                raise ShapeError(f"parameter shape {src.shape} != expected {dst.shape}")
            dst[...] = src

    def copy_params_from(self, other: "Network") -> None:
        self.set_params(other.params)

    def clone(self) -> "Network":
        dup = Network(_clone_layer_specs(self.layers), self.input_shape,
                      seed=self.seed, dtype=self.dtype)
        dup.copy_params_from(self)
        return dup


def _clone_layer_specs(layers: Sequence[Layer]) -> list[Layer]:
    out: list[Layer] = []
    for layer in layers:
        if isinstance(layer, Conv2D):
            out.append(Conv2D(layer.out_channels, layer.kernel, layer.stride))
        elif isinstance(layer, Dense):
            out.append(Dense(layer.out_dim))
        else:
            out.append(type(layer)())
    return out


class SGD:
    """Plain gradient step: theta <- theta - lr * grad."""

    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = lr
        self.step_count = 0
        self.skipped = 0

    def update(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> bool:
        if not _all_finite(grads):
            self.skipped += 1
            return False
        self.step_count += 1
        for p, g in zip(params, grads):
            p -= self.lr * g
        return True


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.skipped = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def update(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> bool:
        if not _all_finite(grads):
            self.skipped += 1
            return False
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


def _all_finite(arrays: Sequence[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient w.r.t. pred."""
    diff = pred - target
    loss = float(np.mean(np.square(diff)))
    return loss, (2.0 / diff.size) * diff


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def save_weights(path: str | Path, nets: Sequence[Network]) -> None:
    """Write all layers of ``nets`` in order to a little-endian NNW1 file.

    Record layout per layer: u8 kind, then for each parameter array a
    shape-prefixed blob (u32 rank, u32 dims, f32 payload).
    """
    out = bytearray()
    out += b"NNW1"
    layer_count = sum(len(net.layers) for net in nets)
    out += struct.pack("<I", layer_count)
    for net in nets:
        for layer in net.layers:
            out += struct.pack("<B", layer.kind_code)
            for p in layer.params:
                out += struct.pack("<I", p.ndim)
                out += struct.pack(f"<{p.ndim}I", *p.shape)
                out += p.astype("<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def load_weights(path: str | Path, nets: Sequence[Network]) -> None:
    """Load an NNW1 file into ``nets``, validating kinds and shapes."""
    data = Path(path).read_bytes()
    if data[:4] != b"NNW1":
        raise WeightFormatError(f"{path}: bad magic {data[:4]!r}")
    pos = 4
    try:
        (layer_count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        expected = sum(len(net.layers) for net in nets)
        if layer_count != expected:
            raise WeightFormatError(
                f"{path}: file has {layer_count} layers, architecture has {expected}")
        for net in nets:
            for layer in net.layers:
                (kind,) = struct.unpack_from("<B", data, pos)
                pos += 1
                if kind != layer.kind_code:
                    raise WeightFormatError(
                        f"{path}: layer kind {kind} != expected "
                        f"{layer.kind_code} ({type(layer).__name__})")
                for p in layer.params:
                    (rank,) = struct.unpack_from("<I", data, pos)
                    pos += 4
                    dims = struct.unpack_from(f"<{rank}I", data, pos)
                    pos += 4 * rank
                    if dims != p.shape:
                        raise WeightFormatError(
                            f"{path}: stored shape {tuple(dims)} != architecture "
                            f"shape {p.shape}")
                    count = int(np.prod(dims)) if rank else 1
                    values = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
                    pos += 4 * count
                    p[...] = values.reshape(p.shape).astype(p.dtype)
    except struct.error as exc:
        raise WeightFormatError(f"{path}: truncated file ({exc})") from exc
    if pos != len(data):
        raise WeightFormatError(f"{path}: {len(data) - pos} trailing bytes")
