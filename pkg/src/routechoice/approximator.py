"""Small numpy neural-network kit: conv/dense layers with explicit backward
passes, masked softmax, Adam, and a plain-text checkpoint format.

Parameters of a network live in one flat vector (``ParamSet.flat``) with named
views, so optimizer updates are single vector operations.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ParamSet:
    """Named arrays backed by a single contiguous float64 vector."""

    def __init__(self, shapes: Sequence[tuple[str, tuple]], flat: np.ndarray | None = None):
        self.shapes = [(n, tuple(int(d) for d in s)) for n, s in shapes]
        self.offsets = {}
        off = 0
        for name, shape in self.shapes:
            if name in self.offsets:
                raise ShapeError(f"duplicate parameter {name!r}")
            size = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (off, off + size, shape)
            off += size
        self.size = off
        if flat is None:
            flat = np.zeros(off)
        elif flat.shape != (off,):
            raise ShapeError(f"flat vector has shape {flat.shape}, expected ({off},)")
        self.flat = flat
        self._views = {n: flat[a:b].reshape(s) for n, (a, b, s) in self.offsets.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        self._views[name][...] = value

    def __contains__(self, name: str) -> bool:
        return name in self._views

    def names(self) -> list[str]:
        return [n for n, _ in self.shapes]

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.shapes)

    def copy(self) -> "ParamSet":
        return ParamSet(self.shapes, self.flat.copy())

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


def init_uniform(params: ParamSet, rng: np.random.Generator, fan_in: dict[str, int]) -> ParamSet:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights; biases stay zero."""
    for name, shape in params.shapes:
        if name in fan_in:
            bound = 1.0 / np.sqrt(fan_in[name])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------------------
# layers

class Layer:
    def param_shapes(self) -> list[tuple[str, tuple]]:
        return []

    def fan_in(self) -> dict[str, int]:
        return {}


@dataclass
class Conv2D(Layer):
    """Stride-1 2-D convolution over (B, H, W, C) inputs, square kernel, zero padding."""
    name: str
    cin: int
    cout: int
    kernel: int = 2
    pad: int = 0

    def param_shapes(self):
        return [(f"{self.name}.w", (self.kernel, self.kernel, self.cin, self.cout)),
                (f"{self.name}.b", (self.cout,))]

    def fan_in(self):
        return {f"{self.name}.w": self.kernel * self.kernel * self.cin}

    def out_size(self, size: int) -> int:
        return size + 2 * self.pad - self.kernel + 1

    def _index(self, H: int, W: int):
        """Gather table (Ho*Wo*k*k,) into flattened padded positions and its scatter matrix."""
        key = (H, W)
        cached = getattr(self, "_idx_cache", {})
        if key not in cached:
            k = self.kernel
            Ho, Wo = H - k + 1, W - k + 1
            idx = np.array([(i + a) * W + (j + b) for i in range(Ho) for j in range(Wo)
                            for a in range(k) for b in range(k)], dtype=np.int64)
            scatter = np.zeros((H * W, idx.size))
            scatter[idx, np.arange(idx.size)] = 1.0
            cached[key] = (idx, scatter)
            self._idx_cache = cached
        return cached[key]

    def forward(self, P: ParamSet, x: np.ndarray):
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise ShapeError(f"{self.name}: expected (B,H,W,{self.cin}) input, got {x.shape}")
        k = self.kernel
        if self.pad:
            x = np.pad(x, ((0, 0), (self.pad, self.pad), (self.pad, self.pad), (0, 0)))
        B, H, W, C = x.shape
        Ho, Wo = H - k + 1, W - k + 1
        idx, _ = self._index(H, W)
        cols = x.reshape(B, H * W, C)[:, idx, :].reshape(B * Ho * Wo, k * k * C)
        w = P[f"{self.name}.w"].reshape(k * k * C, self.cout)
        y = (cols @ w + P[f"{self.name}.b"]).reshape(B, Ho, Wo, self.cout)
        return y, (cols, x.shape)

    def backward(self, P: ParamSet, G: ParamSet, dy: np.ndarray, cache, need_dx: bool = True):
        cols, xshape = cache
        k, C = self.kernel, self.cin
        B, H, W, _ = xshape
        dy2 = dy.reshape(-1, self.cout)
        G[f"{self.name}.w"] += (cols.T @ dy2).reshape(k, k, C, self.cout)
        G[f"{self.name}.b"] += dy2.sum(axis=0)
        if not need_dx:
            return None
        _, scatter = self._index(H, W)
        dcols = (dy2 @ P[f"{self.name}.w"].reshape(k * k * C, self.cout).T).reshape(B, -1, C)
        dx = np.matmul(scatter, dcols).reshape(xshape)
        if self.pad:
            p = self.pad
            dx = dx[:, p:-p, p:-p, :]
        return dx


@dataclass
class Dense(Layer):
    name: str
    nin: int
    nout: int

    def param_shapes(self):
        return [(f"{self.name}.w", (self.nin, self.nout)), (f"{self.name}.b", (self.nout,))]

    def fan_in(self):
        return {f"{self.name}.w": self.nin}

    def forward(self, P: ParamSet, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.nin:
            raise ShapeError(f"{self.name}: expected (B,{self.nin}) input, got {x.shape}")
        return x @ P[f"{self.name}.w"] + P[f"{self.name}.b"], x

    def backward(self, P, G, dy, x, need_dx: bool = True):
        G[f"{self.name}.w"] += x.T @ dy
        G[f"{self.name}.b"] += dy.sum(axis=0)
        return dy @ P[f"{self.name}.w"].T if need_dx else None


class ReLU(Layer):
    def forward(self, P, x):
        y = np.maximum(x, 0.0)
        return y, x > 0

    def backward(self, P, G, dy, mask, need_dx: bool = True):
        return dy * mask


class Tanh(Layer):
    def forward(self, P, x):
        y = np.tanh(x)
        return y, y

    def backward(self, P, G, dy, y, need_dx: bool = True):
        return dy * (1.0 - y * y)


class Flatten(Layer):
    def forward(self, P, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, P, G, dy, shape, need_dx: bool = True):
        return dy.reshape(shape)


ACTIVATIONS = {"relu": ReLU, "tanh": Tanh}


class Sequential:
    """Layer chain with recorded caches for reverse-mode gradients."""

    def __init__(self, layers: Iterable[Layer]):
        self.layers = list(layers)

    def param_shapes(self):
        return [s for layer in self.layers for s in layer.param_shapes()]

    def fan_in(self):
        out = {}
        for layer in self.layers:
            out.update(layer.fan_in())
        return out

    def forward(self, P: ParamSet, x: np.ndarray):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(P, x)
            caches.append(c)
        return x, caches

    def backward(self, P: ParamSet, G: ParamSet, dout: np.ndarray, caches, need_dx: bool = False):
        d = dout
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            first = i == 0
            d = self.layers[i].backward(P, G, d, caches[i], need_dx=need_dx or not first)
        return d


def conv_stack(prefix: str, cin: int, kernels: tuple[int, int] = (2, 2), channels: tuple[int, int] = (20, 30),
               grid: int = 3) -> tuple[list[Layer], int]:
    """Two ReLU conv layers over a grid x grid input; returns (layers, latent width).

    A first kernel larger than 2 gets 'same' padding so the second layer still fits.
    """
    k1, k2 = kernels
    pad1 = 0 if k1 <= 2 else (k1 - 1) // 2
    c1 = Conv2D(f"{prefix}conv1", cin, channels[0], k1, pad1)
    s1 = c1.out_size(grid)
    c2 = Conv2D(f"{prefix}conv2", channels[0], channels[1], k2, 0)
    s2 = c2.out_size(s1)
    if s2 < 1:
        raise ShapeError(f"kernels {kernels} do not fit a {grid}x{grid} grid")
    return [c1, ReLU(), c2, ReLU(), Flatten()], s2 * s2 * channels[1]


def dense_stack(prefix: str, sizes: Sequence[int], activation: str = "relu") -> list[Layer]:
    """Affine layers with the activation between them; final layer linear."""
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(f"{prefix}fc{i + 1}", a, b))
        if i < len(sizes) - 2:
            layers.append(ACTIVATIONS[activation]())
    return layers


def conv_stack_forward(P: ParamSet, grid_batch: np.ndarray, layers: Sequence[Layer] | None = None,
                       prefix: str = "") -> np.ndarray:
    if layers is None:
        layers, _ = conv_stack(prefix, grid_batch.shape[-1])
    return Sequential(layers).forward(P, grid_batch)[0]


def dense_forward(P: ParamSet, x: np.ndarray, sizes: Sequence[int], activation: str = "relu",
                  prefix: str = "") -> np.ndarray:
    return Sequential(dense_stack(prefix, sizes, activation)).forward(P, x)[0]


# ---------------------------------------------------------------------------
# heads and losses

def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """log-probabilities with -inf outside ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no valid entry")
    z = np.where(mask, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        lse = m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))
    return z - lse


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.exp(masked_log_softmax(logits, mask))


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(log_sigmoid(x))


# ---------------------------------------------------------------------------
# optimizer

class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    def __init__(self, params: ParamSet, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(params.size)
        self.v = np.zeros(params.size)
        self.t = 0

    def step(self, grads: ParamSet) -> None:
        g = grads.flat
        if not np.isfinite(g).all():
            bad = [n for n in grads.names() if not np.all(np.isfinite(grads[n]))]
            raise NonFiniteGradient(f"non-finite gradient in {bad}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * g
        self.v *= b2
        self.v += (1 - b2) * (g * g)
        denom = np.sqrt(self.v / (1 - b2 ** self.t))
        denom += self.eps
        self.params.flat -= (self.lr / (1 - b1 ** self.t)) * self.m / denom


def adam_step(params: ParamSet, grads: ParamSet, state: Adam | None = None, **kw) -> Adam:
    """One Adam update in place; returns the optimizer state for reuse."""
    state = state or Adam(params, **kw)
    state.step(grads)
    return state


# ---------------------------------------------------------------------------
# checkpoints

def _fmt(v: float) -> str:
    return "%.17g" % v


def write_params(fh, params: ParamSet, prefix: str = "") -> None:
    """One record per array: ``name shape d0,d1 values v0 v1 ...``."""
    for name, shape in params.shapes:
        arr = params[name].ravel()
        dims = ",".join(str(d) for d in shape)
        fh.write(f"{prefix}{name} shape {dims} values {' '.join(_fmt(v) for v in arr)}\n")


def read_params(lines: Iterable[str]) -> ParamSet:
    shapes, values = [], []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) < 4 or parts[1] != "shape" or parts[3] != "values":
            raise ValueError(f"malformed checkpoint record: {line[:60]!r}")
        shape = tuple(int(d) for d in parts[2].split(",")) if parts[2] else ()
        vals = np.array([float(v) for v in parts[4:]])
        if vals.size != (int(np.prod(shape)) if shape else 1):
            raise ValueError(f"record {parts[0]}: {vals.size} values for shape {shape}")
        shapes.append((parts[0], shape))
        values.append(vals)
    flat = np.concatenate(values) if values else np.zeros(0)
    return ParamSet(shapes, flat)


def save_sections(path, sections: dict[str, ParamSet]) -> None:
    with open(path, "w") as fh:
        for name, params in sections.items():
            fh.write(f"section {name}\n")
            write_params(fh, params)


def load_sections(path) -> dict[str, ParamSet]:
    out: dict[str, list[str]] = {}
    current = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("section "):
                current = line.split(" ", 1)[1].strip()
                out[current] = []
            elif line.strip():
                if current is None:
                    raise ValueError(f"{path}: record before any section header")
                out[current].append(line)
    return {k: read_params(v) for k, v in out.items()}


def params_to_text(params: ParamSet) -> str:
    buf = io.StringIO()
    write_params(buf, params)
    return buf.getvalue()
