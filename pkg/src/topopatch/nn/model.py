"""Small deterministic CNN core: layer specs, He-uniform init, forward and
backward passes.

Layouts are channels-first: 3D inputs are (C, X, Y, Z), 2D inputs (C, H, W).
Convolutions are stride 1 with no padding; max pooling is window 2 stride 2
with trailing odd elements dropped. The "preclassification" tap is the
linear output of the last hidden dense layer.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ModelSpecError, ShapeError


@dataclass(frozen=True)
class Conv3D:
    filters: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    kind: str = "conv3d"


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: tuple[int, int] = (3, 3)
    kind: str = "conv2d"


@dataclass(frozen=True)
class ReLU:
    kind: str = "relu"


@dataclass(frozen=True)
class MaxPool:
    kind: str = "maxpool"


@dataclass(frozen=True)
class Flatten:
    kind: str = "flatten"


@dataclass(frozen=True)
class Dense:
    units: int
    kind: str = "dense"


@dataclass(frozen=True)
class Sigmoid:
    kind: str = "sigmoid"


Layer = Union[Conv3D, Conv2D, ReLU, MaxPool, Flatten, Dense, Sigmoid]

_LAYER_TYPES = {
    "conv3d": Conv3D,
    "conv2d": Conv2D,
    "relu": ReLU,
    "maxpool": MaxPool,
    "flatten": Flatten,
    "dense": Dense,
    "sigmoid": Sigmoid,
}


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list plus the input shape it consumes (channels first)."""

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ModelSpecError("empty layer list")
        if not isinstance(self.layers[-1], Sigmoid):
            raise ModelSpecError("the final layer must be the sigmoid output")
        if sum(isinstance(l, Sigmoid) for l in self.layers) != 1:
            raise ModelSpecError("exactly one sigmoid layer is allowed")
        dense_idx = [i for i, l in enumerate(self.layers) if isinstance(l, Dense)]
        if len(dense_idx) < 2:
            raise ModelSpecError("need a hidden dense layer and a dense(1) output")
        out = self.layers[dense_idx[-1]]
        if out.units != 1:
            raise ModelSpecError("the dense layer before the sigmoid must have 1 unit")
        self.shapes()  # raises on inconsistent chains

    @property
    def tap_index(self) -> int:
        """Index of the preclassification layer: the last hidden dense."""
        dense_idx = [i for i, l in enumerate(self.layers) if isinstance(l, Dense)]
        return dense_idx[-2]

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shape after every layer (without the batch axis)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Conv3D, Conv2D)):
                nd = 3 if isinstance(layer, Conv3D) else 2
                if len(shape) != nd + 1:
                    raise ModelSpecError(f"layer {i}: {layer.kind} needs rank-{nd + 1} input, got {shape}")
                spatial = [s - k + 1 for s, k in zip(shape[1:], layer.kernel)]
                if min(spatial) < 1:
                    raise ModelSpecError(f"layer {i}: kernel {layer.kernel} exceeds input {shape}")
                shape = (layer.filters, *spatial)
            elif isinstance(layer, MaxPool):
                if len(shape) < 2:
                    raise ModelSpecError(f"layer {i}: maxpool needs spatial input, got {shape}")
                spatial = [s // 2 for s in shape[1:]]
                if min(spatial) < 1:
                    raise ModelSpecError(f"layer {i}: maxpool underflows input {shape}")
                shape = (shape[0], *spatial)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ModelSpecError(f"layer {i}: dense needs flat input, got {shape}")
                shape = (layer.units,)
            elif isinstance(layer, (ReLU, Sigmoid)):
                pass
            else:
                raise ModelSpecError(f"layer {i}: unknown layer {layer!r}")
            out.append(shape)
        return out

    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            entry = {"kind": l.kind}
            if isinstance(l, (Conv3D, Conv2D)):
                entry["filters"] = l.filters
                entry["kernel"] = list(l.kernel)
            elif isinstance(l, Dense):
                entry["units"] = l.units
            layers.append(entry)
        return {"input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for entry in d["layers"]:
            kind = entry["kind"]
            if kind in ("conv3d", "conv2d"):
                layers.append(_LAYER_TYPES[kind](filters=int(entry["filters"]),
                                                 kernel=tuple(entry["kernel"])))
            elif kind == "dense":
                layers.append(Dense(units=int(entry["units"])))
            else:
                layers.append(_LAYER_TYPES[kind]())
        return cls(input_shape=tuple(d["input_shape"]), layers=tuple(layers))


def default_patch_spec(patch_dims: tuple[int, int, int],
                       filters: tuple[int, int] = (8, 16),
                       dense_units: int = 64,
                       kernel: int = 3) -> ModelSpec:
    """conv-pool-conv-pool-dense stack for one volume patch."""
    k = (kernel, kernel, kernel)
    return ModelSpec(
        input_shape=(1, *patch_dims),
        layers=(
            Conv3D(filters[0], k), ReLU(), MaxPool(),
            Conv3D(filters[1], k), ReLU(), MaxPool(),
            Flatten(), Dense(dense_units), ReLU(), Dense(1), Sigmoid(),
        ),
    )


def default_image_spec(resolution: tuple[int, int],
                       filters: tuple[int, int] = (8, 16),
                       dense_units: int = 64,
                       kernel: int = 3) -> ModelSpec:
    """The 2D analogue, sized for persistence-image rasters."""
    k = (kernel, kernel)
    return ModelSpec(
        input_shape=(1, *resolution),
        layers=(
            Conv2D(filters[0], k), ReLU(), MaxPool(),
            Conv2D(filters[1], k), ReLU(), MaxPool(),
            Flatten(), Dense(dense_units), ReLU(), Dense(1), Sigmoid(),
        ),
    )


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray] = field(repr=False)

    def astype(self, dtype) -> "Model":
        return Model(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def _fan_in(layer: Layer, in_shape: tuple[int, ...]) -> int:
    if isinstance(layer, (Conv3D, Conv2D)):
        return in_shape[0] * int(np.prod(layer.kernel))
    return in_shape[0]


def he_uniform_init(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Weights uniform on [-sqrt(6/fan_in), +sqrt(6/fan_in)], biases zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    shapes = spec.shapes()
    shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Conv3D, Conv2D)):
            limit = math.sqrt(6.0 / _fan_in(layer, shape))
            wshape = (layer.filters, shape[0], *layer.kernel)
            params[f"{i}.w"] = rng.uniform(-limit, limit, size=wshape).astype(np.float32)
            params[f"{i}.b"] = np.zeros(layer.filters, dtype=np.float32)
        elif isinstance(layer, Dense):
            limit = math.sqrt(6.0 / _fan_in(layer, shape))
            params[f"{i}.w"] = rng.uniform(-limit, limit, size=(shape[0], layer.units)).astype(np.float32)
            params[f"{i}.b"] = np.zeros(layer.units, dtype=np.float32)
        shape = shapes[i]
    return params


def build_model(spec: ModelSpec, seed: int) -> Model:
    return Model(spec=spec, params=he_uniform_init(spec, seed))


# -- forward / backward --------------------------------------------------------


def _conv_forward(x, w, b):
    # im2col + GEMM: copy the sliding windows contiguously once, then a
    # single matmul per batch does the whole convolution
    nd = w.ndim - 2
    n, c = x.shape[:2]
    f = w.shape[0]
    win = sliding_window_view(x, w.shape[2:], axis=tuple(range(2, 2 + nd)))
    out_sp = win.shape[2 : 2 + nd]
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    cols = np.ascontiguousarray(win.transpose(order)).reshape(n, int(np.prod(out_sp)), -1)
    y = cols @ w.reshape(f, -1).T  # (n, P, F)
    y = np.moveaxis(y, -1, 1).reshape(n, f, *out_sp)
    bshape = (1, f) + (1,) * nd
    return y + b.reshape(bshape), cols


def _conv_backward(gy, x, w, cols):
    nd = w.ndim - 2
    n, f = gy.shape[:2]
    c = x.shape[1]
    out_sp = gy.shape[2:]
    p = int(np.prod(out_sp))
    g2 = np.moveaxis(gy.reshape(n, f, p), 1, 2)  # (n, P, F)
    dw = np.tensordot(g2, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    db = gy.sum(axis=(0,) + tuple(range(2, 2 + nd)))
    dcols = g2 @ w.reshape(f, -1)  # (n, P, C*K)
    dcols = dcols.reshape(n, *out_sp, c, *w.shape[2:])
    order = (0, 1 + nd) + tuple(range(1, 1 + nd)) + tuple(range(2 + nd, 2 + 2 * nd))
    dcols = dcols.transpose(order)  # (n, C, out_sp..., k...)
    dx = np.zeros_like(x)
    for off in np.ndindex(*w.shape[2:]):
        sl = tuple(slice(o, o + s) for o, s in zip(off, out_sp))
        dx[(slice(None), slice(None), *sl)] += dcols[(slice(None), slice(None),
                                                      *(slice(None),) * nd, *off)]
    return dx, dw, db


def _pool_forward(x):
    spatial = x.shape[2:]
    even = [2 * (s // 2) for s in spatial]
    sl = tuple(slice(0, e) for e in even)
    xe = x[(slice(None), slice(None), *sl)]
    n, c = x.shape[:2]
    out_sp = [e // 2 for e in even]
    shape = [n, c]
    for o in out_sp:
        shape += [o, 2]
    r = xe.reshape(shape)
    # bring the window axes last, flatten them
    nd = len(out_sp)
    win_axes = tuple(3 + 2 * i for i in range(nd))
    keep_axes = (0, 1) + tuple(2 + 2 * i for i in range(nd))
    r = r.transpose(keep_axes + win_axes).reshape(n, c, *out_sp, -1)
    idx = r.argmax(axis=-1)
    y = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx)


def _pool_backward(gy, cache):
    x_shape, idx = cache
    n, c = x_shape[:2]
    spatial = x_shape[2:]
    out_sp = gy.shape[2:]
    nd = len(out_sp)
    flat = np.zeros((n, c, *out_sp, 2 ** nd), dtype=gy.dtype)
    np.put_along_axis(flat, idx[..., None], gy[..., None], axis=-1)
    # interleave the (out, window) axis pairs back together
    perm = [0, 1]
    for i in range(nd):
        perm += [2 + i, 2 + nd + i]
    r = flat.reshape([n, c] + list(out_sp) + [2] * nd).transpose(perm)
    r = r.reshape([n, c] + [2 * o for o in out_sp])
    dx = np.zeros(x_shape, dtype=gy.dtype)
    sl = tuple(slice(0, 2 * o) for o in out_sp)
    dx[(slice(None), slice(None), *sl)] = r
    return dx


def forward_batch(model: Model, x: np.ndarray, train: bool = False):
    """Returns (probabilities (N,), preclassification (N, U), caches)."""
    spec = model.spec
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
    caches = []
    tap = None
    a = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Conv3D, Conv2D)):
            w, b = model.params[f"{i}.w"], model.params[f"{i}.b"]
            a_new, cols = _conv_forward(a, w, b)
            caches.append(("conv", a, cols))
            a = a_new
        elif isinstance(layer, ReLU):
            caches.append(("relu", a > 0))
            a = np.maximum(a, 0)
        elif isinstance(layer, MaxPool):
            a, cache = _pool_forward(a)
            caches.append(("pool", cache))
        elif isinstance(layer, Flatten):
            caches.append(("flatten", a.shape))
            a = a.reshape(a.shape[0], -1)
        elif isinstance(layer, Dense):
            w, b = model.params[f"{i}.w"], model.params[f"{i}.b"]
            caches.append(("dense", a))
            a = a @ w + b
            if i == spec.tap_index:
                tap = a
        elif isinstance(layer, Sigmoid):
            caches.append(("sigmoid", None))
            # clamp so outputs stay strictly inside (0, 1) even when the
            # logit saturates the float range
            a = np.clip(expit(a), 1e-7, 1.0 - 1e-7)
    probs = a.reshape(-1)
    return probs, tap, caches


def forward(model: Model, x: np.ndarray, mode: str = "eval"):
    """Single-input forward pass: (probability, preclassification vector)."""
    if mode not in ("train", "eval"):
        raise ShapeError(f"mode must be train or eval, got {mode!r}")
    probs, tap, _ = forward_batch(model, x[None, ...], train=(mode == "train"))
    return float(probs[0]), tap[0]


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    p = np.clip(probs.astype(np.float64), 1e-7, 1.0 - 1e-7)
    y = labels.astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def loss_and_gradients(model: Model, x: np.ndarray, labels: np.ndarray):
    """(probabilities, gradients of the mean batch BCE) in one pass."""
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    probs, _, caches = forward_batch(model, x, train=True)
    spec = model.spec
    n = x.shape[0]
    # fused sigmoid + BCE: gradient w.r.t. the output logit
    g = ((probs - labels.astype(probs.dtype)) / n).reshape(-1, 1)
    grads: dict[str, np.ndarray] = {}
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        kind = caches[i][0]
        if isinstance(layer, Sigmoid):
            continue  # folded into g
        if kind == "dense":
            a_in = caches[i][1]
            w = model.params[f"{i}.w"]
            grads[f"{i}.w"] = a_in.T @ g
            grads[f"{i}.b"] = g.sum(axis=0)
            g = g @ w.T
        elif kind == "relu":
            g = g * caches[i][1]
        elif kind == "pool":
            g = _pool_backward(g, caches[i][1])
        elif kind == "flatten":
            g = g.reshape(caches[i][1])
        elif kind == "conv":
            a_in, cols = caches[i][1], caches[i][2]
            w = model.params[f"{i}.w"]
            g, dw, db = _conv_backward(g, a_in, w, cols)
            grads[f"{i}.w"] = dw
            grads[f"{i}.b"] = db
    return probs, grads


def backward_gradients(model: Model, x: np.ndarray, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the mean binary cross-entropy over the batch."""
    return loss_and_gradients(model, x, labels)[1]


def predict_proba(model: Model, x: np.ndarray) -> np.ndarray:
    """Eval-mode probabilities for a batch of inputs."""
    probs, _, _ = forward_batch(model, x, train=False)
    return probs


def encode(model: Model, x: np.ndarray) -> np.ndarray:
    """Preclassification encodings for a batch of inputs."""
    _, tap, _ = forward_batch(model, x, train=False)
    return tap


# -- checkpoints ----------------------------------------------------------------


def save_model(model: Model, path: str | os.PathLike) -> None:
    """JSON manifest next to a raw little-endian float32 payload (<path>.bin)."""
    path = os.fspath(path)
    order = sorted(model.params)
    manifest = {
        "spec": model.spec.to_dict(),
        "params": [{"name": k, "shape": list(model.params[k].shape)} for k in order],
        "payload": os.path.basename(path) + ".bin",
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    with open(path + ".bin", "wb") as fh:
        for k in order:
            fh.write(model.params[k].astype("<f4").tobytes())


def load_model(path: str | os.PathLike) -> Model:
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    spec = ModelSpec.from_dict(manifest["spec"])
    payload = os.path.join(os.path.dirname(path), manifest["payload"])
    raw = np.fromfile(payload, dtype="<f4")
    params = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        params[entry["name"]] = raw[offset : offset + size].reshape(shape).copy()
        offset += size
    if offset != raw.size:
        raise ShapeError(f"{path}: payload has {raw.size} values, manifest expects {offset}")
    return Model(spec=spec, params=params)
