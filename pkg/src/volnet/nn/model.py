"""Declarative layer configs, the three built-in architectures, and model forward/backward."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional
from urllib.parse import parse_qsl, urlencode

import numpy as np
from threadpoolctl import threadpool_limits

from ..errors import ShapeMismatch, StaleCache
from ..tensor import DTYPE, RngStream
from . import layers as L

LAYER_KINDS = ("conv3d", "conv2d", "maxpool3d", "maxpool2d", "relu", "dropout", "flatten", "dense", "sigmoid")
LAYOUTS = ("volume", "frames", "slices")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: Optional[int] = None  # conv out_channels or dense out_features
    kernel: Optional[tuple] = None  # pool kernel (= stride), in the input's axis order
    rate: float = 0.0
    end_pad: bool = False
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dropout" and not 0 <= self.rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind in ("conv3d", "conv2d", "dense") and (self.out is None or self.out < 1):
            raise ValueError(f"{self.kind} needs a positive output size")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv3d", "conv2d", "dense")


@dataclass(frozen=True)
class ModelConfig:
    """Ordered layer list plus input description.

    ``layout`` says how a (X, Y, Z) patch becomes a network input:
    ``volume`` -> (1, X, Y, Z), ``frames`` -> (3, Z/3, X, Y), ``slices`` -> Z/3
    independent (3, X, Y) samples.
    """

    name: str
    input_shape: tuple
    layers: tuple
    layout: str = "volume"
    scale_input: bool = False
    patch_depth: int = 48  # only used by the slices layout

    @property
    def patch_extent(self) -> tuple[int, int, int]:
        if self.layout == "volume":
            return tuple(self.input_shape[1:])
        if self.layout == "frames":
            _, frames, nx, ny = self.input_shape
            return nx, ny, 3 * frames
        _, nx, ny = self.input_shape
        return nx, ny, self.patch_depth

    def param_names(self) -> list[str]:
        return [name for name, _ in param_shapes(self).items()]


def _layer_names(cfg: ModelConfig) -> list[Optional[str]]:
    names, n_conv, n_dense = [], 0, 0
    for spec in cfg.layers:
        if spec.kind in ("conv3d", "conv2d"):
            n_conv += 1
            names.append(f"conv{n_conv}")
        elif spec.kind == "dense":
            n_dense += 1
            names.append(f"dense{n_dense}")
        else:
            names.append(None)
    return names


def propagate(cfg: ModelConfig) -> list[tuple]:
    """Per-sample output shape after every layer; raises ShapeMismatch if the chain is invalid."""
    shape = tuple(cfg.input_shape)
    shapes = []
    for i, spec in enumerate(cfg.layers):
        k = spec.kind
        if k in ("conv3d", "conv2d", "maxpool3d", "maxpool2d"):
            nd = 3 if k.endswith("3d") else 2
            if len(shape) != nd + 1:
                raise ShapeMismatch(f"layer {i} ({k}) needs a {nd}D input, got {shape}")
            if k.startswith("conv"):
                shape = (spec.out, *shape[1:])
            else:
                shape = (shape[0], *L.pool_output_shape(shape[1:], spec.kernel, spec.end_pad))
        elif k == "flatten":
            shape = (math.prod(shape),)
        elif k == "dense":
            if len(shape) != 1:
                raise ShapeMismatch(f"layer {i} (dense) needs a flat input, got {shape}")
            shape = (spec.out,)
        shapes.append(shape)
    return shapes


def flatten_size(cfg: ModelConfig) -> int:
    for spec, shape in zip(cfg.layers, propagate(cfg)):
        if spec.kind == "flatten":
            return shape[0]
    raise ValueError(f"config {cfg.name} has no flatten layer")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    prev = tuple(cfg.input_shape)
    for spec, name, out_shape in zip(cfg.layers, _layer_names(cfg), propagate(cfg)):
        if spec.kind in ("conv3d", "conv2d"):
            nd = 3 if spec.kind == "conv3d" else 2
            shapes[f"{name}.weight"] = (spec.out, prev[0]) + (L.KERNEL,) * nd
            shapes[f"{name}.bias"] = (spec.out,)
        elif spec.kind == "dense":
            shapes[f"{name}.weight"] = (spec.out, prev[0])
            shapes[f"{name}.bias"] = (spec.out,)
        prev = out_shape
    return shapes


def frozen_names(cfg: ModelConfig) -> set[str]:
    return {
        f"{name}.{part}"
        for spec, name in zip(cfg.layers, _layer_names(cfg))
        if spec.has_params and spec.frozen
        for part in ("weight", "bias")
    }


def validate(cfg: ModelConfig) -> ModelConfig:
    if cfg.layout not in LAYOUTS:
        raise ValueError(f"unknown input layout {cfg.layout!r}")
    tail = cfg.layers[-2:]
    if len(tail) < 2 or tail[1].kind != "sigmoid" or tail[0].kind != "dense" or tail[0].out != 1:
        raise ValueError(f"config {cfg.name}: must end in dense(1) followed by sigmoid")
    propagate(cfg)
    return cfg


# Built-in architectures ---------------------------------------------------

def _conv_block(kind, out, frozen):
    return [LayerSpec(kind, out=out, frozen=frozen), LayerSpec("relu")]


def _head(sizes, rates):
    layers = [LayerSpec("flatten")]
    for size, rate in zip(sizes, rates):
        layers += [LayerSpec("dense", out=size), LayerSpec("relu"), LayerSpec("dropout", rate=rate)]
    return layers + [LayerSpec("dense", out=1), LayerSpec("sigmoid")]


SCRATCH3D_DEFAULTS = ((16, 32, 32, 64, 128, 128), (256, 128), (1, 112, 112, 48), 0.25, False)


def config_scratch3d(convs=SCRATCH3D_DEFAULTS[0], dense=SCRATCH3D_DEFAULTS[1], input_shape=SCRATCH3D_DEFAULTS[2],
                     dropout=SCRATCH3D_DEFAULTS[3], scale_input=SCRATCH3D_DEFAULTS[4]) -> ModelConfig:
    """3D network trained from scratch.

    Max-pooling follows every conv except the second-to-last one; the first
    pool is transverse-only (2, 2, 1), the others (2, 2, 2).  Dropout follows
    the last conv block and every hidden dense layer.
    """
    layers = []
    for i, out in enumerate(convs):
        layers += _conv_block("conv3d", out, False)
        if i != len(convs) - 2:
            layers.append(LayerSpec("maxpool3d", kernel=(2, 2, 1) if i == 0 else (2, 2, 2)))
    layers.append(LayerSpec("dropout", rate=dropout))
    layers += _head(dense, [dropout] * len(dense))
    name = "scratch3d"
    # Non-default variants carry their parameters in the name so weight files stay self-describing.
    if (tuple(convs), tuple(dense), tuple(input_shape), float(dropout), bool(scale_input)) != SCRATCH3D_DEFAULTS:
        name += "?" + urlencode({
            "conv": ",".join(map(str, convs)),
            "dense": ",".join(map(str, dense)),
            "in": "x".join(map(str, input_shape)),
            "drop": repr(float(dropout)),
            "scale": int(bool(scale_input)),
        }, safe=",")
    return validate(ModelConfig(name, tuple(input_shape), tuple(layers), "volume", scale_input))


# (out_channels, pool-after) pairs of the C3D conv base; axis order (frames, H, W).
C3D_BASE = [(64, (1, 2, 2)), (128, (2, 2, 2)), (256, None), (256, (2, 2, 2)),
            (512, None), (512, (2, 2, 2)), (512, None), (512, (2, 2, 2))]
VGG16_BASE = [64, 64, "P", 128, 128, "P", 256, 256, 256, "P", 512, 512, 512, "P", 512, 512, 512, "P"]


def config_c3d_transfer(scale_input=False) -> ModelConfig:
    """C3D conv base (frozen) with a new 1024 -> 64 -> 1 head.

    The last pool end-pads its spatial axes (7 -> 4) as in the original
    network, giving a 512 x 1 x 4 x 4 = 8192 feature vector.
    """
    layers = []
    for i, (out, pool) in enumerate(C3D_BASE):
        layers += _conv_block("conv3d", out, True)
        if pool:
            layers.append(LayerSpec("maxpool3d", kernel=pool, end_pad=i == len(C3D_BASE) - 1))
    layers += _head((1024, 64), (0.35, 0.25))
    return validate(ModelConfig("c3d-transfer", (3, 16, 112, 112), tuple(layers), "frames", scale_input))


def config_vgg16_2d(scale_input=False) -> ModelConfig:
    layers = []
    for item in VGG16_BASE:
        if item == "P":
            layers.append(LayerSpec("maxpool2d", kernel=(2, 2)))
        else:
            layers += _conv_block("conv2d", item, True)
    layers += _head((512, 64), (0.5, 0.25))
    return validate(ModelConfig("vgg16-2d", (3, 112, 112), tuple(layers), "slices", scale_input))


def config_tiny(nd=3, channels=(2, 2), size=6) -> ModelConfig:
    """Small conv-pool-conv-dense-sigmoid net for gradient audits."""
    kind = f"conv{nd}d"
    layers = [LayerSpec(kind, out=channels[0]), LayerSpec("relu"),
              LayerSpec(f"maxpool{nd}d", kernel=(2,) * nd),
              LayerSpec(kind, out=channels[1]), LayerSpec("relu"),
              LayerSpec("flatten"), LayerSpec("dense", out=1), LayerSpec("sigmoid")]
    shape = (1,) + (size,) * nd if nd == 3 else (3, size, size)
    return validate(ModelConfig(f"tiny{nd}d", shape, tuple(layers), "volume" if nd == 3 else "slices"))


BUILTIN = {
    "scratch3d": config_scratch3d,
    "c3d-transfer": config_c3d_transfer,
    "vgg16-2d": config_vgg16_2d,
    "tiny3d": lambda: config_tiny(3),
    "tiny2d": lambda: config_tiny(2),
}


def config_from_name(name: str) -> ModelConfig:
    """Inverse of ``ModelConfig.name`` for built-in and parametrised scratch3d configs."""
    base, _, query = name.partition("?")
    if base not in BUILTIN:
        raise ValueError(f"unknown model config {name!r}; choose from {sorted(BUILTIN)}")
    if not query:
        return BUILTIN[base]()
    if base != "scratch3d":
        raise ValueError(f"config {base!r} takes no parameters")
    q = dict(parse_qsl(query))
    return config_scratch3d(
        convs=tuple(int(c) for c in q["conv"].split(",")),
        dense=tuple(int(d) for d in q["dense"].split(",")),
        input_shape=tuple(int(n) for n in q["in"].split("x")),
        dropout=float(q["drop"]),
        scale_input=bool(int(q["scale"])),
    )


# Model --------------------------------------------------------------------

@contextmanager
def _single_thread_blas():
    # Worker threads parallelise over samples; a threaded BLAS on top would oversubscribe.
    with threadpool_limits(limits=1, user_api="blas"):
        yield


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.params) != list(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ShapeMismatch(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"{name}: shape {self.params[name].shape}, expected {shape}")
        self.frozen = frozen_names(self.config)

    def trainable(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def first_trainable_layer(self) -> Optional[int]:
        for i, (spec, name) in enumerate(zip(self.config.layers, _layer_names(self.config))):
            if spec.has_params and f"{name}.weight" not in self.frozen:
                return i
        return None


def init_params(cfg: ModelConfig, rng: RngStream) -> Model:
    """He-normal (fan-in) weights for layers feeding a ReLU, Glorot-uniform for the output dense; zero biases."""
    shapes = param_shapes(cfg)
    last_dense = max(i for i, s in enumerate(cfg.layers) if s.kind == "dense")
    params = {}
    for i, (spec, name) in enumerate(zip(cfg.layers, _layer_names(cfg))):
        if not spec.has_params:
            continue
        wshape = shapes[f"{name}.weight"]
        fan_in = math.prod(wshape[1:])
        if i == last_dense:
            limit = math.sqrt(6.0 / (fan_in + wshape[0]))
            w = (rng.uniform01(wshape) * 2 - 1) * limit
        else:
            w = rng.normal01(wshape) * math.sqrt(2.0 / fan_in)
        params[f"{name}.weight"] = w.astype(DTYPE)
        params[f"{name}.bias"] = np.zeros(shapes[f"{name}.bias"], dtype=DTYPE)
    return Model(cfg, params)


class ForwardCache:
    def __init__(self, model, start, entries, batch):
        self.model = model
        self.start = start
        self.entries = entries
        self.batch = batch
        self.consumed = False


def model_forward(model: Model, batch: np.ndarray, mode: str = "eval", rng: Optional[RngStream] = None,
                  dtype=None):
    """Run the network on ``batch`` of shape (B, *input_shape).

    Returns scores of shape (B,) in eval mode and ``(scores, cache)`` in train
    mode.  Only layers from the first trainable one onward keep a cache.
    ``dtype`` overrides the compute precision (float64 for gradient checks).
    """
    cfg = model.config
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.ndim != len(cfg.input_shape) + 1 or batch.shape[1:] != tuple(cfg.input_shape):
        raise ShapeMismatch(f"batch shape {batch.shape} does not match input {cfg.input_shape}")
    dtype = dtype or DTYPE
    x = np.asarray(batch, dtype=dtype)
    if cfg.scale_input:
        x = x / x.dtype.type(255)
    start = model.first_trainable_layer() if mode == "train" else None
    keep_from = start if start is not None else len(cfg.layers)
    entries = {}
    with _single_thread_blas():
        for i, (spec, name) in enumerate(zip(cfg.layers, _layer_names(cfg))):
            k = spec.kind
            if k in ("conv3d", "conv2d"):
                x, c = L.conv_forward(x, model.params[f"{name}.weight"].astype(dtype, copy=False),
                                      model.params[f"{name}.bias"].astype(dtype, copy=False))
            elif k == "dense":
                x, c = L.dense_forward(x, model.params[f"{name}.weight"].astype(dtype, copy=False),
                                       model.params[f"{name}.bias"].astype(dtype, copy=False))
            elif k in ("maxpool3d", "maxpool2d"):
                x, c = L.maxpool_forward(x, spec.kernel, spec.end_pad)
            elif k == "relu":
                x, c = L.relu_forward(x)
            elif k == "dropout":
                x, c = L.dropout_forward(x, spec.rate, rng, mode)
            elif k == "flatten":
                c = x.shape
                x = x.reshape(x.shape[0], -1)
            else:
                x = L.sigmoid_forward(x)
                c = x
            if i >= keep_from:
                entries[i] = c
    scores = x.reshape(-1)
    if mode == "eval":
        return scores
    return scores, ForwardCache(model, start, entries, batch.shape[0])


def model_backward(model: Model, cache: ForwardCache, dscore: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the trainable parameters given d(loss)/d(score) per sample."""
    if cache.model is not model or cache.consumed:
        raise StaleCache("cache does not belong to a pending forward pass of this model")
    if dscore.shape != (cache.batch,):
        raise ShapeMismatch(f"dscore shape {dscore.shape}, expected ({cache.batch},)")
    cache.consumed = True
    grads = {}
    if cache.start is None:
        return grads
    cfg = model.config
    names = _layer_names(cfg)
    dtype = cache.entries[len(cfg.layers) - 1].dtype
    dy = np.asarray(dscore, dtype=dtype).reshape(-1, 1)
    with _single_thread_blas():
        for i in range(len(cfg.layers) - 1, cache.start - 1, -1):
            spec, c = cfg.layers[i], cache.entries[i]
            need_dx = i > cache.start
            k = spec.kind
            if spec.has_params:
                fn = L.dense_backward if k == "dense" else L.conv_backward
                dy, dw, db = fn(c, dy, need_dx)
                if f"{names[i]}.weight" not in model.frozen:
                    grads[f"{names[i]}.weight"] = dw.astype(DTYPE) if dtype == DTYPE else dw
                    grads[f"{names[i]}.bias"] = db.astype(DTYPE) if dtype == DTYPE else db
            elif k in ("maxpool3d", "maxpool2d"):
                dy = L.maxpool_backward(c, dy)
            elif k == "relu":
                dy = L.relu_backward(c, dy)
            elif k == "dropout":
                dy = L.dropout_backward(c, dy)
            elif k == "flatten":
                dy = dy.reshape(c)
            else:
                dy = L.sigmoid_backward(c, dy)
    return {n: grads[n] for n in model.params if n in grads}
