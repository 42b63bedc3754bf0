"""Model assembly: layer stacks, parameter registry, conv-layer ordering.

A Model owns an ordered list of LayerSpecs plus a name -> ndarray
parameter registry. Convolution layers additionally carry a global
ordinal (0-based, forward order); the merge sweep compares this ordinal
against the shallow-layer cutoff, so "layer k" always means "the k-th
conv layer", never counting activations or pools.

Presets are desk-scale stands-ins for the large backbones this engine
does not replicate:

- ``tiny_cnn``: 6 conv layers in 3 stages, designed for 28x28 inputs.
- ``small_vgg_d``: 8 conv layers in 4 stages, designed for 64x64 inputs.

Any other stack can be expressed as an explicit LayerSpec list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import ConfigError, ShapeError
from .layers import (
    LayerSpec,
    conv2d_backward,
    conv2d_forward,
    conv_spec,
    dense_backward,
    dense_forward,
    dense_spec,
    flatten_backward,
    flatten_forward,
    flatten_spec,
    maxpool2d,
    maxpool2d_backward,
    pool_spec,
    relu,
    relu_backward,
    relu_spec,
)
from .tensor import DTYPE

HEAD_KINDS = ("multiclass", "multilabel")
PRESETS = ("tiny_cnn", "small_vgg_d")


@dataclass(frozen=True)
class ArchConfig:
    """Resolvable description of a model: a preset name or an explicit
    layer list, plus input shape and classifier head."""

    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    head: str = "multiclass"
    preset: str | None = None
    layers: tuple[LayerSpec, ...] | None = None

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be 3 positive extents, got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if (self.preset is None) == (self.layers is None):
            raise ConfigError("exactly one of preset / layers must be given")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; known: {PRESETS}")


def _stage(c_in: int, c_out: int, pool_window: int, pool_stride: int) -> list[LayerSpec]:
    return [
        conv_spec(c_out, c_in, 3, 3, stride=1, padding=1),
        relu_spec(),
        conv_spec(c_out, c_out, 3, 3, stride=1, padding=1),
        relu_spec(),
        pool_spec(pool_window, pool_stride),
    ]


def _preset_layers(name: str, c_in: int) -> list[LayerSpec]:
    if name == "tiny_cnn":
        # 28 -> 14 -> 7 -> 3 spatially
        return _stage(c_in, 8, 2, 2) + _stage(8, 16, 2, 2) + _stage(16, 32, 3, 2)
    if name == "small_vgg_d":
        # 64 -> 32 -> 16 -> 8 -> 4 spatially
        return (
            _stage(c_in, 16, 2, 2)
            + _stage(16, 32, 2, 2)
            + _stage(32, 64, 2, 2)
            + _stage(64, 128, 2, 2)
        )
    raise ConfigError(f"unknown preset {name!r}")


def resolve_layers(config: ArchConfig) -> list[LayerSpec]:
    """Expand a preset (appending flatten + classifier head) or return the
    explicit layer list unchanged."""
    config.validate()
    if config.layers is not None:
        return list(config.layers)
    body = _preset_layers(config.preset, config.input_shape[0])
    feat = _walk_shapes(body, config.input_shape)
    if len(feat) != 1:
        body.append(flatten_spec())
        feat = (int(np.prod(feat)),)
    body.append(dense_spec(feat[0], config.num_classes))
    return body


def _walk_shapes(layers: list[LayerSpec], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Validate the stack by shape inference; returns the per-sample output
    shape. Raises ShapeError on any inconsistency."""
    shape = tuple(input_shape)
    for pos, spec in enumerate(layers):
        try:
            if spec.kind == "conv2d":
                if len(shape) != 3 or shape[0] != spec.in_channels:
                    raise ShapeError(
                        f"expects {spec.in_channels} channels, gets shape {shape}"
                    )
                h = _extent(shape[1], spec.kernel_h, spec.stride, spec.padding)
                w = _extent(shape[2], spec.kernel_w, spec.stride, spec.padding)
                shape = (spec.out_channels, h, w)
            elif spec.kind == "maxpool2d":
                if len(shape) != 3:
                    raise ShapeError(f"needs a spatial input, gets shape {shape}")
                h = _extent(shape[1], spec.window, spec.stride, 0)
                w = _extent(shape[2], spec.window, spec.stride, 0)
                shape = (shape[0], h, w)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "dense":
                if len(shape) != 1 or shape[0] != spec.in_features:
                    raise ShapeError(
                        f"expects {spec.in_features} features, gets shape {shape}"
                    )
                shape = (spec.out_features,)
            elif spec.kind != "relu":
                raise ShapeError(f"unknown layer kind {spec.kind!r}")
        except ShapeError as exc:
            raise ShapeError(f"layer {pos} ({spec.kind}): {exc}") from None
    return shape


def _extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"extent {size} with kernel {kernel}, stride {stride}, padding {padding} "
            "gives a non-integer output extent"
        )
    return span // stride + 1


@dataclass
class Model:
    """A runnable layer stack with named parameters.

    ``conv_index`` maps layer position -> conv ordinal; ``params`` maps
    names like ``conv0.weight`` / ``dense0.bias`` to float32 arrays.
    In-place writes through those arrays are the supported way to mutate
    weights (the merge sweep relies on this aliasing).
    """

    arch: ArchConfig
    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    conv_index: dict[int, int]
    _names: list[str | None] = field(repr=False, default_factory=list)

    @property
    def head(self) -> str:
        return self.arch.head

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def n_conv(self) -> int:
        return len(self.conv_index)

    def param_names(self) -> list[str]:
        """Parameter names in forward-layer order (stable per config)."""
        names: list[str] = []
        for base in self._names:
            if base is not None:
                names.extend((f"{base}.weight", f"{base}.bias"))
        return names

    def get_param(self, name: str) -> np.ndarray:
        if name not in self.params:
            raise ConfigError(f"unknown parameter {name!r}")
        return self.params[name]

    def set_param(self, name: str, value: np.ndarray) -> None:
        current = self.get_param(name)
        value = np.asarray(value, dtype=current.dtype)
        if value.shape != current.shape:
            raise ShapeError(
                f"set_param({name!r}): shape {value.shape} != {current.shape}"
            )
        self.params[name] = np.ascontiguousarray(value)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "Model":
        return Model(
            arch=self.arch,
            layers=list(self.layers),
            params={k: v.copy() for k, v in self.params.items()},
            conv_index=dict(self.conv_index),
            _names=list(self._names),
        )

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, want_caches: bool = False):
        """Logits for an NCHW batch; with ``want_caches`` also returns what
        ``backward`` needs."""
        if x.ndim != 4 or x.shape[1:] != self.arch.input_shape:
            raise ShapeError(
                f"forward: batch shape {x.shape} does not end in {self.arch.input_shape}"
            )
        caches = [] if want_caches else None
        h = x
        for pos, spec in enumerate(self.layers):
            base = self._names[pos]
            if spec.kind == "conv2d":
                w, b = self.params[f"{base}.weight"], self.params[f"{base}.bias"]
                if want_caches:
                    cols_box: list = []
                    x_in = h
                    h = conv2d_forward(h, w, b, spec.stride, spec.padding, _cols_out=cols_box)
                    caches.append((x_in, cols_box[0]))
                else:
                    h = conv2d_forward(h, w, b, spec.stride, spec.padding)
            elif spec.kind == "relu":
                if want_caches:
                    caches.append(h)
                h = relu(h)
            elif spec.kind == "maxpool2d":
                h, cache = maxpool2d(h, spec.window, spec.stride)
                if want_caches:
                    caches.append(cache)
            elif spec.kind == "flatten":
                if want_caches:
                    caches.append(h.shape)
                h = flatten_forward(h)
            else:  # dense
                w, b = self.params[f"{base}.weight"], self.params[f"{base}.bias"]
                if want_caches:
                    caches.append(h)
                h = dense_forward(h, w, b)
        return (h, caches) if want_caches else h

    def backward(self, grad_logits: np.ndarray, caches: list) -> dict[str, np.ndarray]:
        """Parameter gradients (same keys as ``params``) for a forward pass
        recorded with ``want_caches=True``."""
        grads: dict[str, np.ndarray] = {}
        g = grad_logits
        for pos in range(len(self.layers) - 1, -1, -1):
            spec, cache, base = self.layers[pos], caches[pos], self._names[pos]
            if spec.kind == "conv2d":
                w = self.params[f"{base}.weight"]
                x_in, cols = cache
                g, gw, gb = conv2d_backward(g, x_in, w, spec.stride, spec.padding, cols=cols)
                grads[f"{base}.weight"], grads[f"{base}.bias"] = gw, gb
            elif spec.kind == "relu":
                g = relu_backward(g, cache)
            elif spec.kind == "maxpool2d":
                g = maxpool2d_backward(g, cache)
            elif spec.kind == "flatten":
                g = flatten_backward(g, cache)
            else:  # dense
                w = self.params[f"{base}.weight"]
                g, gw, gb = dense_backward(g, cache, w)
                grads[f"{base}.weight"], grads[f"{base}.bias"] = gw, gb
        return grads


def build_model(config: ArchConfig, seed: int) -> Model:
    """Assemble and He-uniform-initialize a model; deterministic per seed."""
    config.validate()
    layers = resolve_layers(config)
    out_shape = _walk_shapes(layers, config.input_shape)
    if out_shape != (config.num_classes,):
        raise ShapeError(
            f"stack produces per-sample shape {out_shape}, head needs ({config.num_classes},)"
        )
    rng = seeding.stream(seed, seeding.INIT)
    params: dict[str, np.ndarray] = {}
    names: list[str | None] = []
    conv_index: dict[int, int] = {}
    n_conv = n_dense = 0
    for pos, spec in enumerate(layers):
        if spec.kind == "conv2d":
            base = f"conv{n_conv}"
            conv_index[pos] = n_conv
            n_conv += 1
            fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
            shape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        elif spec.kind == "dense":
            base = f"dense{n_dense}"
            n_dense += 1
            fan_in = spec.in_features
            shape = (spec.out_features, spec.in_features)
        else:
            names.append(None)
            continue
        limit = math.sqrt(6.0 / fan_in)
        params[f"{base}.weight"] = rng.uniform(-limit, limit, size=shape).astype(DTYPE)
        params[f"{base}.bias"] = np.zeros(shape[0], dtype=DTYPE)
        names.append(base)
    return Model(arch=config, layers=layers, params=params, conv_index=conv_index, _names=names)


def conv_layers(model: Model) -> list[tuple[int, np.ndarray]]:
    """(ordinal, weight array) for every conv layer, forward order.

    The arrays are the registry's own; writes through them update the
    model, which is exactly what the merge sweep does.
    """
    out = []
    for pos in sorted(model.conv_index):
        ordinal = model.conv_index[pos]
        out.append((ordinal, model.params[f"conv{ordinal}.weight"]))
    return out
