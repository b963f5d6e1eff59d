"""Sequential network assembly: profiles, shape inference, head surgery,
and the full forward/backward pass with a per-layer freeze mask.

A ParamSet is a plain dict ``{layer_name: {"weight": array, "bias": array}}``
covering exactly the parameterized (conv/fc) layers of its NetworkSpec.
A FreezeMask is ``{layer_name: bool}`` over the same keys, True = trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError, StateError
from .tensor import Rng, create, gaussian_fill

PROFILE_NAMES = ("vgg_face_age", "mini")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer stack plus the input shape contract (C, H, W)."""

    name: str
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(e) for e in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"network {self.name!r}: duplicate layer names")
        loss_idx = [i for i, l in enumerate(self.layers) if l.kind == "softmax_loss"]
        if len(loss_idx) != 1 or loss_idx[0] != len(self.layers) - 1:
            raise ConfigError(
                f"network {self.name!r}: exactly one softmax_loss layer is required, last")

    def layer(self, name: str) -> L.LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise ConfigError(f"network {self.name!r} has no layer {name!r}")

    def parameterized(self):
        return [l for l in self.layers if l.has_params]


def _trunk_layers(blocks, include_norm, norm_n=3):
    """VGG-style trunk: per block, 3x3/s1/p1 convs + relus, then a 2x2/s2 pool.

    ``blocks`` is a list of channel lists; normed blocks get an
    across-channel normalization right after their first conv's relu.
    """
    out = []
    for b, (channels, normed) in enumerate(blocks, start=1):
        for i, ch in enumerate(channels, start=1):
            out.append(L.conv(f"conv{b}_{i}", ch))
            out.append(L.relu(f"relu{b}_{i}"))
            if normed and i == 1 and include_norm:
                out.append(L.lrn(f"norm{b}", n=norm_n))
        out.append(L.maxpool(f"pool{b}"))
    return out


def _head_layers(first_index, widths, in_features, rate, dropout_before_relu):
    """FC head: every layer but the last is followed by relu and dropout."""
    out = []
    fin = in_features
    for j, width in enumerate(widths):
        idx = first_index + j
        out.append(L.fc(f"fc{idx}", width, in_features=fin))
        fin = width
        if j < len(widths) - 1:
            pair = [L.relu(f"relu{idx}"), L.dropout(f"drop{idx}", rate)]
            if dropout_before_relu:
                pair.reverse()
            out.extend(pair)
    out.append(L.softmax_loss("prob"))
    return out


def build_profile(name: str, include_norm: bool = True, dropout_rate: float = 0.6,
                  dropout_before_relu: bool = False) -> NetworkSpec:
    """Construct a shipped profile by name (``vgg_face_age`` or ``mini``).

    ``include_norm`` drops the across-channel normalization layers when False;
    ``dropout_before_relu`` swaps the post-fc activation/dropout order.
    """
    key = name.replace("-", "_")
    if key == "vgg_face_age":
        blocks = [([64, 64], True), ([128, 128], True),
                  ([256, 256, 256], False), ([512, 512, 512], False), ([512, 512, 512], False)]
        trunk = _trunk_layers(blocks, include_norm)
        head = _head_layers(6, [4096, 5000, 5000, 8], 512 * 7 * 7,
                            dropout_rate, dropout_before_relu)
        return NetworkSpec("vgg_face_age", (3, 224, 224), trunk + head)
    if key == "mini":
        blocks = [([8, 8], True), ([16, 16], True)]
        trunk = _trunk_layers(blocks, include_norm)
        head = _head_layers(3, [32, 16, 8], 16 * 8 * 8, dropout_rate, dropout_before_relu)
        return NetworkSpec("mini", (3, 32, 32), trunk + head)
    raise ConfigError(f"unknown profile {name!r}; known: vgg-face-age, mini")


def infer_shapes(spec: NetworkSpec, input_shape=None):
    """Per-layer output shapes (batch dimension excluded), in layer order.

    Returns a list of (layer_name, shape) tuples. Raises ShapeError naming the
    first inconsistent layer.
    """
    shape = tuple(input_shape if input_shape is not None else spec.input_shape)
    out = []
    for layer in spec.layers:
        p = layer.params
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"layer {layer.name!r}: conv needs a CxHxW input, got {shape}")
            c, h, w = shape
            oh = L.out_extent(h, p["kernel"], p["stride"], p["pad"], f"layer {layer.name!r}")
            ow = L.out_extent(w, p["kernel"], p["stride"], p["pad"], f"layer {layer.name!r}")
            shape = (p["out_channels"], oh, ow)
        elif layer.kind == "maxpool":
            if len(shape) != 3:
                raise ShapeError(f"layer {layer.name!r}: maxpool needs a CxHxW input, got {shape}")
            c, h, w = shape
            if p["window"] > h or p["window"] > w:
                raise ShapeError(f"layer {layer.name!r}: window {p['window']} exceeds {h}x{w}")
            oh = L.out_extent(h, p["window"], p["stride"], 0, f"layer {layer.name!r}")
            ow = L.out_extent(w, p["window"], p["stride"], 0, f"layer {layer.name!r}")
            shape = (c, oh, ow)
        elif layer.kind == "fc":
            flat = int(np.prod(shape))
            if "in_features" in p and p["in_features"] != flat:
                raise ShapeError(
                    f"layer {layer.name!r}: input flattens to {flat} features, expected "
                    f"{p['in_features']}")
            shape = (p["out_features"],)
        # relu / lrn / dropout / softmax_loss preserve shape
        out.append((layer.name, shape))
    return out


def param_shapes(spec: NetworkSpec):
    """Expected weight/bias shapes per parameterized layer, from shape inference."""
    shapes = {}
    current = spec.input_shape
    inferred = infer_shapes(spec)
    for layer, (_, out_shape) in zip(spec.layers, inferred):
        if layer.kind == "conv":
            cin = current[0]
            k = layer.params["kernel"]
            cout = layer.params["out_channels"]
            shapes[layer.name] = {"weight": (cout, cin, k, k), "bias": (cout,)}
        elif layer.kind == "fc":
            fin = int(np.prod(current))
            shapes[layer.name] = {"weight": (fin, layer.params["out_features"]),
                                  "bias": (layer.params["out_features"],)}
        current = out_shape
    return shapes


def init_params(spec: NetworkSpec, rng: Rng, std: float = 0.01):
    """Fresh ParamSet: weights ~ normal(0, std^2), biases zero."""
    params = {}
    for name, shapes in param_shapes(spec).items():
        params[name] = {"weight": gaussian_fill(create(shapes["weight"]), 0.0, std, rng),
                        "bias": create(shapes["bias"])}
    return params


def validate_params(spec: NetworkSpec, params):
    """Check ParamSet keys and shapes against the spec; raises on mismatch."""
    expected = param_shapes(spec)
    if set(params) != set(expected):
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        raise ConfigError(f"params do not match spec: missing {sorted(missing)}, "
                          f"unexpected {sorted(extra)}")
    for name, shapes in expected.items():
        for tname, shape in shapes.items():
            got = params[name][tname].shape
            if tuple(got) != shape:
                raise ShapeError(f"layer {name!r}: {tname} shape {got}, expected {shape}")


def make_mask(spec: NetworkSpec, trainable=True):
    """Freeze mask over the parameterized layers.

    trainable may be a bool applied to every layer, or a collection of layer
    names to leave trainable with the rest frozen.
    """
    names = [l.name for l in spec.parameterized()]
    if isinstance(trainable, bool):
        return {name: trainable for name in names}
    wanted = set(trainable)
    unknown = wanted - set(names)
    if unknown:
        raise ConfigError(f"mask names not in the network: {sorted(unknown)}")
    return {name: name in wanted for name in names}


def trunk_and_head(spec: NetworkSpec):
    """Split at the first fc layer; validates the trailing head structure."""
    fc_idx = next((i for i, l in enumerate(spec.layers) if l.kind == "fc"), None)
    if fc_idx is None:
        raise ConfigError(f"network {spec.name!r} has no fc head to replace")
    head = spec.layers[fc_idx:]
    for l in head[:-1]:
        if l.kind not in ("fc", "relu", "dropout"):
            raise ConfigError(
                f"network {spec.name!r}: layer {l.name!r} ({l.kind}) interrupts the fc head")
    return spec.layers[:fc_idx], head


def replace_head_spec(spec: NetworkSpec, head_widths, dropout_rate: float = 0.6,
                      dropout_before_relu: bool = False) -> NetworkSpec:
    """Spec-level head surgery: drop the trailing fc stack, append a new one.

    New fc layers are numbered from (number of pooling stages + 1), matching
    the shipped profiles' naming.
    """
    if not head_widths:
        raise ConfigError("head_widths must not be empty")
    trunk, _ = trunk_and_head(spec)
    trunk_shapes = infer_shapes(NetworkSpec(spec.name, spec.input_shape,
                                            list(trunk) + [L.softmax_loss("prob")]))
    in_features = int(np.prod(trunk_shapes[-2][1])) if len(trunk) else int(np.prod(spec.input_shape))
    first_index = sum(1 for l in trunk if l.kind == "maxpool") + 1
    head = _head_layers(first_index, list(head_widths), in_features,
                        dropout_rate, dropout_before_relu)
    return NetworkSpec(spec.name, spec.input_shape, list(trunk) + head)


def head_replace(spec: NetworkSpec, head_widths, params, rng: Rng,
                 dropout_rate: float = 0.6, dropout_before_relu: bool = False,
                 init_std: float = 0.01):
    """Replace the fc head; trunk weights pass through untouched.

    Returns (new_spec, new_params, freeze_mask): new fc weights are drawn from
    normal(0, init_std^2) with zero biases, the mask freezes every trunk
    parameter and marks every new fc trainable. ``params`` must cover the
    trunk's parameterized layers (a partial set from a trunk import is fine);
    old head entries are dropped.
    """
    new_spec = replace_head_spec(spec, head_widths, dropout_rate, dropout_before_relu)
    trunk, _ = trunk_and_head(new_spec)
    new_params, mask = {}, {}
    for l in trunk:
        if not l.has_params:
            continue
        if l.name not in params:
            raise ConfigError(f"missing trunk parameters for layer {l.name!r}")
        new_params[l.name] = params[l.name]
        mask[l.name] = False
    shapes = param_shapes(new_spec)
    for l in new_spec.layers[len(trunk):]:
        if l.kind != "fc":
            continue
        new_params[l.name] = {
            "weight": gaussian_fill(create(shapes[l.name]["weight"]), 0.0, init_std, rng),
            "bias": create(shapes[l.name]["bias"]),
        }
        mask[l.name] = True
    return new_spec, new_params, mask


def _run_layers(spec, params, batch, mode, rng, stop_before_loss=False):
    if batch.ndim != 1 + len(spec.input_shape) or tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(
            f"batch shape {batch.shape} does not match input contract {spec.input_shape}")
    x = batch
    caches = []
    todo = spec.layers[:-1] if stop_before_loss else spec.layers
    for layer in todo:
        lp = None
        if layer.has_params:
            if params is None or layer.name not in params:
                raise StateError(f"no parameters supplied for layer {layer.name!r}")
            lp = params[layer.name]
        x, cache = L.forward_layer(layer, x, lp, mode, rng)
        caches.append(cache)
    return x, caches


def forward(spec: NetworkSpec, params, batch, mode: str = "train", rng: Rng = None):
    """Apply all layers in order. Returns (output, cache list).

    Train mode output is the pre-softmax score matrix (the loss layer passes
    scores through; labels arrive at backward time). Eval mode output is the
    softmax probability matrix, with dropout inactive.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return _run_layers(spec, params, batch, mode, rng)


def eval_scores(spec: NetworkSpec, params, batch):
    """Eval-mode pre-softmax scores (all layers except the final loss layer)."""
    scores, _ = _run_layers(spec, params, batch, "eval", None, stop_before_loss=True)
    return scores


def backward(spec: NetworkSpec, params, caches, labels, mask):
    """Gradients of the mean log loss for the mask's trainable layers only.

    The chain still propagates through frozen layers whenever an earlier layer
    is trainable; below the earliest trainable layer nothing is computed.
    """
    if set(mask) != {l.name for l in spec.parameterized()}:
        raise ConfigError("freeze mask must cover exactly the parameterized layers")
    if len(caches) != len(spec.layers):
        raise StateError(f"expected {len(spec.layers)} caches, got {len(caches)}")
    for layer, cache in zip(spec.layers, caches):
        if cache.name != layer.name or cache.mode != "train":
            raise StateError(f"cache for layer {layer.name!r} is stale or from another network")

    trainable_idx = [i for i, l in enumerate(spec.layers) if l.has_params and mask[l.name]]
    grads = {}
    if not trainable_idx:
        return grads
    earliest = min(trainable_idx)

    scores = caches[-1].data["scores"]
    _, _, loss_cache = L.softmax_log_loss(scores, labels)
    d, _ = L.softmax_log_loss_backward(loss_cache)
    for i in range(len(spec.layers) - 2, earliest - 1, -1):
        layer = spec.layers[i]
        need_params = layer.has_params and mask[layer.name]
        need_input = i > earliest
        d, dp = L.backward_layer(layer, caches[i], d, need_params, need_input)
        if need_params:
            grads[layer.name] = dp
    return grads


def count_params(spec: NetworkSpec):
    """Per-layer parameter counts, from shape inference."""
    return {name: sum(math.prod(s) for s in shapes.values())
            for name, shapes in param_shapes(spec).items()}
