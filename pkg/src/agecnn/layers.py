"""Forward and backward computation for every layer kind in the profiles.

Convolution and max pooling run through im2col + matrix multiply; the direct
summation form lives in the test suite as an oracle. Backward passes are exact
analytic gradients of the forward maps and are finite-difference checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import LabelError, ParameterError, ShapeError, StateError
from .tensor import Rng, pad2d

LAYER_KINDS = ("conv", "relu", "lrn", "maxpool", "fc", "dropout", "softmax_loss")

# Layer kinds that own weight/bias tensors.
PARAM_KINDS = ("conv", "fc")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network: a kind plus its hyperparameters."""

    name: str
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r} for layer {self.name!r}")
        p = self.params
        if self.kind == "conv":
            if p["out_channels"] < 1 or p["kernel"] < 1 or p["stride"] < 1:
                raise ParameterError(f"conv layer {self.name!r}: extents must be >= 1")
            if p["pad"] < 0:
                raise ParameterError(f"conv layer {self.name!r}: pad must be >= 0")
        elif self.kind == "lrn":
            if p["n"] < 1 or p["n"] % 2 == 0:
                raise ParameterError(f"lrn layer {self.name!r}: window n must be odd and >= 1")
        elif self.kind == "maxpool":
            if p["window"] < 1 or p["stride"] < 1:
                raise ParameterError(f"maxpool layer {self.name!r}: window/stride must be >= 1")
        elif self.kind == "fc":
            if p["out_features"] < 1:
                raise ParameterError(f"fc layer {self.name!r}: out_features must be >= 1")
        elif self.kind == "dropout":
            if not 0.0 <= p["rate"] < 1.0:
                raise ParameterError(f"dropout layer {self.name!r}: rate must be in [0, 1)")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


def conv(name, out_channels, kernel=3, stride=1, pad=1) -> LayerSpec:
    return LayerSpec(name, "conv", {"out_channels": int(out_channels), "kernel": int(kernel),
                                    "stride": int(stride), "pad": int(pad)})


def relu(name) -> LayerSpec:
    return LayerSpec(name, "relu")


def lrn(name, n=5, k=2.0, alpha=1e-4, beta=0.75) -> LayerSpec:
    return LayerSpec(name, "lrn", {"n": int(n), "k": float(k),
                                   "alpha": float(alpha), "beta": float(beta)})


def maxpool(name, window=2, stride=2) -> LayerSpec:
    return LayerSpec(name, "maxpool", {"window": int(window), "stride": int(stride)})


def fc(name, out_features, in_features=None) -> LayerSpec:
    p = {"out_features": int(out_features)}
    if in_features is not None:
        p["in_features"] = int(in_features)
    return LayerSpec(name, "fc", p)


def dropout(name, rate) -> LayerSpec:
    return LayerSpec(name, "dropout", {"rate": float(rate)})


def softmax_loss(name="prob") -> LayerSpec:
    return LayerSpec(name, "softmax_loss")


@dataclass
class LayerCache:
    """Values kept from one forward call for the matching backward call."""

    name: str
    kind: str
    mode: str
    data: dict


def out_extent(extent, window, stride, pad, what) -> int:
    """Output spatial extent (extent + 2*pad - window) / stride + 1.

    The division must be exact and the result positive.
    """
    span = extent + 2 * pad - window
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"{what}: window {window} stride {stride} pad {pad} does not tile extent {extent}")
    out = span // stride + 1
    if out < 1:
        raise ShapeError(f"{what}: non-positive output extent for input extent {extent}")
    return out


def im2col(x, kh, kw, stride, pad):
    """Unfold NxCxHxW into a (N*OH*OW, C*kh*kw) patch matrix.

    Row order is (n, oh, ow); column order is (c, u, v). Loops run over the
    kh*kw kernel offsets only, each moving a strided slice, so the cost is
    dominated by the copies rather than Python overhead.
    """
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = pad2d(x, pad)
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for u in range(kh):
        u_end = u + stride * oh
        for v in range(kw):
            v_end = v + stride * ow
            col[:, :, u, v] = xp[:, :, u:u_end:stride, v:v_end:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def col2im(col, x_shape, kh, kw, stride, pad):
    """Fold a patch matrix back to NxCxHxW, accumulating overlapping windows."""
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for u in range(kh):
        u_end = u + stride * oh
        for v in range(kw):
            v_end = v + stride * ow
            img[:, :, u:u_end:stride, v:v_end:stride] += col[:, :, u, v]
    if pad == 0:
        return img
    return img[:, :, pad:pad + h, pad:pad + w]


# ---------------------------------------------------------------------------
# conv
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, b, stride, pad):
    """y[n,o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] * x_padded[n,c,i*s+u,j*s+v]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv expects 4-D input and weights, got {x.shape} / {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv channel mismatch: input has {cin}, weights expect {cin_w}")
    if b.shape != (cout,):
        raise ShapeError(f"conv bias shape {b.shape} does not match {cout} filters")
    oh = out_extent(h, kh, stride, pad, "conv")
    ow = out_extent(wd, kw, stride, pad, "conv")
    col = im2col(x, kh, kw, stride, pad)
    y = col @ w.reshape(cout, -1).T + b
    y = y.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    cache = {"x": x, "w": w, "stride": stride, "pad": pad}
    return np.ascontiguousarray(y), cache


def conv2d_backward(cache, d_out, need_param_grads=True, need_input_grad=True):
    x, w = cache["x"], cache["w"]
    stride, pad = cache["stride"], cache["pad"]
    cout = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    dy = d_out.transpose(0, 2, 3, 1).reshape(-1, cout)
    d_params = {}
    if need_param_grads:
        # Patch matrix is recomputed here rather than cached: frozen-trunk
        # training never pays for it, and it can dwarf the activations.
        col = im2col(x, kh, kw, stride, pad)
        d_params["weight"] = (dy.T @ col).reshape(w.shape)
        d_params["bias"] = dy.sum(axis=0)
    d_in = None
    if need_input_grad:
        dcol = dy @ w.reshape(cout, -1)
        d_in = col2im(dcol, x.shape, kh, kw, stride, pad)
    return d_in, d_params


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), {"x": x}


def relu_backward(cache, d_out):
    return d_out * (cache["x"] > 0), {}


# ---------------------------------------------------------------------------
# lrn (across-channel local response normalization)
# ---------------------------------------------------------------------------

def _channel_window_sum(t, n):
    """Sliding sum of width n along the channel axis, window clipped at the ends."""
    c = t.shape[1]
    half = n // 2
    cs = np.concatenate([np.zeros_like(t[:, :1]), np.cumsum(t, axis=1)], axis=1)
    hi = np.minimum(np.arange(c) + half + 1, c)
    lo = np.maximum(np.arange(c) - half, 0)
    return cs[:, hi] - cs[:, lo]


def lrn_forward(x, n, k, alpha, beta):
    """y[c] = x[c] / (k + (alpha/n) * sum_{c' in window(c)} x[c']^2)^beta."""
    if n < 1 or n % 2 == 0:
        raise ParameterError(f"lrn window n must be odd and >= 1, got {n}")
    denom_base = k + (alpha / n) * _channel_window_sum(x * x, n)
    scale = denom_base ** (-beta)
    y = x * scale
    cache = {"x": x, "denom_base": denom_base, "scale": scale,
             "n": n, "alpha": alpha, "beta": beta}
    return y, cache


def lrn_backward(cache, d_out):
    x, base, scale = cache["x"], cache["denom_base"], cache["scale"]
    n, alpha, beta = cache["n"], cache["alpha"], cache["beta"]
    # d_in[j] = d_out[j]*S[j]^-b - (2ab/n) * x[j] * sum_{c in win(j)} d_out[c]*x[c]*S[c]^(-b-1)
    # Window membership is symmetric, so the inner sum is the same sliding sum.
    inner = _channel_window_sum(d_out * x * scale / base, n)
    return d_out * scale - (2.0 * alpha * beta / n) * x * inner, {}


# ---------------------------------------------------------------------------
# maxpool
# ---------------------------------------------------------------------------

def maxpool_forward(x, window, stride):
    """Window-wise maximum; the cache records each window's winning position."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool window {window} exceeds input {h}x{w}")
    oh = out_extent(h, window, stride, 0, "maxpool")
    ow = out_extent(w, window, stride, 0, "maxpool")
    col = im2col(x.reshape(n * c, 1, h, w), window, window, stride, 0)
    idx = np.argmax(col, axis=1)
    y = col[np.arange(col.shape[0]), idx].reshape(n, c, oh, ow)
    cache = {"idx": idx, "x_shape": x.shape, "window": window,
             "stride": stride, "cols": col.shape}
    return y, cache


def maxpool_backward(cache, d_out):
    n, c, h, w = cache["x_shape"]
    window, stride = cache["window"], cache["stride"]
    idx = cache["idx"]
    dcol = np.zeros(cache["cols"], dtype=d_out.dtype)
    dcol[np.arange(dcol.shape[0]), idx] = d_out.reshape(-1)
    d_in = col2im(dcol, (n * c, 1, h, w), window, window, stride, 0)
    return d_in.reshape(n, c, h, w), {}


# ---------------------------------------------------------------------------
# fc
# ---------------------------------------------------------------------------

def fc_forward(x, w, b):
    """y = flatten(x) . w + b with w laid out in_features x out_features."""
    orig_shape = x.shape
    x2 = x.reshape(orig_shape[0], -1) if x.ndim != 2 else x
    if x2.shape[1] != w.shape[0]:
        raise ShapeError(
            f"fc feature mismatch: input flattens to {x2.shape[1]}, weights expect {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"fc bias shape {b.shape} does not match {w.shape[1]} outputs")
    y = x2 @ w + b
    return y, {"x2": x2, "w": w, "orig_shape": orig_shape}


def fc_backward(cache, d_out, need_param_grads=True, need_input_grad=True):
    x2, w = cache["x2"], cache["w"]
    d_params = {}
    if need_param_grads:
        d_params["weight"] = x2.T @ d_out
        d_params["bias"] = d_out.sum(axis=0)
    d_in = None
    if need_input_grad:
        d_in = (d_out @ w.T).reshape(cache["orig_shape"])
    return d_in, d_params


# ---------------------------------------------------------------------------
# dropout (inverted: scaling happens at train time, eval is the identity)
# ---------------------------------------------------------------------------

def dropout_forward(x, p, mode, rng: Optional[Rng] = None):
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    if mode == "eval":
        return x, {"mask": None}
    if rng is None:
        raise ParameterError("dropout in train mode needs an rng")
    keep = rng.uniform(x.shape) >= p
    mask = keep.astype(x.dtype) / (1.0 - p)
    return x * mask, {"mask": mask}


def dropout_backward(cache, d_out):
    mask = cache["mask"]
    return (d_out if mask is None else d_out * mask), {}


# ---------------------------------------------------------------------------
# softmax + log loss
# ---------------------------------------------------------------------------

def softmax(scores):
    """Row-wise softmax with max subtraction; accumulation runs at 64-bit."""
    if scores.ndim != 2:
        raise ShapeError(f"softmax expects 2-D scores, got shape {scores.shape}")
    shifted = scores.astype(np.float64) - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.astype(scores.dtype)


def softmax_log_loss(scores, labels):
    """Mean negative log-probability of the true labels.

    Returns (loss, probs, cache); the cache carries what the backward pass
    needs. The gradient wrt scores is (probs - one_hot) / N.
    """
    n, k = scores.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    probs = softmax(scores)
    picked = probs[np.arange(n), labels].astype(np.float64)
    loss = float(-np.mean(np.log(picked)))
    cache = {"probs": probs, "labels": labels}
    return loss, probs, cache


def softmax_log_loss_backward(cache, d_loss=1.0):
    probs, labels = cache["probs"], cache["labels"]
    n = probs.shape[0]
    d_scores = probs.copy()
    d_scores[np.arange(n), labels] -= 1.0
    return d_scores * (d_loss / n), {}


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def forward_layer(spec: LayerSpec, x, params=None, mode="train", rng=None):
    """Run one layer forward. Returns (output, LayerCache).

    In train mode the softmax_loss layer passes scores through unchanged (the
    loss needs labels, which arrive at backward time); in eval mode it applies
    softmax and returns probabilities.
    """
    p = spec.params
    if spec.kind == "conv":
        y, data = conv2d_forward(x, params["weight"], params["bias"], p["stride"], p["pad"])
    elif spec.kind == "relu":
        y, data = relu_forward(x)
    elif spec.kind == "lrn":
        y, data = lrn_forward(x, p["n"], p["k"], p["alpha"], p["beta"])
    elif spec.kind == "maxpool":
        y, data = maxpool_forward(x, p["window"], p["stride"])
    elif spec.kind == "fc":
        if "in_features" in p:
            flat = int(np.prod(x.shape[1:]))
            if flat != p["in_features"]:
                raise ShapeError(
                    f"layer {spec.name!r}: input flattens to {flat} features, expected "
                    f"{p['in_features']}")
        y, data = fc_forward(x, params["weight"], params["bias"])
    elif spec.kind == "dropout":
        y, data = dropout_forward(x, p["rate"], mode, rng)
    elif spec.kind == "softmax_loss":
        if mode == "eval":
            y, data = softmax(x), {"scores": x}
        else:
            y, data = x, {"scores": x}
    else:  # pragma: no cover - kinds validated at construction
        raise ParameterError(f"unknown layer kind {spec.kind!r}")
    data["_out_shape"] = y.shape
    return y, LayerCache(spec.name, spec.kind, mode, data)


def backward_layer(spec: LayerSpec, cache: LayerCache, d_out,
                   need_param_grads=True, need_input_grad=True):
    """Run one layer backward from its forward cache. Returns (d_in, d_params)."""
    if cache.name != spec.name or cache.kind != spec.kind:
        raise StateError(
            f"cache from layer {cache.name!r}/{cache.kind} fed to {spec.name!r}/{spec.kind}")
    if cache.mode != "train":
        raise StateError(f"layer {spec.name!r}: backward needs a train-mode cache")
    data = cache.data
    if spec.kind != "softmax_loss" and d_out.shape != data["_out_shape"]:
        raise ShapeError(
            f"layer {spec.name!r}: upstream gradient shape {d_out.shape} does not match "
            f"forward output {data['_out_shape']}")
    if spec.kind == "conv":
        return conv2d_backward(data, d_out, need_param_grads, need_input_grad)
    if spec.kind == "relu":
        return relu_backward(data, d_out)
    if spec.kind == "lrn":
        return lrn_backward(data, d_out)
    if spec.kind == "maxpool":
        return maxpool_backward(data, d_out)
    if spec.kind == "fc":
        return fc_backward(data, d_out, need_param_grads, need_input_grad)
    if spec.kind == "dropout":
        return dropout_backward(data, d_out)
    if spec.kind == "softmax_loss":
        if "probs" not in data:
            raise StateError("softmax_loss backward needs a cache from softmax_log_loss")
        return softmax_log_loss_backward(data, d_out)
    raise ParameterError(f"unknown layer kind {spec.kind!r}")  # pragma: no cover
