"""Small trainable networks with explicit forward/backward passes.

Parameters live in per-layer tensors but every optimizer-facing operation
works on flat_view, a single vector whose layout is fixed by layer order and
a fixed name order inside each layer.  Gradients come back in the same
layout, which keeps the optimizer, the stability analysis and the correlation
studies on one common coordinate system.

Ghost batch normalization normalizes fixed-size row groups independently and
maintains running statistics as the mean of the per-group statistics.  Batches
are laid out replica-major by the augmentation module, so each ghost group
sees distinct source samples.

Per-sample gradients are defined in a decoupled evaluation mode: BN layers
use running statistics and dropout is inactive, so sample n's gradient does
not depend on which other samples share the batch.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .rng import RngStream
from .tensor import matmul_fast


# ---------------------------------------------------------------------------
# layer descriptors

class LayerSpec:
    pass


@dataclass(frozen=True)
class Linear(LayerSpec):
    in_features: int
    out_features: int

    def __post_init__(self):
        if self.in_features <= 0 or self.out_features <= 0:
            raise ContractViolation("linear extents must be positive")


@dataclass(frozen=True)
class Conv2d(LayerSpec):
    """Stride-1 convolution with zero 'same' padding; odd kernel only."""

    in_channels: int
    out_channels: int
    kernel: int = 3

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ContractViolation("conv extents must be positive")
        if self.kernel <= 0 or self.kernel % 2 == 0:
            raise ContractViolation("kernel must be odd and positive")


@dataclass(frozen=True)
class ReLU(LayerSpec):
    pass


@dataclass(frozen=True)
class GhostBatchNorm(LayerSpec):
    features: int
    ghost_size: int
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.features <= 0 or self.ghost_size <= 0:
            raise ContractViolation("ghost norm extents must be positive")
        if not 0.0 < self.momentum <= 1.0:
            raise ContractViolation("momentum must lie in (0, 1]")


@dataclass(frozen=True)
class Dropout(LayerSpec):
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ContractViolation("dropout rate must lie in [0, 1)")


@dataclass(frozen=True)
class Flatten(LayerSpec):
    pass


_TRAINABLE_ORDER = {
    Linear: ("w", "b"),
    Conv2d: ("w", "b"),
    GhostBatchNorm: ("gamma", "beta"),
}


# ---------------------------------------------------------------------------
# the model object

class Model:
    """Layer stack plus parameter storage and BN running state.

    `version` increments whenever parameters are replaced wholesale; caches
    record the version they were built against so a backward pass against
    moved parameters is rejected instead of silently wrong.
    """

    def __init__(self, layers, input_shape, class_count, init_stream=None,
                 text=""):
        self.layers = tuple(layers)
        self.input_shape = tuple(input_shape)
        self.class_count = int(class_count)
        self.text = text
        self.version = 0
        stream = init_stream if init_stream is not None else RngStream(0).split("init")
        self.params = []
        self.state = []
        self._check_composition()
        for layer in self.layers:
            p, s = _init_layer(layer, stream)
            self.params.append(p)
            self.state.append(s)

    def _check_composition(self):
        shape = self.input_shape
        for layer in self.layers:
            shape = _out_shape(layer, shape)
        if shape != (self.class_count,):
            raise ContractViolation(
                f"layer stack maps {self.input_shape} to {shape}, "
                f"expected ({self.class_count},) logits")

    # --- flat parameter vector ------------------------------------------
    def flat_slices(self):
        """(layer_index, tensor_name, slice) for every trainable tensor."""
        out = []
        offset = 0
        for i, layer in enumerate(self.layers):
            for name in _TRAINABLE_ORDER.get(type(layer), ()):
                size = self.params[i][name].size
                out.append((i, name, slice(offset, offset + size)))
                offset += size
        return out

    @property
    def param_count(self):
        slices = self.flat_slices()
        return slices[-1][2].stop if slices else 0

    def flat_view(self) -> np.ndarray:
        parts = [self.params[i][name].ravel()
                 for i, name, _ in self.flat_slices()]
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def set_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        slices = self.flat_slices()
        total = slices[-1][2].stop if slices else 0
        if vec.shape != (total,):
            raise ContractViolation(
                f"flat vector has {vec.shape}, model needs ({total},)")
        for i, name, sl in slices:
            shaped = vec[sl].reshape(self.params[i][name].shape)
            self.params[i][name] = shaped.copy()
        self.version += 1

    def weight_decay_mask(self) -> np.ndarray:
        """1.0 where decay applies; normalization parameters are exempt."""
        mask = np.zeros(self.param_count)
        for i, name, sl in self.flat_slices():
            if not isinstance(self.layers[i], GhostBatchNorm):
                mask[sl] = 1.0
        return mask

    def clone(self) -> "Model":
        other = Model.__new__(Model)
        other.layers = self.layers
        other.input_shape = self.input_shape
        other.class_count = self.class_count
        other.text = self.text
        other.version = 0
        other.params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        other.state = [{k: (v.copy() if isinstance(v, np.ndarray) else v)
                        for k, v in s.items()} for s in self.state]
        return other


def _out_shape(layer, shape):
    if isinstance(layer, Linear):
        if shape != (layer.in_features,):
            raise ContractViolation(
                f"linear expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ContractViolation(
                f"conv expects ({layer.in_channels}, H, W), got {shape}")
        return (layer.out_channels, shape[1], shape[2])
    if isinstance(layer, GhostBatchNorm):
        feat = shape[0]
        if feat != layer.features:
            raise ContractViolation(
                f"ghost norm expects {layer.features} features, got {shape}")
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    return shape


def _init_layer(layer, stream: RngStream):
    if isinstance(layer, Linear):
        scale = np.sqrt(2.0 / layer.in_features)
        w = stream.normal((layer.out_features, layer.in_features)) * scale
        return {"w": w, "b": np.zeros(layer.out_features)}, {}
    if isinstance(layer, Conv2d):
        fan_in = layer.in_channels * layer.kernel ** 2
        w = stream.normal(
            (layer.out_channels, layer.in_channels, layer.kernel,
             layer.kernel)) * np.sqrt(2.0 / fan_in)
        return {"w": w, "b": np.zeros(layer.out_channels)}, {}
    if isinstance(layer, GhostBatchNorm):
        return ({"gamma": np.ones(layer.features),
                 "beta": np.zeros(layer.features)},
                {"running_mean": np.zeros(layer.features),
                 "running_var": np.ones(layer.features)})
    return {}, {}


# ---------------------------------------------------------------------------
# forward

def forward(model: Model, batch: np.ndarray, mode: str = "train",
            stream: RngStream = None):
    """Run the stack; returns (logits, cache) where cache feeds backward.

    Eval mode uses running BN statistics, applies no dropout, and consumes
    no randomness.  Train mode requires the ghost size to divide the batch
    and a stream whenever a dropout layer is active.
    """
    if mode not in ("train", "eval"):
        raise ContractViolation(f"mode must be train or eval, got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ContractViolation(
            f"batch shape {x.shape[1:]} does not match model input "
            f"{model.input_shape}")
    entries = []
    for i, layer in enumerate(model.layers):
        x, entry = _forward_layer(layer, model.params[i], model.state[i],
                                  x, mode, stream)
        entries.append(entry)
    cache = {"version": model.version, "mode": mode, "entries": entries,
             "batch_count": batch.shape[0]}
    return x, cache


def _forward_layer(layer, params, state, x, mode, stream):
    if isinstance(layer, Linear):
        out = matmul_fast(x, params["w"].T) + params["b"]
        return out, {"x": x}
    if isinstance(layer, Conv2d):
        return _conv_forward(layer, params, x)
    if isinstance(layer, ReLU):
        mask = x > 0
        return x * mask, {"mask": mask}
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), {"shape": x.shape}
    if isinstance(layer, Dropout):
        if mode == "eval":
            return x, {"mask": None}
        if stream is None:
            raise ContractViolation("train-mode dropout needs a stream")
        keep = stream.uniform(x.shape) >= layer.p
        scale = 1.0 / (1.0 - layer.p)
        return x * keep * scale, {"mask": keep, "scale": scale}
    if isinstance(layer, GhostBatchNorm):
        return _gbn_forward(layer, params, state, x, mode)
    raise ContractViolation(f"unknown layer {layer!r}")


def _conv_forward(layer, params, x):
    n, c, h, w = x.shape
    k = layer.kernel
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    patches = np.empty((n, c, k, k, h, w))
    for ky in range(k):
        for kx in range(k):
            patches[:, :, ky, kx] = xp[:, :, ky:ky + h, kx:kx + w]
    cols = patches.reshape(n, c * k * k, h * w)
    big = np.ascontiguousarray(cols.transpose(0, 2, 1)).reshape(
        n * h * w, c * k * k)
    w_mat = params["w"].reshape(layer.out_channels, c * k * k)
    out = matmul_fast(big, w_mat.T) + params["b"]
    out = np.ascontiguousarray(
        out.reshape(n, h * w, layer.out_channels).transpose(0, 2, 1)
    ).reshape(n, layer.out_channels, h, w)
    return out, {"big": big, "in_shape": x.shape}


def _gbn_stats_shapegroups(layer, x):
    """Reshape (N, ...) into (groups, G, ...) and report reduce axes."""
    n = x.shape[0]
    g = layer.ghost_size
    if n % g != 0:
        raise ConfigError(
            f"ghost size {g} does not divide batch size {n}")
    grouped = x.reshape((n // g, g) + x.shape[1:])
    if x.ndim == 2:          # dense: (groups, G, F), stats over G
        axes = (1,)
    elif x.ndim == 4:        # conv: (groups, G, C, H, W), stats over G, H, W
        axes = (1, 3, 4)
    else:
        raise ContractViolation(f"ghost norm on unsupported rank {x.ndim}")
    return grouped, axes


def _gbn_forward(layer, params, state, x, mode):
    gamma, beta = params["gamma"], params["beta"]
    if x.ndim == 4:
        gshape = (1, -1, 1, 1)
    elif x.ndim == 2:
        gshape = (1, -1)
    else:
        raise ContractViolation(f"ghost norm on unsupported rank {x.ndim}")

    if mode == "eval":
        denom = np.sqrt(state["running_var"] + layer.eps)
        xhat = (x - state["running_mean"].reshape(gshape)) / denom.reshape(gshape)
        out = gamma.reshape(gshape) * xhat + beta.reshape(gshape)
        return out, {"xhat": xhat, "inv_std": None, "mode": "eval",
                     "eval_denom": denom}

    grouped, axes = _gbn_stats_shapegroups(layer, x)
    mean = grouped.mean(axis=axes, keepdims=True)
    var = grouped.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat_g = (grouped - mean) * inv_std
    xhat = xhat_g.reshape(x.shape)
    out = gamma.reshape(gshape) * xhat + beta.reshape(gshape)

    # running stats track the mean of the per-group statistics
    if x.ndim == 2:
        batch_mean = mean.reshape(mean.shape[0], -1).mean(axis=0)
        batch_var = var.reshape(var.shape[0], -1).mean(axis=0)
    else:
        batch_mean = mean.mean(axis=(0, 1, 3, 4)).ravel()
        batch_var = var.mean(axis=(0, 1, 3, 4)).ravel()
    m = layer.momentum
    state["running_mean"] = (1 - m) * state["running_mean"] + m * batch_mean
    state["running_var"] = (1 - m) * state["running_var"] + m * batch_var

    return out, {"xhat": xhat, "inv_std": inv_std, "axes": axes,
                 "mode": "train", "grouped_shape": grouped.shape}


# ---------------------------------------------------------------------------
# loss

def loss_softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy under softmax; returns (loss, dloss/dlogits).

    Stabilized by max subtraction; the gradient already carries the 1/N of
    the batch mean.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractViolation("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractViolation(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    loss = -logp[np.arange(n), labels].mean()
    probs = expz / denom
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits


# ---------------------------------------------------------------------------
# backward

def backward(model: Model, cache, dlogits: np.ndarray) -> np.ndarray:
    """Reverse pass; returns the gradient as one flat_view-ordered vector."""
    if cache["version"] != model.version:
        raise ContractViolation(
            "cache is stale: parameters changed since the forward pass")
    grads = [None] * len(model.layers)
    dx = np.asarray(dlogits, dtype=np.float64)
    for i in range(len(model.layers) - 1, -1, -1):
        dx, g = _backward_layer(model.layers[i], model.params[i], dx,
                                cache["entries"][i])
        grads[i] = g
    parts = [grads[i][name].ravel() for i, name, _ in model.flat_slices()]
    return np.concatenate(parts) if parts else np.zeros(0)


def _backward_layer(layer, params, dout, entry):
    if isinstance(layer, Linear):
        x = entry["x"]
        dw = matmul_fast(dout.T, x)
        db = dout.sum(axis=0)
        dx = matmul_fast(dout, params["w"])
        return dx, {"w": dw, "b": db}
    if isinstance(layer, Conv2d):
        return _conv_backward(layer, params, dout, entry)
    if isinstance(layer, ReLU):
        return dout * entry["mask"], {}
    if isinstance(layer, Flatten):
        return dout.reshape(entry["shape"]), {}
    if isinstance(layer, Dropout):
        if entry["mask"] is None:
            return dout, {}
        return dout * entry["mask"] * entry["scale"], {}
    if isinstance(layer, GhostBatchNorm):
        return _gbn_backward(layer, params, dout, entry)
    raise ContractViolation(f"unknown layer {layer!r}")


def _conv_backward(layer, params, dout, entry):
    n, c, h, w = entry["in_shape"]
    k = layer.kernel
    pad = k // 2
    f = layer.out_channels
    big = entry["big"]
    dout_mat = np.ascontiguousarray(
        dout.reshape(n, f, h * w).transpose(0, 2, 1)).reshape(n * h * w, f)
    dw = matmul_fast(dout_mat.T, big).reshape(params["w"].shape)
    db = dout_mat.sum(axis=0)
    dbig = matmul_fast(dout_mat, params["w"].reshape(f, c * k * k))
    dpatches = dbig.reshape(n, h * w, c * k * k).transpose(0, 2, 1).reshape(
        n, c, k, k, h, w)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + h, kx:kx + w] += dpatches[:, :, ky, kx]
    dx = dxp[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dx), {"w": dw, "b": db}


def _gbn_backward(layer, params, dout, entry):
    xhat = entry["xhat"]
    if dout.ndim == 4:
        gshape = (1, -1, 1, 1)
        feat_axes = (0, 2, 3)
    else:
        gshape = (1, -1)
        feat_axes = (0,)
    dgamma = (dout * xhat).sum(axis=feat_axes)
    dbeta = dout.sum(axis=feat_axes)
    dxhat = dout * params["gamma"].reshape(gshape)

    if entry["mode"] == "eval":
        denom = entry["eval_denom"]
        dx = dxhat / denom.reshape(gshape)
        return dx, {"gamma": dgamma, "beta": dbeta}

    axes = entry["axes"]
    grouped_shape = entry["grouped_shape"]
    dxhat_g = dxhat.reshape(grouped_shape)
    xhat_g = xhat.reshape(grouped_shape)
    inv_std = entry["inv_std"]
    mean_d = dxhat_g.mean(axis=axes, keepdims=True)
    mean_dx = (dxhat_g * xhat_g).mean(axis=axes, keepdims=True)
    dx_g = inv_std * (dxhat_g - mean_d - xhat_g * mean_dx)
    return dx_g.reshape(dout.shape), {"gamma": dgamma, "beta": dbeta}


# ---------------------------------------------------------------------------
# per-sample gradients (decoupled evaluation mode)

def per_sample_grads(model: Model, images: np.ndarray,
                     labels: np.ndarray) -> np.ndarray:
    """One flat gradient per sample, shape (N, d).

    Uses eval-mode statistics so rows do not interact; each row's gradient is
    the gradient of that sample's own loss (not the batch mean).
    """
    logits, cache = forward(model, images, mode="eval")
    n = logits.shape[0]
    probs_minus = _per_row_dlogits(logits, labels)
    grads = [None] * len(model.layers)
    dx = probs_minus
    for i in range(len(model.layers) - 1, -1, -1):
        dx, g = _backward_layer_per_sample(
            model.layers[i], model.params[i], dx, cache["entries"][i])
        grads[i] = g
    parts = [grads[i][name].reshape(n, -1)
             for i, name, _ in model.flat_slices()]
    return np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))


def _per_row_dlogits(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    out = probs
    out[np.arange(len(labels)), labels] -= 1.0
    return out


def _backward_layer_per_sample(layer, params, dout, entry):
    if isinstance(layer, Linear):
        x = entry["x"]
        dw = np.einsum("no,ni->noi", dout, x)
        db = dout.copy()
        dx = matmul_fast(dout, params["w"])
        return dx, {"w": dw, "b": db}
    if isinstance(layer, Conv2d):
        n, c, h, w = entry["in_shape"]
        k, f = layer.kernel, layer.out_channels
        big3 = entry["big"].reshape(n, h * w, c * k * k)
        dout3 = dout.reshape(n, f, h * w).transpose(0, 2, 1)
        dw = np.einsum("npf,npc->nfc", dout3, big3)
        db = dout3.sum(axis=1)
        dbig = np.einsum("npf,fc->npc", dout3, params["w"].reshape(f, -1))
        dpatches = dbig.transpose(0, 2, 1).reshape(n, c, k, k, h, w)
        pad = k // 2
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for ky in range(k):
            for kx in range(k):
                dxp[:, :, ky:ky + h, kx:kx + w] += dpatches[:, :, ky, kx]
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w]), \
            {"w": dw, "b": db}
    if isinstance(layer, ReLU):
        return dout * entry["mask"], {}
    if isinstance(layer, Flatten):
        return dout.reshape(entry["shape"]), {}
    if isinstance(layer, Dropout):
        return dout, {}   # eval mode: inactive
    if isinstance(layer, GhostBatchNorm):
        xhat = entry["xhat"]
        if dout.ndim == 4:
            gshape = (1, -1, 1, 1)
            per_sample_axes = (2, 3)
            dgamma = (dout * xhat).sum(axis=per_sample_axes)
            dbeta = dout.sum(axis=per_sample_axes)
        else:
            gshape = (1, -1)
            dgamma = dout * xhat
            dbeta = dout.copy()
        dx = dout * params["gamma"].reshape(gshape) / \
            entry["eval_denom"].reshape(gshape)
        return dx, {"gamma": dgamma, "beta": dbeta}
    raise ContractViolation(f"unknown layer {layer!r}")


def batch_grad(model: Model, images, labels, mode="eval", stream=None):
    """Mean-loss gradient of one batch as a flat vector (loss, grad)."""
    logits, cache = forward(model, images, mode=mode, stream=stream)
    loss, dlogits = loss_softmax_xent(logits, labels)
    return loss, backward(model, cache, dlogits)


# ---------------------------------------------------------------------------
# dropout replicas

def dropout_replicas(model: Model, batch: np.ndarray, replicas: int,
                     stream: RngStream, mode: str = "train"):
    """Forward the batch tiled `replicas` times, one dropout mask per row.

    The input rows repeat replica-major (row j*B + n is copy j of sample n)
    while every train-mode dropout layer draws fresh masks, so replicas of
    one sample differ only through dropout.  In eval mode all replicas
    collapse to the plain forward.
    """
    if not any(isinstance(l, Dropout) for l in model.layers):
        raise ContractViolation("model has no dropout layer to replicate")
    if replicas < 1:
        raise ContractViolation("replica count must be >= 1")
    tiled = np.tile(np.asarray(batch, dtype=np.float64),
                    (replicas,) + (1,) * (np.ndim(batch) - 1))
    return forward(model, tiled, mode=mode, stream=stream)


# ---------------------------------------------------------------------------
# model construction from config text

def parse_model_text(text: str):
    """Parse ``mlp:256`` / ``cnn:16,32`` into (kind, extents)."""
    text = text.strip()
    kind, _, args = text.partition(":")
    if kind not in ("mlp", "cnn"):
        raise ConfigError(f"unknown model kind {kind!r} in {text!r}")
    if not args:
        raise ConfigError(f"model {kind!r} needs at least one extent")
    try:
        extents = tuple(int(a) for a in args.split(","))
    except ValueError:
        raise ConfigError(f"bad model extents in {text!r}") from None
    if any(e <= 0 for e in extents):
        raise ConfigError(f"model extents must be positive in {text!r}")
    return kind, extents


def build_layers(text: str, input_shape, class_count: int,
                 ghost_size: int = 32, dropout: float = 0.0):
    """Layer stack for a model description on a given input shape.

    mlp:a,b,...  -> Flatten, then Linear+ReLU per hidden size, classifier.
    cnn:c1,c2,.. -> per channel count: Conv(3x3) + ghost norm + ReLU;
                    then Flatten and the classifier.
    A dropout rate > 0 inserts one Dropout before the classifier.
    """
    kind, extents = parse_model_text(text)
    c, h, w = input_shape
    layers = []
    if kind == "mlp":
        layers.append(Flatten())
        width = c * h * w
        for hidden in extents:
            layers += [Linear(width, hidden), ReLU()]
            width = hidden
        if dropout > 0.0:
            layers.append(Dropout(dropout))
        layers.append(Linear(width, class_count))
    else:
        prev = c
        for ch in extents:
            layers += [Conv2d(prev, ch, 3),
                       GhostBatchNorm(ch, ghost_size), ReLU()]
            prev = ch
        layers.append(Flatten())
        if dropout > 0.0:
            layers.append(Dropout(dropout))
        layers.append(Linear(prev * h * w, class_count))
    return tuple(layers)


def make_model(text: str, input_shape, class_count: int, seed: int = 0,
               ghost_size: int = 32, dropout: float = 0.0) -> Model:
    layers = build_layers(text, input_shape, class_count,
                          ghost_size=ghost_size, dropout=dropout)
    return Model(layers, input_shape, class_count,
                 init_stream=RngStream(seed).split("init"), text=text)


# ---------------------------------------------------------------------------
# checkpoints: text header, then length-prefixed 64-bit payloads

_CKPT_MAGIC = "batchaug-params v1"


def save_checkpoint(model: Model, path):
    """Text header describing the architecture, then the flat parameter
    vector and BN running state, each as a little-endian u64 length prefix
    followed by that many float64 values."""
    header = io.StringIO()
    print(_CKPT_MAGIC, file=header)
    print(f"model {model.text or 'custom'}", file=header)
    print("input " + " ".join(str(v) for v in model.input_shape), file=header)
    print(f"classes {model.class_count}", file=header)
    gbn = [l for l in model.layers if isinstance(l, GhostBatchNorm)]
    print(f"ghost {gbn[0].ghost_size if gbn else 0}", file=header)
    drop = [l for l in model.layers if isinstance(l, Dropout)]
    print(f"dropout {drop[0].p if drop else 0}", file=header)
    print("end-header", file=header)

    flat = model.flat_view()
    running = _running_state_vector(model)
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for vec in (flat, running):
            fh.write(struct.pack("<Q", vec.size))
            fh.write(vec.astype("<f8").tobytes())


def _running_state_vector(model):
    parts = []
    for layer, state in zip(model.layers, model.state):
        if isinstance(layer, GhostBatchNorm):
            parts.append(state["running_mean"].ravel())
            parts.append(state["running_var"].ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def _set_running_state_vector(model, vec):
    offset = 0
    for layer, state in zip(model.layers, model.state):
        if isinstance(layer, GhostBatchNorm):
            f = layer.features
            state["running_mean"] = vec[offset:offset + f].copy()
            state["running_var"] = vec[offset + f:offset + 2 * f].copy()
            offset += 2 * f
    if offset != vec.size:
        raise ContractViolation(
            f"running-state block holds {vec.size} values, model expects {offset}")


def load_checkpoint(path) -> Model:
    """Rebuild the model a checkpoint describes and restore its values."""
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"end-header\n"
    cut = raw.find(marker)
    if cut < 0 or not raw.startswith(_CKPT_MAGIC.encode()):
        raise ContractViolation(f"{path}: not a parameter checkpoint")
    lines = raw[:cut].decode("utf-8").splitlines()
    fields = dict(line.split(" ", 1) for line in lines[1:])
    if fields["model"] == "custom":
        raise ContractViolation(
            f"{path}: checkpoint lacks a reconstructible model description")
    input_shape = tuple(int(v) for v in fields["input"].split())
    model = make_model(fields["model"], input_shape,
                       int(fields["classes"]),
                       ghost_size=int(fields["ghost"]) or 32,
                       dropout=float(fields["dropout"]))
    body = raw[cut + len(marker):]
    vectors = []
    offset = 0
    for _ in range(2):
        (count,) = struct.unpack_from("<Q", body, offset)
        offset += 8
        vec = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        vectors.append(vec.copy())
    model.set_flat(vectors[0])
    _set_running_state_vector(model, vectors[1])
    return model
