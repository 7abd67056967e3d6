"""Small dense-tensor CNN: forward, backward, SGD training, checkpoint I/O.

Everything is float64 and deterministic. Weight initialization and epoch
shuffles draw from counter-based Philox streams keyed by (seed, round,
epoch), so identical seeds and inputs reproduce checkpoints bit for bit.
Forward and backward are pure; training is sequential by contract.
"""

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    BadConfig,
    EmptyBatch,
    EmptyDataset,
    IoError,
    NumericalError,
    ShapeMismatch,
    SpecMismatch,
)
from .jsonio import canonical_json

CHECKPOINT_MAGIC = b"RSRL"
CHECKPOINT_VERSION = 1

# Distinct entropy domains keep the init / shuffle / split / synthesis
# Philox streams independent even when the integer seeds coincide.
INIT_STREAM = 0x11A7
SHUFFLE_STREAM = 0x5F1E


def seeded_rng(*entropy) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of non-negative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# Layer descriptors and network layout


@dataclass(frozen=True)
class Conv:
    kernel: int
    channels: int
    stride: int = 1


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int


@dataclass(frozen=True)
class Dense:
    width: int


@dataclass(frozen=True)
class Softmax:
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Layer stack with a leading conv (``conv1``) and a trailing
    dense-of-N (``fc``) + softmax head."""

    input_shape: tuple  # (H, W, C)
    layers: tuple
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise BadConfig(f"input shape must be (H, W, C) with positive dims, got {self.input_shape}")
        if self.n_classes < 2:
            raise BadConfig("need at least two classes")
        if len(self.layers) < 3:
            raise BadConfig("network needs at least conv1, fc and softmax layers")
        if not isinstance(self.layers[0], Conv):
            raise BadConfig("first layer must be a conv (conv1)")
        if not isinstance(self.layers[-1], Softmax):
            raise BadConfig("last layer must be softmax")
        fc = self.layers[-2]
        if not isinstance(fc, Dense) or fc.width != self.n_classes:
            raise BadConfig("layer before softmax must be a dense of width n_classes (fc)")
        self.layer_shapes()  # raises BadConfig when the chain is inconsistent

    def layer_shapes(self):
        """Output shape of every layer, in order."""
        shapes = []
        cur = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                h, w, _ = cur
                if layer.kernel < 1 or layer.stride < 1 or layer.channels < 1:
                    raise BadConfig(f"layer {i}: conv fields must be positive")
                if layer.kernel > h or layer.kernel > w:
                    raise BadConfig(f"layer {i}: {layer.kernel}x{layer.kernel} kernel exceeds {h}x{w} input")
                cur = (
                    (h - layer.kernel) // layer.stride + 1,
                    (w - layer.kernel) // layer.stride + 1,
                    layer.channels,
                )
            elif isinstance(layer, Relu):
                pass
            elif isinstance(layer, MaxPool):
                if len(cur) != 3:
                    raise BadConfig(f"layer {i}: maxpool needs a spatial input")
                h, w, c = cur
                if layer.window < 1 or layer.stride < 1:
                    raise BadConfig(f"layer {i}: maxpool fields must be positive")
                if layer.window > h or layer.window > w:
                    raise BadConfig(f"layer {i}: {layer.window}x{layer.window} window exceeds {h}x{w} input")
                cur = (
                    (h - layer.window) // layer.stride + 1,
                    (w - layer.window) // layer.stride + 1,
                    c,
                )
            elif isinstance(layer, Dense):
                if layer.width < 1:
                    raise BadConfig(f"layer {i}: dense width must be positive")
                cur = (layer.width,)
            elif isinstance(layer, Softmax):
                if len(cur) != 1:
                    raise BadConfig(f"layer {i}: softmax needs a vector input")
            else:
                raise BadConfig(f"layer {i}: unknown layer type {type(layer).__name__}")
            shapes.append(cur)
        return shapes

    def param_shapes(self):
        """Per layer: (weight shape, bias shape) or None for parameterless layers."""
        shapes = []
        cur = self.input_shape
        for layer, out in zip(self.layers, self.layer_shapes()):
            if isinstance(layer, Conv):
                shapes.append(((layer.kernel, layer.kernel, cur[2], layer.channels), (layer.channels,)))
            elif isinstance(layer, Dense):
                shapes.append(((int(np.prod(cur)), layer.width), (layer.width,)))
            else:
                shapes.append(None)
            cur = out
        return shapes

    def to_json_dict(self):
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                layers.append({"type": "conv", "kernel": layer.kernel, "channels": layer.channels, "stride": layer.stride})
            elif isinstance(layer, Relu):
                layers.append({"type": "relu"})
            elif isinstance(layer, MaxPool):
                layers.append({"type": "maxpool", "window": layer.window, "stride": layer.stride})
            elif isinstance(layer, Dense):
                layers.append({"type": "dense", "width": layer.width})
            else:
                layers.append({"type": "softmax"})
        return {"input_shape": list(self.input_shape), "layers": layers, "classes": self.n_classes}

    @staticmethod
    def from_json_dict(d):
        kinds = {
            "conv": lambda l: Conv(int(l["kernel"]), int(l["channels"]), int(l["stride"])),
            "relu": lambda l: Relu(),
            "maxpool": lambda l: MaxPool(int(l["window"]), int(l["stride"])),
            "dense": lambda l: Dense(int(l["width"])),
            "softmax": lambda l: Softmax(),
        }
        try:
            layers = tuple(kinds[l["type"]](l) for l in d["layers"])
            return NetworkSpec(tuple(d["input_shape"]), layers, int(d["classes"]))
        except (KeyError, TypeError) as exc:
            raise BadConfig(f"malformed network descriptor: {exc}") from exc


def default_network_spec(input_shape, n_classes) -> NetworkSpec:
    """Default desk-scale stack: conv 5x5x16, pool, conv 3x3x32, pool,
    dense 64, dense N, softmax."""
    return NetworkSpec(
        input_shape=tuple(input_shape),
        layers=(
            Conv(kernel=5, channels=16),
            Relu(),
            MaxPool(window=2, stride=2),
            Conv(kernel=3, channels=32),
            Relu(),
            MaxPool(window=2, stride=2),
            Dense(width=64),
            Relu(),
            Dense(width=n_classes),
            Softmax(),
        ),
        n_classes=n_classes,
    )


# ---------------------------------------------------------------------------
# Parameters and checkpoints


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise BadConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise BadConfig("batch size must be >= 1")
        # 0 is tolerated so that a zero step size provably leaves
        # parameters untouched; negative rates are rejected.
        if self.learning_rate < 0:
            raise BadConfig("learning rate must be non-negative")
        if self.seed < 0:
            raise BadConfig("seed must be non-negative")


@dataclass(frozen=True)
class Checkpoint:
    """Architecture + parameters produced by one training round.

    ``params`` is a tuple aligned with ``spec.layers``: each entry is a
    (weights, bias) pair of float64 arrays, or None for parameterless
    layers. Treat the arrays as read-only.
    """

    spec: NetworkSpec
    params: tuple
    round_index: int
    seed: int
    thresholds: tuple | None = None
    format_version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if len(self.params) != len(expected):
            raise SpecMismatch("parameter list does not match layer count")
        for i, (got, want) in enumerate(zip(self.params, expected)):
            if want is None:
                if got is not None:
                    raise SpecMismatch(f"layer {i} takes no parameters")
                continue
            w, b = got
            if tuple(w.shape) != want[0] or tuple(b.shape) != want[1]:
                raise SpecMismatch(
                    f"layer {i} parameter shapes {w.shape}/{b.shape} do not match spec {want}"
                )
        if self.round_index < 0:
            raise BadConfig("round index must be >= 0")


def init_params(spec: NetworkSpec, seed: int) -> tuple:
    """Glorot-uniform weights, zero biases, drawn from the run seed."""
    rng = seeded_rng(INIT_STREAM, seed)
    params = []
    for layer, shapes in zip(spec.layers, spec.param_shapes()):
        if shapes is None:
            params.append(None)
            continue
        w_shape, b_shape = shapes
        if isinstance(layer, Conv):
            fan_in = layer.kernel * layer.kernel * w_shape[2]
            fan_out = layer.kernel * layer.kernel * layer.channels
        else:
            fan_in, fan_out = w_shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=w_shape)
        params.append((w, np.zeros(b_shape)))
    return tuple(params)


def init_checkpoint(spec: NetworkSpec, seed: int) -> Checkpoint:
    if seed < 0:
        raise BadConfig("seed must be non-negative")
    return Checkpoint(spec=spec, params=init_params(spec, seed), round_index=0, seed=seed)


def copy_params(params: tuple) -> tuple:
    return tuple(None if p is None else (p[0].copy(), p[1].copy()) for p in params)


# ---------------------------------------------------------------------------
# Forward


def _conv_windows(x, kernel, stride):
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _conv_forward(x, w, b, stride):
    # windows: (B, H', W', C, k, k) against kernel (k, k, C, O)
    win = _conv_windows(x, w.shape[0], stride)
    return np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1])) + b


def _maxpool_forward(x, window, stride):
    win = _conv_windows(x, window, stride)
    return win.max(axis=(4, 5))


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_layers(spec, params, x):
    """All layer outputs for a batch ``x`` of shape (B, H, W, C)."""
    outputs = []
    cur = x
    for layer, p in zip(spec.layers, params):
        if isinstance(layer, Conv):
            cur = _conv_forward(cur, p[0], p[1], layer.stride)
        elif isinstance(layer, Relu):
            cur = np.maximum(cur, 0.0)
        elif isinstance(layer, MaxPool):
            cur = _maxpool_forward(cur, layer.window, layer.stride)
        elif isinstance(layer, Dense):
            flat = cur.reshape(cur.shape[0], -1)
            cur = flat @ p[0] + p[1]
        else:
            cur = _softmax(cur)
        outputs.append(cur)
    return outputs


@dataclass(frozen=True)
class Activations:
    """Per-layer outputs of a single image, with the named taps."""

    spec: NetworkSpec
    outputs: tuple

    @property
    def conv1(self):
        """First conv layer's feature-map stack, shape (H', W', channels)."""
        return self.outputs[0]

    @property
    def fc(self):
        """Pre-softmax dense vector of length n_classes."""
        return self.outputs[-2]

    @property
    def probabilities(self):
        return self.outputs[-1]


def _check_image_shape(spec, images):
    if tuple(images.shape[1:]) != spec.input_shape:
        raise ShapeMismatch(
            f"image shape {tuple(images.shape[1:])} does not match network input {spec.input_shape}"
        )


def _as_batch(spec, image):
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape == spec.input_shape:
        return arr[None]
    raise ShapeMismatch(f"image shape {arr.shape} does not match network input {spec.input_shape}")


def forward(net: Checkpoint, image) -> Activations:
    """Run one image through the network and keep every layer output."""
    batch = _as_batch(net.spec, image)
    outs = _forward_layers(net.spec, net.params, batch)
    return Activations(spec=net.spec, outputs=tuple(o[0] for o in outs))


def forward_batch(net: Checkpoint, images) -> list:
    """All layer outputs for ``images`` of shape (B, H, W, C)."""
    images = np.asarray(images, dtype=np.float64)
    _check_image_shape(net.spec, images)
    return _forward_layers(net.spec, net.params, images)


def conv2d(image, kernel, stride=1):
    """Valid (no padding) 2-D convolution of a single image.

    ``image`` is (H, W, C) or (H, W); ``kernel`` is (k, k, C, O), with
    (k, k) and (k, k, C) accepted as single-channel shorthands. Returns
    (H', W', O).
    """
    x = np.asarray(image, dtype=np.float64)
    w = np.asarray(kernel, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if w.ndim == 2:
        w = w[:, :, None, None]
    elif w.ndim == 3:
        w = w[:, :, :, None]
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeMismatch(f"expected (H, W, C) image and (k, k, C, O) kernel, got {x.shape} and {w.shape}")
    if w.shape[0] != w.shape[1]:
        raise ShapeMismatch("kernel must be square")
    if stride < 1:
        raise BadConfig("stride must be >= 1")
    if w.shape[0] > x.shape[0] or w.shape[1] > x.shape[1]:
        raise ShapeMismatch(f"kernel {w.shape[:2]} larger than input {x.shape[:2]}")
    if w.shape[2] != x.shape[2]:
        raise ShapeMismatch(f"kernel expects {w.shape[2]} channels, image has {x.shape[2]}")
    return _conv_forward(x[None], w, np.zeros(w.shape[3]), stride)[0]


# ---------------------------------------------------------------------------
# Backward


def _check_labels(labels, n_classes):
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise BadConfig(f"labels must lie in [0, {n_classes})")


def _backward_layers(spec, params, x, labels):
    """Mean cross-entropy gradients for every parameter tensor."""
    outputs = _forward_layers(spec, params, x)
    n = x.shape[0]
    probs = outputs[-1]
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    # Fused softmax + cross-entropy: gradient w.r.t. the fc logits.
    delta = (probs - onehot) / n

    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 2, -1, -1):
        layer = spec.layers[i]
        x_in = outputs[i - 1] if i > 0 else x
        if isinstance(layer, Dense):
            flat = x_in.reshape(n, -1)
            grads[i] = (flat.T @ delta, delta.sum(axis=0))
            delta = (delta @ params[i][0].T).reshape(x_in.shape)
        elif isinstance(layer, Relu):
            delta = delta * (x_in > 0)
        elif isinstance(layer, MaxPool):
            delta = _maxpool_backward(x_in, delta, layer.window, layer.stride)
        elif isinstance(layer, Conv):
            gw, gb, dx = _conv_backward(x_in, delta, params[i][0], layer.stride, need_dx=i > 0)
            grads[i] = (gw, gb)
            delta = dx
        else:
            raise BadConfig("softmax may only appear as the final layer")
    return tuple(grads), outputs


def _maxpool_backward(x, dy, window, stride):
    win = _conv_windows(x, window, stride)
    b, oh, ow, c = dy.shape
    flat = win.reshape(b, oh, ow, c, window * window)
    winner = flat.argmax(axis=-1)  # first maximum wins, deterministically
    dx = np.zeros_like(x)
    for idx in range(window * window):
        a, d = divmod(idx, window)
        view = dx[:, a : a + stride * oh : stride, d : d + stride * ow : stride, :]
        view += dy * (winner == idx)
    return dx


def _conv_backward(x, dy, w, stride, need_dx):
    k = w.shape[0]
    _, oh, ow, _ = dy.shape
    gw = np.empty_like(w)
    for a in range(k):
        for d in range(k):
            xs = x[:, a : a + stride * oh : stride, d : d + stride * ow : stride, :]
            gw[a, d] = np.tensordot(xs, dy, axes=([0, 1, 2], [0, 1, 2]))
    gb = dy.sum(axis=(0, 1, 2))
    dx = None
    if need_dx:
        dx = np.zeros_like(x)
        for a in range(k):
            for d in range(k):
                view = dx[:, a : a + stride * oh : stride, d : d + stride * ow : stride, :]
                view += dy @ w[a, d].T
    return gw, gb, dx


def batch_loss(net: Checkpoint, images, labels) -> float:
    """Mean cross-entropy of a batch under the network."""
    images, labels = _coerce_batch(net.spec, images, labels)
    probs = _forward_layers(net.spec, net.params, images)[-1]
    picked = probs[np.arange(labels.size), labels]
    return float(-np.log(picked).mean())


def _coerce_batch(spec, images, labels):
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ShapeMismatch("expected images (B, H, W, C) with one label per image")
    if images.shape[0] == 0:
        raise EmptyBatch("batch is empty")
    _check_image_shape(spec, images)
    _check_labels(labels, spec.n_classes)
    return images, labels


def backward(net: Checkpoint, images, labels) -> tuple:
    """Cross-entropy gradients, one (dW, db) pair per parameterized layer,
    averaged over the batch."""
    images, labels = _coerce_batch(net.spec, images, labels)
    grads, _ = _backward_layers(net.spec, net.params, images, labels)
    return grads


def sgd_step(params: tuple, grads: tuple, learning_rate: float) -> tuple:
    """Elementwise p - lr * g; returns fresh arrays."""
    if len(params) != len(grads):
        raise ShapeMismatch("parameter and gradient lists differ in length")
    updated = []
    for p, g in zip(params, grads):
        if p is None or g is None:
            if (p is None) != (g is None):
                raise ShapeMismatch("parameter/gradient layer mismatch")
            updated.append(None)
            continue
        if p[0].shape != g[0].shape or p[1].shape != g[1].shape:
            raise ShapeMismatch(f"gradient shapes {g[0].shape}/{g[1].shape} do not match parameters")
        updated.append((p[0] - learning_rate * g[0], p[1] - learning_rate * g[1]))
    return tuple(updated)


def train(
    init: Checkpoint,
    images,
    labels,
    config: TrainConfig,
    round_index: int | None = None,
) -> Checkpoint:
    """SGD for ``config.epochs`` passes, warm-starting from ``init``.

    The per-epoch shuffle is keyed by (seed, round, epoch), so the same
    inputs always produce a bit-identical checkpoint.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise EmptyDataset("training set is empty")
    _check_image_shape(init.spec, images)
    _check_labels(labels, init.spec.n_classes)
    if round_index is None:
        round_index = init.round_index

    n = images.shape[0]
    params = init.params
    for epoch in range(config.epochs):
        order = seeded_rng(SHUFFLE_STREAM, config.seed, round_index, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            grads, _ = _backward_layers(init.spec, params, images[idx], labels[idx])
            params = sgd_step(params, grads, config.learning_rate)
        for p in params:
            if p is not None and not (np.isfinite(p[0]).all() and np.isfinite(p[1]).all()):
                raise NumericalError(
                    f"non-finite parameters after epoch {epoch}; lower the learning rate"
                )
    return replace(init, params=params, round_index=round_index)


# ---------------------------------------------------------------------------
# Checkpoint persistence


def _param_bytes(ckpt: Checkpoint) -> bytes:
    chunks = []
    for p in ckpt.params:
        if p is None:
            continue
        chunks.append(np.ascontiguousarray(p[0], dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(p[1], dtype="<f8").tobytes())
    return b"".join(chunks)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialized checkpoint: magic, version, arch JSON, raw little-endian
    float64 parameters in declaration order, metadata JSON."""
    arch = canonical_json(ckpt.spec.to_json_dict()).encode("utf-8")
    meta = canonical_json(
        {
            "round": ckpt.round_index,
            "seed": ckpt.seed,
            "thresholds": list(ckpt.thresholds) if ckpt.thresholds is not None else None,
        }
    ).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", ckpt.format_version),
        struct.pack("<I", len(arch)),
        arch,
        _param_bytes(ckpt),
        struct.pack("<I", len(meta)),
        meta,
    ]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(checkpoint_bytes(ckpt))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    import json as _json

    def take(n, what):
        nonlocal offset
        if offset + n > len(blob):
            raise IoError(f"truncated checkpoint while reading {what}")
        piece = blob[offset : offset + n]
        offset += n
        return piece

    offset = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise IoError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise IoError(f"unsupported checkpoint version {version}")
    (arch_len,) = struct.unpack("<I", take(4, "descriptor length"))
    try:
        spec = NetworkSpec.from_json_dict(_json.loads(take(arch_len, "descriptor").decode("utf-8")))
    except (ValueError, BadConfig) as exc:
        raise IoError(f"malformed architecture descriptor: {exc}") from exc

    params = []
    for shapes in spec.param_shapes():
        if shapes is None:
            params.append(None)
            continue
        w_shape, b_shape = shapes
        w_n = int(np.prod(w_shape))
        b_n = int(np.prod(b_shape))
        w = np.frombuffer(take(8 * w_n, "weights"), dtype="<f8").reshape(w_shape).astype(np.float64)
        b = np.frombuffer(take(8 * b_n, "bias"), dtype="<f8").astype(np.float64)
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise IoError("checkpoint contains non-finite parameters")
        params.append((w, b))
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    try:
        meta = _json.loads(take(meta_len, "metadata").decode("utf-8"))
    except ValueError as exc:
        raise IoError(f"malformed checkpoint metadata: {exc}") from exc
    if offset != len(blob):
        raise IoError("trailing bytes after checkpoint metadata")
    thresholds = meta.get("thresholds")
    return Checkpoint(
        spec=spec,
        params=tuple(params),
        round_index=int(meta["round"]),
        seed=int(meta["seed"]),
        thresholds=tuple(thresholds) if thresholds is not None else None,
        format_version=version,
    )


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return checkpoint_from_bytes(blob)
    except KeyError as exc:
        raise IoError(f"checkpoint metadata missing field {exc}") from exc


def params_equal(a: tuple, b: tuple) -> bool:
    """Bitwise equality of two parameter sets."""
    if len(a) != len(b):
        return False
    for pa, pb in zip(a, b):
        if (pa is None) != (pb is None):
            return False
        if pa is None:
            continue
        if pa[0].shape != pb[0].shape or pa[1].shape != pb[1].shape:
            return False
        if not (np.array_equal(pa[0], pb[0]) and np.array_equal(pa[1], pb[1])):
            return False
    return True
