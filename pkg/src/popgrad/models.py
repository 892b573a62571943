"""Desk-scale architectures and their flat parameter vectors.

Two families are provided. ``mlp`` is a stack of affine layers with ReLU
between them (a plain linear classifier when there are no hidden layers).
``miniconv`` is::

    conv3x3(c1) -> ReLU -> maxpool2 -> conv3x3(c2) -> ReLU -> maxpool2
    -> flatten -> affine(head) -> ReLU -> affine(classes)

Widths are scaled by ``width_multiplier`` with round-half-up and a floor of 1.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import ConfigError, NumericDivergenceError


def _scaled(base, multiplier):
    return max(1, int(math.floor(base * multiplier + 0.5)))


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple
    classes: int
    layer_sizes: tuple = ()  # mlp: (inputs, hidden..., classes)
    channels: tuple = ()  # miniconv: output channels per conv stage
    head: int = 64  # miniconv hidden affine width
    width_multiplier: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layer_sizes", tuple(int(v) for v in self.layer_sizes))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.kind not in ("mlp", "miniconv"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.classes < 2:
            raise ConfigError("a classifier needs at least 2 classes")
        if self.width_multiplier <= 0:
            raise ConfigError("width multiplier must be positive")
        if self.kind == "mlp":
            if len(self.layer_sizes) < 2:
                raise ConfigError("mlp layer_sizes needs at least input and output sizes")
            if self.layer_sizes[0] != int(np.prod(self.input_shape)):
                raise ConfigError(
                    f"mlp input size {self.layer_sizes[0]} != prod(input_shape) {self.input_shape}")
            if self.layer_sizes[-1] != self.classes:
                raise ConfigError("mlp output size must equal class count")
        else:
            if len(self.input_shape) != 3:
                raise ConfigError("miniconv needs a (C, H, W) input shape")
            if len(self.channels) != 2:
                raise ConfigError("miniconv takes exactly two conv stages")
        if any(v < 1 for v in self.layer_sizes + self.channels) or self.head < 1:
            raise ConfigError("all layer sizes must be >= 1")

    @property
    def effective_layer_sizes(self):
        if self.kind != "mlp":
            return ()
        sizes = list(self.layer_sizes)
        inner = [_scaled(v, self.width_multiplier) for v in sizes[1:-1]]
        return tuple([sizes[0]] + inner + [sizes[-1]])

    @property
    def effective_channels(self):
        return tuple(_scaled(c, self.width_multiplier) for c in self.channels)

    @property
    def effective_head(self):
        return _scaled(self.head, self.width_multiplier)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def scale_width(spec, multiplier):
    """Enlarge (or shrink) every hidden width and conv channel count.

    Scaling composes multiplicatively with the spec's existing multiplier;
    rounding is always applied to the base sizes, never compounded.
    """
    if multiplier <= 0:
        raise ConfigError("width multiplier must be positive")
    return replace(spec, width_multiplier=spec.width_multiplier * multiplier)


@dataclass(frozen=True)
class Layout:
    """Maps named parameter tensors to slices of one flat float64 vector."""

    names: tuple
    shapes: tuple

    @property
    def offsets(self):
        out, pos = [], 0
        for shape in self.shapes:
            out.append(pos)
            pos += int(np.prod(shape))
        return tuple(out)

    @property
    def size(self):
        return int(sum(int(np.prod(s)) for s in self.shapes))

    def slot(self, name):
        i = self.names.index(name)
        start = self.offsets[i]
        return slice(start, start + int(np.prod(self.shapes[i])))

    def unflatten(self, flat):
        flat = np.asarray(flat)
        if flat.shape != (self.size,):
            raise ConfigError(f"parameter vector length {flat.shape} != layout size {self.size}")
        return {n: flat[self.slot(n)].reshape(s) for n, s in zip(self.names, self.shapes)}

    def flatten(self, tensors):
        return np.concatenate([np.asarray(tensors[n], dtype=np.float64).reshape(-1)
                               for n in self.names])

    def weight_mask(self):
        """True for every coordinate that belongs to a weight (not a bias)."""
        mask = np.ones(self.size, dtype=bool)
        for n in self.names:
            if n.endswith(".b"):
                mask[self.slot(n)] = False
        return mask

    def to_dict(self):
        return {"names": list(self.names), "shapes": [list(s) for s in self.shapes]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["names"]), tuple(tuple(s) for s in d["shapes"]))


@dataclass(frozen=True)
class Forward:
    loss: float
    tape: T.Tape
    activations: list  # post-ReLU Vars, one per activation layer
    logits: np.ndarray


@dataclass(frozen=True)
class Model:
    """A built architecture: layer program, parameter layout and method settings.

    ``dropout`` holds one probability per dropout site (before each ReLU);
    ``l1``/``l2`` hold one factor per activation layer or are None.
    """

    spec: ModelSpec
    layers: tuple
    layout: Layout
    dropout: tuple = ()
    l1: tuple | None = None
    l2: tuple | None = None
    _n_relu: int = field(default=0, repr=False)

    @property
    def n_params(self):
        return self.layout.size

    def with_dropout(self, probs):
        probs = tuple(float(p) for p in probs)
        if probs and len(probs) != self._n_relu:
            raise ConfigError(f"expected {self._n_relu} dropout probabilities, got {len(probs)}")
        if any(not 0.0 <= p < 1.0 for p in probs):
            raise ConfigError("dropout probabilities must lie in [0, 1)")
        return replace(self, dropout=probs)

    def with_penalty(self, mode, factors):
        factors = tuple(float(f) for f in factors)
        if len(factors) != self._n_relu:
            raise ConfigError(f"expected {self._n_relu} penalty factors, got {len(factors)}")
        if any(f < 0 for f in factors):
            raise ConfigError("penalty factors must be non-negative")
        if mode == "l1":
            return replace(self, l1=factors)
        if mode == "l2":
            return replace(self, l2=factors)
        raise ConfigError(f"unknown penalty mode {mode!r}")

    def forward(self, params, images, labels, mode="train", rng=None):
        """Record the network on a fresh tape.

        Dropout masks are drawn from ``rng`` in train mode only; eval mode
        never touches ``rng``.
        """
        from .regsched import activation_penalty

        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ConfigError(f"params length {params.shape} != model parameter count {self.n_params}")
        images = np.asarray(images, dtype=np.float64)
        if images.shape[1:] != self.spec.input_shape:
            raise ConfigError(f"batch shape {images.shape[1:]} != model input {self.spec.input_shape}")
        train = mode == "train"
        if train and any(p > 0 for p in self.dropout) and rng is None:
            raise ConfigError("train-mode dropout needs an rng")

        tape = T.Tape(self.n_params)
        tensors = self.layout.unflatten(params)
        w = {n: tape.param(tensors[n], self.layout.slot(n)) for n in self.layout.names}
        x = tape.constant(images)
        if self.spec.kind == "mlp":
            x = T.flatten(x)
        acts = []
        site = 0
        for layer in self.layers:
            op = layer[0]
            if op == "affine":
                x = T.affine(x, w[layer[1] + ".w"], w[layer[1] + ".b"])
            elif op == "conv":
                x = T.conv2d(x, w[layer[1] + ".w"], w[layer[1] + ".b"])
            elif op == "relu":
                if train and self.dropout:
                    x = T.dropout(x, self.dropout[site], rng)
                x = T.relu(x)
                acts.append(x)
                site += 1
            elif op == "pool":
                x = T.maxpool2x2(x)
            elif op == "flatten":
                x = T.flatten(x)
        logits = x
        loss = T.softmax_cross_entropy(logits, labels)
        if self.l1 is not None:
            loss = loss + activation_penalty(acts, self.l1, "l1")
        if self.l2 is not None:
            loss = loss + activation_penalty(acts, self.l2, "l2")
        tape.root = loss
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericDivergenceError("non-finite loss")
        return Forward(value, tape, acts, logits.value)

    def loss_and_grad(self, params, images, labels, mode="train", rng=None):
        fwd = self.forward(params, images, labels, mode=mode, rng=rng)
        grad = T.backward(fwd.tape)
        if not np.all(np.isfinite(grad)):
            raise NumericDivergenceError("non-finite gradient")
        return fwd.loss, grad

    def loss(self, params, images, labels, mode="eval", rng=None):
        return self.forward(params, images, labels, mode=mode, rng=rng).loss

    def logits(self, params, images, batch_size=512):
        """Eval-mode logits, computed in chunks to bound memory."""
        params = np.asarray(params, dtype=np.float64)
        tensors = self.layout.unflatten(params)
        out = []
        for start in range(0, len(images), batch_size):
            x = np.asarray(images[start:start + batch_size], dtype=np.float64)
            if self.spec.kind == "mlp":
                x = x.reshape(len(x), -1)
            for layer in self.layers:
                op = layer[0]
                if op == "affine":
                    x = x @ tensors[layer[1] + ".w"] + tensors[layer[1] + ".b"]
                elif op == "conv":
                    x = _kernels.conv2d_forward(np.ascontiguousarray(x), tensors[layer[1] + ".w"],
                                                tensors[layer[1] + ".b"])
                elif op == "relu":
                    x = np.maximum(x, 0.0)
                elif op == "pool":
                    x = _kernels.maxpool2x2_forward(x)[0]
                elif op == "flatten":
                    x = x.reshape(len(x), -1)
            out.append(x)
        return np.concatenate(out) if out else np.zeros((0, self.spec.classes))

    def predict(self, params, images, batch_size=512):
        return self.logits(params, images, batch_size).argmax(axis=1)


def _program(spec):
    """Layer program and (name, shape, fan_in, fan_out) parameter list."""
    layers, params = [], []
    if spec.kind == "mlp":
        sizes = spec.effective_layer_sizes
        for i in range(len(sizes) - 1):
            name = f"fc{i}"
            layers.append(("affine", name))
            params.append((name + ".w", (sizes[i], sizes[i + 1]), sizes[i], sizes[i + 1]))
            params.append((name + ".b", (sizes[i + 1],), sizes[i], sizes[i + 1]))
            if i < len(sizes) - 2:
                layers.append(("relu",))
        return layers, params
    c_in, h, w = spec.input_shape
    for i, c_out in enumerate(spec.effective_channels):
        name = f"conv{i}"
        layers += [("conv", name), ("relu",), ("pool",)]
        params.append((name + ".w", (c_out, c_in, 3, 3), c_in * 9, c_out * 9))
        params.append((name + ".b", (c_out,), c_in * 9, c_out * 9))
        c_in, h, w = c_out, h // 2, w // 2
    if h < 1 or w < 1:
        raise ConfigError(f"input {spec.input_shape} too small for two 2x2 poolings")
    flat = c_in * h * w
    head = spec.effective_head
    layers += [("flatten",), ("affine", "fc0"), ("relu",), ("affine", "fc1")]
    params += [
        ("fc0.w", (flat, head), flat, head), ("fc0.b", (head,), flat, head),
        ("fc1.w", (head, spec.classes), head, spec.classes),
        ("fc1.b", (spec.classes,), head, spec.classes),
    ]
    return layers, params


def param_count(spec):
    return int(sum(int(np.prod(p[1])) for p in _program(spec)[1]))


def build(spec, init_rng):
    """Build ``spec`` and draw initial parameters.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)); biases uniform in
    +-1/sqrt(fan_in). ``init_rng`` may be a Generator or anything
    ``np.random.default_rng`` accepts.
    """
    rng = init_rng if isinstance(init_rng, np.random.Generator) else np.random.default_rng(init_rng)
    layers, plist = _program(spec)
    layout = Layout(tuple(p[0] for p in plist), tuple(p[1] for p in plist))
    chunks = []
    for name, shape, fan_in, fan_out in plist:
        if name.endswith(".b"):
            bound = 1.0 / math.sqrt(fan_in)
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    n_relu = sum(1 for layer in layers if layer[0] == "relu")
    model = Model(spec, tuple(layers), layout, _n_relu=n_relu)
    return model, np.concatenate(chunks)


def dropout_sites(model):
    """Indices into ``model.layers`` of each ReLU; dropout sits right before it."""
    return [i for i, layer in enumerate(model.layers) if layer[0] == "relu"]


def forward(model, params, batch, mode="train", rng=None):
    """``(loss, tape, per-layer activations)`` for ``batch = (images, labels)``."""
    fwd = model.forward(params, batch[0], batch[1], mode=mode, rng=rng)
    return fwd.loss, fwd.tape, fwd.activations


# ---------------------------------------------------------------------------
# checkpoint container:
#   bytes 0..3   magic b"PGCK"
#   bytes 4..7   uint32 little-endian header length H
#   bytes 8..8+H UTF-8 JSON header {"format": 1, "spec", "layout", "seed",
#                "dropout", "l1", "l2", "n_params"}
#   remainder    n_params float64 little-endian values

CHECKPOINT_MAGIC = b"PGCK"


def save_checkpoint(path, model, params, seed=None):
    params = np.asarray(params, dtype="<f8")
    header = {
        "format": 1,
        "spec": model.spec.to_dict(),
        "layout": model.layout.to_dict(),
        "seed": seed,
        "dropout": list(model.dropout),
        "l1": None if model.l1 is None else list(model.l1),
        "l2": None if model.l2 is None else list(model.l2),
        "n_params": int(params.size),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.tobytes())


def load_checkpoint(path):
    """Return ``(model, params, header)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    payload = data[8 + hlen:]
    if len(payload) != 8 * header["n_params"]:
        raise ConfigError(f"{path}: truncated parameter payload")
    spec = ModelSpec.from_dict(header["spec"])
    model, _ = build(spec, 0)
    if model.layout.to_dict() != header["layout"]:
        raise ConfigError(f"{path}: layout does not match the stored spec")
    if header["dropout"]:
        model = model.with_dropout(header["dropout"])
    if header["l1"] is not None:
        model = model.with_penalty("l1", header["l1"])
    if header["l2"] is not None:
        model = model.with_penalty("l2", header["l2"])
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return model, params, header
