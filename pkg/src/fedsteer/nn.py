"""Minimal dense neural-network engine for steering policies.

Parameters are stored as float32; all forward/backward arithmetic runs in
float64 so reductions accumulate at full precision. The engine is
deterministic: identical seeds and data order produce bit-identical models.

A policy network maps a flattened observation grid to a steering angle.
The final layer carries a tanh activation and the network output is scaled
by the steering limit, so predictions always land in [-0.69, 0.69] radians.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .obs import ModalityId, Observation, STEERING_LIMIT

LAYER_KINDS = ("dense", "activation")
ACTIVATIONS = ("relu", "tanh", "identity")

PARAMS_MAGIC = b"FILP"
PARAMS_FORMAT_VERSION = 1

# Wire tag for a model that has not been assigned a sensor modality yet.
_MODALITY_TAG_NONE = 0xFF

# One byte encodes both the layer kind (high nibble) and activation (low nibble).
_KIND_NIBBLE = {"dense": 0x1, "activation": 0x2}
_ACT_NIBBLE = {"relu": 0x1, "tanh": 0x2, "identity": 0x3}
_CODE_TO_LAYER = {(kn << 4) | an: (kind, act)
                  for kind, kn in _KIND_NIBBLE.items()
                  for act, an in _ACT_NIBBLE.items()}


class ShapeError(ValueError):
    """Layer dimensions do not chain or arrays do not match their spec."""


class FormatError(ValueError):
    """Malformed parameter bytes. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LayerSpec:
    """Shape and nonlinearity of one network layer.

    ``dense`` layers apply an affine map followed by their activation;
    ``activation`` layers are parameter-free and require in_dim == out_dim.
    """

    kind: str
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ShapeError(f"layer dims must be positive, got "
                             f"{self.in_dim}x{self.out_dim}")
        if self.kind == "activation" and self.in_dim != self.out_dim:
            raise ShapeError(f"activation layer must preserve width, got "
                             f"{self.in_dim} -> {self.out_dim}")


def validate_spec(spec) -> tuple[LayerSpec, ...]:
    """Check that consecutive layers chain; returns the spec as a tuple."""
    spec = tuple(spec)
    if not spec:
        raise ShapeError("network spec is empty")
    for k in range(len(spec) - 1):
        if spec[k].out_dim != spec[k + 1].in_dim:
            raise ShapeError(
                f"layer {k} out_dim={spec[k].out_dim} does not chain into "
                f"layer {k + 1} in_dim={spec[k + 1].in_dim}")
    return spec


@dataclass
class TrainConfig:
    """Hyperparameters for mini-batch SGD with L2 weight decay."""

    learning_rate: float = 0.01
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass(eq=False)
class PolicyModel:
    """Layered parameter container; the unit shipped over the wire and fused.

    ``weights[k]`` has shape (out_dim, in_dim) and ``biases[k]`` shape
    (out_dim,), both float32. Parameter-free activation layers keep zero
    arrays of the same shapes so the wire layout is uniform. ``version``
    increases by one on each completed training run or fine-tune.
    ``source_version`` records the lineage of a transferred model and is
    in-memory only (not serialized, excluded from equality).
    """

    spec: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    frozen: list[bool]
    version: int = 0
    modality: ModalityId | None = None
    source_version: int | None = field(default=None, compare=False)

    @property
    def in_dim(self) -> int:
        return self.spec[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.spec[-1].out_dim

    @property
    def n_layers(self) -> int:
        return len(self.spec)

    def copy(self) -> "PolicyModel":
        return PolicyModel(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            frozen=list(self.frozen),
            version=self.version,
            modality=self.modality,
            source_version=self.source_version,
        )

    def param_norm(self) -> float:
        """L2 norm over all parameters, accumulated in float64."""
        total = 0.0
        for w, b in zip(self.weights, self.biases):
            total += float(np.sum(w.astype(np.float64) ** 2))
            total += float(np.sum(b.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolicyModel):
            return NotImplemented
        return models_equal(self, other)


def models_equal(a: PolicyModel, b: PolicyModel) -> bool:
    """Bit-exact equality over spec, parameters, frozen flags, version, modality."""
    if a.spec != b.spec or a.frozen != b.frozen:
        return False
    if a.version != b.version or a.modality != b.modality:
        return False
    for wa, wb in zip(a.weights, b.weights):
        if wa.tobytes() != wb.tobytes():
            return False
    for ba, bb in zip(a.biases, b.biases):
        if ba.tobytes() != bb.tobytes():
            return False
    return True


@dataclass
class Gradients:
    """Per-layer MSE-loss gradients, float64, shaped like the model parameters."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]

    def norm(self) -> float:
        total = 0.0
        for dw, db in zip(self.d_weights, self.d_biases):
            total += float(np.sum(dw ** 2)) + float(np.sum(db ** 2))
        return float(np.sqrt(total))


def init_model(spec, seed: int) -> PolicyModel:
    """Create a fresh model with fan-in-scaled uniform weights and zero biases.

    Weights are drawn from U(-sqrt(6/in_dim), +sqrt(6/in_dim)); identical
    seeds yield bit-identical models. Version starts at 0, nothing frozen.
    """
    spec = validate_spec(spec)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in spec:
        if layer.kind == "dense":
            limit = np.sqrt(6.0 / layer.in_dim)
            w = rng.uniform(-limit, limit, size=(layer.out_dim, layer.in_dim))
            weights.append(w.astype(np.float32))
        else:
            weights.append(np.zeros((layer.out_dim, layer.in_dim), dtype=np.float32))
        biases.append(np.zeros(layer.out_dim, dtype=np.float32))
    return PolicyModel(spec=spec, weights=weights, biases=biases,
                       frozen=[False] * len(spec))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a ** 2
    return np.ones_like(z)


def forward_batch(model: PolicyModel, x: np.ndarray) -> np.ndarray:
    """Steering predictions for a batch of flattened observations.

    Args:
        x: array (n, in_dim); any float dtype, promoted to float64.

    Returns:
        Array (n,) of steering angles, STEERING_LIMIT * (last activation).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"expected input shape (n, {model.in_dim}), got {x.shape}")
    if model.out_dim != 1:
        raise ShapeError(f"steering head must have out_dim 1, got {model.out_dim}")
    h = x
    for layer, w, b in zip(model.spec, model.weights, model.biases):
        if layer.kind == "dense":
            h = h @ w.astype(np.float64).T + b.astype(np.float64)
        h = _activate(layer.activation, h)
    return STEERING_LIMIT * h[:, 0]


def forward(model: PolicyModel, obs: Observation) -> float:
    """Steering angle for one observation; checks the modality contract."""
    if model.modality is not None and obs.modality != model.modality:
        raise ValueError(f"model expects {model.modality.name.lower()} input, "
                         f"got {obs.modality.name.lower()}")
    flat = obs.flat()
    if flat.shape[0] != model.in_dim:
        raise ShapeError(f"observation length {flat.shape[0]} does not match "
                         f"model input dim {model.in_dim}")
    return float(forward_batch(model, flat[None, :])[0])


def backward_batch(model: PolicyModel, x: np.ndarray, targets: np.ndarray
                   ) -> tuple[Gradients, float]:
    """Gradients of mean-squared error over a batch, plus the loss value.

    Frozen layers receive exactly-zero gradient blocks. Returns float64
    gradients shaped like the model parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")

    # Forward with caches.
    h = x
    inputs, pre_acts, acts = [], [], []
    for layer, w, b in zip(model.spec, model.weights, model.biases):
        inputs.append(h)
        if layer.kind == "dense":
            z = h @ w.astype(np.float64).T + b.astype(np.float64)
        else:
            z = h
        a = _activate(layer.activation, z)
        pre_acts.append(z)
        acts.append(a)
        h = a
    preds = STEERING_LIMIT * h[:, 0]
    err = preds - targets
    loss = float(np.mean(err ** 2))

    # Backward. d(loss)/d(pred) = 2*err/n, then through the output scale.
    g = np.zeros_like(h)
    g[:, 0] = (2.0 / n) * err * STEERING_LIMIT
    d_weights = [np.zeros(w.shape, dtype=np.float64) for w in model.weights]
    d_biases = [np.zeros(b.shape, dtype=np.float64) for b in model.biases]
    for k in range(len(model.spec) - 1, -1, -1):
        layer = model.spec[k]
        g = g * _activation_grad(layer.activation, pre_acts[k], acts[k])
        if layer.kind == "dense":
            if not model.frozen[k]:
                d_weights[k] = g.T @ inputs[k]
                d_biases[k] = g.sum(axis=0)
            g = g @ model.weights[k].astype(np.float64)
    return Gradients(d_weights=d_weights, d_biases=d_biases), loss


def backward(model: PolicyModel, batch) -> Gradients:
    """MSE gradients for a list of (Observation, steering label) pairs."""
    if not batch:
        raise ValueError("empty batch")
    x = np.stack([obs.flat() for obs, _ in batch]).astype(np.float64)
    y = np.array([label for _, label in batch], dtype=np.float64)
    if np.any(np.abs(y) > STEERING_LIMIT + 1e-9):
        raise ValueError(f"labels must lie within +/-{STEERING_LIMIT}")
    grads, _ = backward_batch(model, x, y)
    return grads


def mse_loss(model: PolicyModel, x: np.ndarray, targets: np.ndarray) -> float:
    """Mean-squared error of the model over (x, targets), float64."""
    preds = forward_batch(model, np.asarray(x, dtype=np.float64))
    err = preds - np.asarray(targets, dtype=np.float64)
    return float(np.mean(err ** 2))


def sgd_step(model: PolicyModel, grads: Gradients, cfg: TrainConfig,
             lr_scale: float = 1.0) -> PolicyModel:
    """One SGD update with L2 decay: theta <- theta - lr*(grad + lambda*theta).

    Frozen layers come back bit-identical; the update is computed in float64
    and stored back as float32.
    """
    if len(grads.d_weights) != model.n_layers:
        raise ShapeError(f"gradient has {len(grads.d_weights)} layers, "
                         f"model has {model.n_layers}")
    lr = cfg.learning_rate * lr_scale
    lam = cfg.weight_decay
    new_w, new_b = [], []
    for k in range(model.n_layers):
        if grads.d_weights[k].shape != model.weights[k].shape:
            raise ShapeError(f"gradient block {k} shape {grads.d_weights[k].shape} "
                             f"does not match weights {model.weights[k].shape}")
        if model.frozen[k] or model.spec[k].kind != "dense":
            new_w.append(model.weights[k].copy())
            new_b.append(model.biases[k].copy())
            continue
        w64 = model.weights[k].astype(np.float64)
        b64 = model.biases[k].astype(np.float64)
        w64 -= lr * (grads.d_weights[k] + lam * w64)
        b64 -= lr * (grads.d_biases[k] + lam * b64)
        new_w.append(w64.astype(np.float32))
        new_b.append(b64.astype(np.float32))
    return replace(model, weights=new_w, biases=new_b,
                   frozen=list(model.frozen))


def _modality_tag(modality: ModalityId | None) -> int:
    return _MODALITY_TAG_NONE if modality is None else int(modality)


def serialize_params(model: PolicyModel) -> bytes:
    """Encode a model in the binary parameter format (magic ``FILP``).

    Layout, all integers little-endian: magic (4 bytes) | format version u16 |
    model version u32 | modality tag u8 | layer count u8 | per layer:
    kind u8, in_dim u16, out_dim u16, frozen u8, row-major float32 weights
    (out_dim x in_dim), float32 biases (out_dim). Round-trips bit-exactly.
    """
    if model.n_layers > 0xFF:
        raise ValueError("too many layers for the wire format")
    parts = [PARAMS_MAGIC,
             struct.pack("<HIBB", PARAMS_FORMAT_VERSION, model.version,
                         _modality_tag(model.modality), model.n_layers)]
    for layer, w, b, fr in zip(model.spec, model.weights, model.biases, model.frozen):
        code = (_KIND_NIBBLE[layer.kind] << 4) | _ACT_NIBBLE[layer.activation]
        parts.append(struct.pack("<BHHB", code, layer.in_dim, layer.out_dim,
                                 1 if fr else 0))
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def _take(data: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(data):
        raise FormatError(f"truncated parameter bytes while reading {what}", offset)
    return data[offset:offset + count], offset + count


def deserialize_params(data: bytes) -> PolicyModel:
    """Decode a ``FILP`` byte sequence back into a model.

    Raises FormatError (with byte offset) on bad magic, unknown codes,
    truncation, or trailing bytes.
    """
    raw, off = _take(data, 0, 4, "magic")
    if raw != PARAMS_MAGIC:
        raise FormatError(f"bad magic {raw!r}, expected {PARAMS_MAGIC!r}", 0)
    raw, off = _take(data, off, 8, "header")
    fmt_version, version, mod_tag, n_layers = struct.unpack("<HIBB", raw)
    if fmt_version != PARAMS_FORMAT_VERSION:
        raise FormatError(f"unsupported format version {fmt_version}", 4)
    if mod_tag == _MODALITY_TAG_NONE:
        modality = None
    else:
        try:
            modality = ModalityId(mod_tag)
        except ValueError:
            raise FormatError(f"unknown modality tag {mod_tag:#x}", 10) from None
    if n_layers == 0:
        raise FormatError("model has zero layers", 11)

    spec, weights, biases, frozen = [], [], [], []
    for k in range(n_layers):
        hdr_off = off
        raw, off = _take(data, off, 6, f"layer {k} header")
        code, in_dim, out_dim, fr = struct.unpack("<BHHB", raw)
        if code not in _CODE_TO_LAYER:
            raise FormatError(f"unknown layer code {code:#x}", hdr_off)
        if fr not in (0, 1):
            raise FormatError(f"bad frozen flag {fr}", hdr_off + 5)
        kind, act = _CODE_TO_LAYER[code]
        try:
            spec.append(LayerSpec(kind=kind, in_dim=in_dim, out_dim=out_dim,
                                  activation=act))
        except ValueError as exc:
            raise FormatError(f"invalid layer {k}: {exc}", hdr_off) from None
        raw, off = _take(data, off, 4 * out_dim * in_dim, f"layer {k} weights")
        weights.append(np.frombuffer(raw, dtype="<f4").reshape(out_dim, in_dim).copy())
        raw, off = _take(data, off, 4 * out_dim, f"layer {k} biases")
        biases.append(np.frombuffer(raw, dtype="<f4").copy())
        frozen.append(bool(fr))
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after last layer", off)
    try:
        spec = validate_spec(spec)
    except ShapeError as exc:
        raise FormatError(f"layer dims do not chain: {exc}", 12) from None
    return PolicyModel(spec=spec, weights=weights, biases=biases, frozen=frozen,
                       version=version, modality=modality)
