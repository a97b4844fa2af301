"""Mini-batch optimization, best-dev-model selection, checkpoints, fine-tuning.

Training keeps the parameter snapshot of the epoch with the highest dev UAR
(earliest epoch on ties) and restores it before returning.  All shuffling
comes from the config seed, so a run is bit-reproducible.  Checkpoints store
parameters as little-endian float32 and round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    IntegrityError,
    NumericError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from .evaluation import uar_from_labels
from .models import Dense, Model, ModelSpec, forward, init_model, plan_shapes
from .tensor import backward, no_grad, softmax_cross_entropy

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    epochs: int = 20
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ConfigError(f"adam epsilon must be positive, got {self.epsilon}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_uar: float
    dev_uar: float


TrainHistory = list  # of EpochRecord


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def sgd_step(params: dict, grads: dict, lr: float):
    """theta <- theta - lr * g, elementwise over every named parameter."""
    for name, grad in grads.items():
        p = params[name]
        if grad.shape != p.data.shape:
            raise ShapeError(
                f"gradient for {name} has shape {grad.shape}, parameter {p.data.shape}"
            )
        p.data -= (lr * grad).astype(p.data.dtype, copy=False)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, grad in grads.items():
        p = params[name]
        if grad.shape != p.data.shape:
            raise ShapeError(
                f"gradient for {name} has shape {grad.shape}, parameter {p.data.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * np.square(grad)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + epsilon)).astype(p.data.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _check_dataset(name, data, n_classes, input_shape):
    features, labels = data
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise DataError(f"{name} dataset is empty")
    if features.shape[0] != labels.shape[0]:
        raise DataError(
            f"{name} dataset has {features.shape[0]} samples but {labels.shape[0]} labels"
        )
    if tuple(features.shape[1:]) != tuple(input_shape):
        raise ConfigError(
            f"{name} samples have shape {tuple(features.shape[1:])}, "
            f"model expects {tuple(input_shape)}"
        )
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(
            f"{name} labels must lie in [0, {n_classes}), found {labels.min()}..{labels.max()}"
        )
    return features, labels


def predict_batches(model: Model, features, batch_size: int = 64):
    """Labels and probabilities for ``features`` in inference mode."""
    features = np.asarray(features)
    out_labels = []
    out_probs = []
    with no_grad():
        for start in range(0, features.shape[0], batch_size):
            _, probs = forward(model, features[start:start + batch_size], training=False)
            out_probs.append(probs.data.copy())
            out_labels.append(np.argmax(probs.data, axis=1))
    return np.concatenate(out_labels), np.concatenate(out_probs)


def evaluate_uar(model: Model, dataset, batch_size: int = 64) -> float:
    features, labels = dataset
    pred, _ = predict_batches(model, features, batch_size)
    return uar_from_labels(labels, pred, model.n_classes)


def _trainable(model: Model) -> dict:
    return {name: p for name, p in model.params.items() if p.requires_grad}


def best_epoch_index(dev_uars) -> int:
    """Argmax over the dev-UAR history, first occurrence on ties."""
    values = list(dev_uars)
    if not values:
        raise ConfigError("history is empty; no best epoch exists")
    best = 0
    for i, value in enumerate(values):
        if value > values[best]:
            best = i
    return best


def train(model: Model, train_set, dev_set, config: TrainConfig):
    """Optimize ``model``; returns (model restored to its best epoch, history)."""
    x_train, y_train = _check_dataset("train", train_set, model.n_classes, model.spec.input_shape)
    x_dev, y_dev = _check_dataset("dev", dev_set, model.n_classes, model.spec.input_shape)

    rng = np.random.default_rng(config.seed)
    adam_state = AdamState()
    history: TrainHistory = []
    best_uar = -1.0
    best_params = None
    n = x_train.shape[0]

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        loss_sum = 0.0
        epoch_pred = np.empty(n, dtype=np.int64)
        epoch_true = np.empty(n, dtype=np.int64)
        cursor = 0
        for batch_no, start in enumerate(range(0, n, config.batch_size), start=1):
            rows = order[start:start + config.batch_size]
            xb, yb = x_train[rows], y_train[rows]
            try:
                logits, _ = forward(model, xb, training=True)
                loss, probs = softmax_cross_entropy(logits, yb)
                backward(loss)
            except NumericError as exc:
                raise NumericError(
                    f"non-finite value at epoch {epoch}, batch {batch_no}: {exc}"
                ) from exc
            grads = {name: p.grad for name, p in _trainable(model).items()
                     if p.grad is not None}
            if config.optimizer == "sgd":
                sgd_step(model.params, grads, config.learning_rate)
            else:
                adam_step(model.params, grads, adam_state, config.learning_rate,
                          config.beta1, config.beta2, config.epsilon)
            loss_sum += loss.item() * len(rows)
            epoch_pred[cursor:cursor + len(rows)] = np.argmax(probs.data, axis=1)
            epoch_true[cursor:cursor + len(rows)] = yb
            cursor += len(rows)

        train_uar = uar_from_labels(epoch_true, epoch_pred, model.n_classes)
        dev_uar = evaluate_uar(model, (x_dev, y_dev), config.batch_size)
        history.append(EpochRecord(epoch, loss_sum / n, train_uar, dev_uar))
        if dev_uar > best_uar:
            best_uar = dev_uar
            best_params = model.clone_parameters()

    model.load_parameters(best_params)
    return model, history


def write_history(history: TrainHistory, path):
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,train_uar,dev_uar\n")
        for rec in history:
            fh.write(f"{rec.epoch},{rec.train_loss:.6f},{rec.train_uar:.4f},{rec.dev_uar:.4f}\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DSLF"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    spec_text: str
    params: dict
    metadata: dict


def save_checkpoint(model: Model, metadata: dict, path):
    spec_bytes = model.spec.to_text().encode("utf-8")
    meta_text = "".join(f"{k}={v}\n" for k, v in metadata.items())
    meta_bytes = meta_text.encode("utf-8")
    names = sorted(model.params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(spec_bytes)))
        fh.write(spec_bytes)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            encoded = name.encode("utf-8")
            arr = model.params[name].data
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes())
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise TruncatedFileError(
                f"{self.path}: file ends {self.pos + count - len(self.blob)} bytes early"
            )
        out = self.blob[self.pos:self.pos + count]
        self.pos += count
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    reader = _Reader(blob, path)
    reader.take(4)
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    spec_text = reader.take(reader.u32()).decode("utf-8")
    params = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u16()).decode("utf-8")
        rank = reader.u8()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        params[name] = data.copy()
    metadata = {}
    for line in reader.take(reader.u32()).decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            metadata[key] = value
    return Checkpoint(version, spec_text, params, metadata)


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild the model from its embedded spec; validates names and shapes."""
    ckpt = read_checkpoint(path)
    try:
        spec = ModelSpec.from_text(ckpt.spec_text)
        model = init_model(spec)
    except (FormatError, ConfigError) as exc:
        raise IntegrityError(f"{path}: embedded model spec is invalid: {exc}") from exc
    if set(ckpt.params) != set(model.params):
        missing = sorted(set(model.params) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(model.params))
        raise IntegrityError(
            f"{path}: parameter set does not match the embedded spec "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, arr in ckpt.params.items():
        expected = tuple(model.params[name].shape)
        if tuple(arr.shape) != expected:
            raise IntegrityError(
                f"{path}: parameter {name} has shape {tuple(arr.shape)}, spec needs {expected}"
            )
    model.load_parameters(ckpt.params)
    return model, ckpt.metadata


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def fine_tune(checkpoint_path, new_train_set, new_dev_set, config: TrainConfig,
              new_n_classes: int | None = None, freeze_backbone: bool = False):
    """Continue training from a checkpoint, optionally with a fresh head."""
    model, _ = load_checkpoint(checkpoint_path)
    if new_n_classes is not None and new_n_classes != model.n_classes:
        new_spec = replace(model.spec, n_classes=int(new_n_classes), seed=config.seed)
        fresh = init_model(new_spec)
        for name, p in fresh.params.items():
            if not name.startswith("head."):
                p.data = model.params[name].data.copy()
        model = fresh
    if freeze_backbone:
        for name, p in model.params.items():
            if not name.startswith("head."):
                p.requires_grad = False
    return train(model, new_train_set, new_dev_set, config)
