"""Master and guardian networks: construction, training, distillation, checkpoints.

The master is the distillation-era MNIST stack (two conv32 blocks, pool, two
conv64 blocks, pool, two dense-200 layers, dense-10).  The guardian runs two
convolutional branches over the input image, concatenates their flattened
features, and classifies natural-vs-adversarial.

Training is plain minibatch SGD with momentum on the cross-entropy of the
temperature softmax; everything is seed-deterministic, including shuffling
and initialization.  Distillation trains a teacher at temperature T on hard
labels, computes the teacher's softened probabilities over the training
split, and trains a same-architecture student on those soft labels; the
student is deployed (and attacked) at temperature 1.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore
from .diffcore import LayerSpec, NetworkSpec, ParamSet
from .errors import CheckpointFormatError, TrainingDivergedError

CHECKPOINT_MAGIC = b"RBNT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    temperature: float = 100.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: ParamSet
    meta: dict[str, str] = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256(self.spec.digest())
        for name in self.spec.param_shapes():
            w, b = self.params[name]
            h.update(np.ascontiguousarray(w, dtype="<f4").tobytes())
            h.update(np.ascontiguousarray(b, dtype="<f4").tobytes())
        return h.hexdigest()

    @property
    def inference_temperature(self) -> float:
        return float(self.meta.get("inference_temperature", "1"))


def build_master() -> NetworkSpec:
    return NetworkSpec(
        input_shape=(28, 28, 1),
        layers=(
            LayerSpec("conv1", "conv_relu", kernel=(3, 3), channels=32),
            LayerSpec("conv2", "conv_relu", kernel=(3, 3), channels=32),
            LayerSpec("pool1", "maxpool"),
            LayerSpec("conv3", "conv_relu", kernel=(3, 3), channels=64),
            LayerSpec("conv4", "conv_relu", kernel=(3, 3), channels=64),
            LayerSpec("pool2", "maxpool"),
            LayerSpec("flat", "flatten"),
            LayerSpec("fc1", "dense_relu", units=200),
            LayerSpec("fc2", "dense_relu", units=200),
            LayerSpec("out", "dense", units=10),
        ),
    )


def build_guardian() -> NetworkSpec:
    return NetworkSpec(
        input_shape=(28, 28, 1),
        layers=(
            LayerSpec("a_conv", "conv_relu", kernel=(3, 3), channels=32, inputs=("input",)),
            LayerSpec("a_pool", "maxpool"),
            LayerSpec("a_flat", "flatten"),
            LayerSpec("b_conv", "conv_relu", kernel=(5, 5), channels=16, inputs=("input",)),
            LayerSpec("b_pool", "maxpool", inputs=("b_conv",)),
            LayerSpec("b_flat", "flatten", inputs=("b_pool",)),
            LayerSpec("merge", "concat", inputs=("a_flat", "b_flat")),
            LayerSpec("fc1", "dense_relu", units=128),
            LayerSpec("out", "dense", units=2),
        ),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def one_hot(labels: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(labels), width), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def train(
    spec: NetworkSpec,
    images: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    val_images: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
    log=None,
) -> Checkpoint:
    """Minibatch SGD with momentum on softmax-at-T cross-entropy.

    `targets` may be integer class labels or already-soft probability rows.
    Deterministic for a fixed config: init, shuffle order, and updates all
    derive from `config.seed`.

    Temperature handling: softmax at temperature T attenuates logit gradients
    by 1/T and pushes any confident optimum T-times further out, so naive SGD
    at T=100 either stalls (small steps) or saturates and dies (big steps).
    Training therefore parameterizes the output layer as T * W: the network is
    optimized at unit temperature -- identical loss values and identical
    gradient dynamics -- and the final dense layer is scaled by T afterwards,
    which makes softmax_T(logits, T) of the saved checkpoint exactly the
    trained distribution.  At T=1 all of this is a no-op.
    """
    if len(images) == 0:
        raise ValueError("training set is empty")
    if config.temperature != 1.0 and spec.layers[-1].kind != "dense":
        raise ValueError("temperature training expects the manifest to end with a dense layer")
    width = spec.output_width
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = one_hot(targets.astype(np.int64), width)
    targets = targets.astype(np.float32)

    rng = np.random.default_rng(config.seed)
    params = diffcore.init_param_set(spec, seed=config.seed)
    velocity = {name: (np.zeros_like(w), np.zeros_like(b)) for name, (w, b) in params.items()}
    step = config.learning_rate

    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        for batch_no, start in enumerate(range(0, len(images), config.batch_size)):
            idx = order[start:start + config.batch_size]
            _, tape = diffcore.forward(spec, params, images[idx], record=True)
            diffcore.attach_cross_entropy(tape, targets[idx],
                                          temperature=1.0, reduction="mean")
            loss = float(tape.values[tape.scalar_id])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch=epoch, batch=batch_no)
            grads, _ = diffcore.backward(tape)
            for name, (w, b) in params.items():
                vw, vb = velocity[name]
                gw, gb = grads[name]
                vw *= config.momentum
                vw += gw
                vb *= config.momentum
                vb += gb
                w -= step * vw
                b -= step * vb
        entry = {"epoch": epoch, "loss": loss}
        if val_images is not None:
            entry["val_accuracy"] = accuracy(spec, params, val_images, val_labels)
        history.append(entry)
        if log:
            log(entry)

    if config.temperature != 1.0:
        out_name = spec.layers[-1].name
        w, b = params[out_name]
        t = np.float32(config.temperature)
        params[out_name] = (w * t, b * t)

    meta = {
        "seed": str(config.seed),
        "epochs": str(config.epochs),
        "batch_size": str(config.batch_size),
        "learning_rate": repr(config.learning_rate),
        "momentum": repr(config.momentum),
        "temperature": repr(config.temperature),
        "inference_temperature": "1",
    }
    if val_images is not None:
        # recomputed on the final (possibly rescaled) parameters so the stored
        # value matches later recomputation exactly
        meta["val_accuracy"] = repr(accuracy(spec, params, val_images, val_labels))
    return Checkpoint(spec=spec, params=params, meta=meta)


def accuracy(spec: NetworkSpec, params: ParamSet, images: np.ndarray,
             labels: np.ndarray, batch: int = 512) -> float:
    hits = 0
    for start in range(0, len(images), batch):
        logits, _ = diffcore.forward(spec, params, images[start:start + batch])
        hits += int((logits.argmax(axis=1) == labels[start:start + batch]).sum())
    return hits / len(images)


def soft_labels(checkpoint: Checkpoint, images: np.ndarray,
                temperature: float, batch: int = 512) -> np.ndarray:
    """Teacher probabilities softmax_T(Z(x)) used as distillation targets."""
    rows = []
    for start in range(0, len(images), batch):
        logits, _ = diffcore.forward(checkpoint.spec, checkpoint.params,
                                     images[start:start + batch])
        z = logits / temperature
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        rows.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(rows, axis=0)


def distill(
    spec: NetworkSpec,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    val_images: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
    log=None,
) -> tuple[Checkpoint, Checkpoint]:
    """Two-phase distillation at config.temperature; returns (student, teacher).

    The student reuses the teacher's architecture, trains on the teacher's
    softened label distribution, and is marked for inference at temperature 1.
    """
    teacher = train(spec, images, labels, config,
                    val_images=val_images, val_labels=val_labels, log=log)
    soft = soft_labels(teacher, images, temperature=config.temperature)
    student_config = replace(config, seed=config.seed + 1)
    student = train(spec, images, soft, student_config,
                    val_images=val_images, val_labels=val_labels, log=log)
    student.meta["distilled"] = "1"
    teacher.meta["distilled"] = "0"
    return student, teacher


# ---------------------------------------------------------------------------
# Inference facade
# ---------------------------------------------------------------------------

class NetModel:
    """Frozen checkpoint exposing logits and input gradients for attacks.

    The underlying (spec, params) never mutate; concurrent use over different
    inputs is safe.  All gradient helpers share one recorded forward pass.
    """

    def __init__(self, checkpoint: Checkpoint):
        self.checkpoint = checkpoint
        self.spec = checkpoint.spec
        self.params = checkpoint.params
        self.num_classes = checkpoint.spec.output_width

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = diffcore.forward(self.spec, self.params, x)
        return out

    def predict(self, x: np.ndarray):
        """Argmax label(s); ties break toward the lowest class index."""
        out = self.logits(x)
        return int(out.argmax()) if out.ndim == 1 else out.argmax(axis=1)

    def probs(self, x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        z = self.logits(x) / temperature
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def record(self, xb: np.ndarray):
        """(logits, tape) of a recorded forward pass for custom gradient heads."""
        return diffcore.forward(self.spec, self.params, xb, record=True)

    def loss_grad(self, xb: np.ndarray, targets: np.ndarray,
                  temperature: float = 1.0) -> tuple[float, np.ndarray]:
        """(summed cross-entropy, d loss / d input) over a batch."""
        _, tape = diffcore.forward(self.spec, self.params, xb, record=True)
        diffcore.attach_cross_entropy(tape, targets, temperature=temperature, reduction="sum")
        loss = float(tape.values[tape.scalar_id])
        _, input_grad = diffcore.backward(tape)
        return loss, input_grad

    def weighted_logit_grad(self, xb: np.ndarray,
                            weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(logits, gradient of sum(weights * logits) w.r.t. the input)."""
        logits, tape = diffcore.forward(self.spec, self.params, xb, record=True)
        diffcore.attach_weighted_logits(tape, weights)
        _, input_grad = diffcore.backward(tape)
        return logits, input_grad

    def logits_and_class_grads(self, xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-class input gradients, one backward pass per class on a shared tape.

        Returns (logits (B,K), grads (K,B)+input_shape) where grads[k, b] is
        the gradient of logit k at example b.
        """
        logits, tape = diffcore.forward(self.spec, self.params, xb, record=True)
        bsz = logits.shape[0]
        grads = np.empty((self.num_classes,) + xb.shape, dtype=xb.dtype)
        for k in range(self.num_classes):
            weights = np.zeros_like(logits)
            weights[:, k] = 1.0
            head = diffcore.attach_weighted_logits(tape, weights)
            _, g = diffcore.backward(tape, head=head)
            grads[k] = g
        return logits, grads


def predict(checkpoint: Checkpoint, x: np.ndarray):
    return NetModel(checkpoint).predict(x)


def logits(checkpoint: Checkpoint, x: np.ndarray) -> np.ndarray:
    return NetModel(checkpoint).logits(x)


def guardian_score(checkpoint: Checkpoint, x: np.ndarray) -> tuple[float, float]:
    """(p_natural, p_adversarial) at temperature 1 for one image."""
    p = NetModel(checkpoint).probs(x)
    if p.ndim != 1 or p.shape[0] != 2:
        raise ValueError("guardian_score expects a single image and a 2-class checkpoint")
    return float(p[0]), float(p[1])


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """magic, version, spec digest, length-prefixed metadata lines, raw params."""
    meta = dict(checkpoint.meta)
    meta["spec_json"] = checkpoint.spec.to_json()
    meta_blob = "".join(f"{k}={v}\n" for k, v in sorted(meta.items())).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(checkpoint.spec.digest())
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        for name in checkpoint.spec.param_shapes():
            w, b = checkpoint.params[name]
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path, expected_spec: NetworkSpec | None = None) -> Checkpoint:
    """Bit-exact inverse of save_checkpoint; never returns a partial checkpoint."""
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    if len(blob) < 44 or view[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    digest = bytes(view[8:40])
    (meta_len,) = struct.unpack_from("<I", blob, 40)
    meta_end = 44 + meta_len
    if meta_end > len(blob):
        raise CheckpointFormatError(f"{path}: truncated metadata block")
    meta: dict[str, str] = {}
    for line in blob[44:meta_end].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    if "spec_json" not in meta:
        raise CheckpointFormatError(f"{path}: metadata is missing the layer manifest")
    spec = NetworkSpec.from_json(meta.pop("spec_json"))
    if spec.digest() != digest:
        raise CheckpointFormatError(f"{path}: spec digest mismatch")
    if expected_spec is not None and expected_spec.digest() != digest:
        raise CheckpointFormatError(
            f"{path}: checkpoint was written for a different layer manifest")

    params: ParamSet = {}
    offset = meta_end
    for name, (w_shape, b_shape) in spec.param_shapes().items():
        w_bytes = int(np.prod(w_shape)) * 4
        b_bytes = int(np.prod(b_shape)) * 4
        if offset + w_bytes + b_bytes > len(blob):
            raise CheckpointFormatError(f"{path}: truncated parameters at layer {name!r}")
        w = np.frombuffer(blob, dtype="<f4", count=int(np.prod(w_shape)), offset=offset)
        offset += w_bytes
        b = np.frombuffer(blob, dtype="<f4", count=int(np.prod(b_shape)), offset=offset)
        offset += b_bytes
        params[name] = (w.reshape(w_shape).copy(), b.reshape(b_shape).copy())
    if offset != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return Checkpoint(spec=spec, params=params, meta=meta)
