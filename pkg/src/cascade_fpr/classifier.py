"""Patch classifier: architecture, initialisation, training and persistence.

Binary model file layout (all integers little-endian)::

    b"CFPR"                 4 bytes  magic
    version                 u16      currently 1
    descriptor length       u32      byte length of the JSON descriptor
    descriptor              UTF-8 JSON {"arch": ..., "meta": ...}
    parameter count         u64      number of float64 values that follow
    parameters              <f8 * count, per layer in declaration order,
                            each layer's arrays in sorted-name order, C order
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import make_rng
from .tensor import (
    SGD,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2,
    Network,
    ReLU,
    ShapeError,
    softmax,
    softmax_xent_batch,
)

__all__ = [
    "ArchError",
    "TrainingError",
    "ModelFormatError",
    "ArchSpec",
    "Hyper",
    "Model",
    "NODULE_ACCURACY",
    "OVERALL_ACCURACY",
    "init_model",
    "predict",
    "predict_proba",
    "evaluate_accuracy",
    "accuracy_from_probs",
    "train",
    "save_model",
    "load_model",
    "model_to_bytes",
    "model_from_bytes",
]

MAGIC = b"CFPR"
FORMAT_VERSION = 1

NODULE_ACCURACY = "nodule-accuracy"
OVERALL_ACCURACY = "overall-accuracy"
CRITERIA = (NODULE_ACCURACY, OVERALL_ACCURACY)


class ArchError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    """Input dims plus an ordered layer list.

    Layers are ``("conv", channels)``, ``("pool",)`` or ``("dense", units)``.
    Convolutions are 3x3 with same padding; a ReLU follows every conv and
    every dense layer except the last, which must be ``("dense", 2)``.
    """

    input_dims: tuple[int, int, int] = (48, 48, 3)
    layers: tuple[tuple, ...] = (
        ("conv", 16), ("pool",),
        ("conv", 32), ("pool",),
        ("conv", 64), ("pool",),
        ("dense", 128), ("dense", 2),
    )
    kernel_size: int = 3

    @classmethod
    def standard(cls, size: int = 48, channels: Sequence[int] = (16, 32, 64), hidden: int = 128,
                 slabs: int = 3, kernel_size: int = 3) -> "ArchSpec":
        layers: list[tuple] = []
        for c in channels:
            layers += [("conv", int(c)), ("pool",)]
        if hidden:
            layers.append(("dense", int(hidden)))
        layers.append(("dense", 2))
        return cls((size, size, slabs), tuple(layers), kernel_size)

    def validate(self) -> None:
        if not self.layers:
            raise ArchError("architecture has no layers")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ArchError(f"kernel size must be odd, got {self.kernel_size}")
        h, w, c = self.input_dims
        if min(h, w, c) < 1:
            raise ArchError(f"input dims must be positive, got {self.input_dims}")
        seen_dense = False
        for i, layer in enumerate(self.layers):
            kind = layer[0]
            if kind in ("conv", "pool") and seen_dense:
                raise ArchError(f"layer {i}: {kind} after a dense layer")
            if kind == "conv":
                if len(layer) != 2 or int(layer[1]) < 1:
                    raise ArchError(f"layer {i}: conv needs a positive channel count")
            elif kind == "pool":
                if h % 2 or w % 2:
                    raise ArchError(f"layer {i}: pooling needs even spatial dims, got {h}x{w}")
                h, w = h // 2, w // 2
            elif kind == "dense":
                if len(layer) != 2 or int(layer[1]) < 1:
                    raise ArchError(f"layer {i}: dense needs a positive unit count")
                seen_dense = True
            else:
                raise ArchError(f"layer {i}: unknown layer kind {kind!r}")
        if tuple(self.layers[-1]) != ("dense", 2):
            raise ArchError("final layer must be ('dense', 2)")

    def build(self) -> Network:
        self.validate()
        h, w, c = self.input_dims
        out: list = []
        flat = None
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            kind = layer[0]
            if kind == "conv":
                out += [Conv2D(c, int(layer[1]), self.kernel_size), ReLU()]
                c = int(layer[1])
            elif kind == "pool":
                out.append(MaxPool2())
                h, w = h // 2, w // 2
            else:
                if flat is None:
                    out.append(Flatten())
                    flat = h * w * c
                out.append(Dense(flat, int(layer[1])))
                flat = int(layer[1])
                if i != last:
                    out.append(ReLU())
        return Network(out)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.build().parameters())

    def to_dict(self) -> dict:
        return {"input_dims": list(self.input_dims), "layers": [list(l) for l in self.layers],
                "kernel_size": self.kernel_size}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(tuple(d["input_dims"]), tuple(tuple(l) for l in d["layers"]), d.get("kernel_size", 3))


@dataclass(frozen=True)
class Hyper:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    # which epoch wins when several reach the best criterion value
    tie_break: str = "latest"

    def __post_init__(self):
        if self.tie_break not in ("earliest", "latest"):
            raise ValueError(f"tie_break must be 'earliest' or 'latest', got {self.tie_break!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class Model:
    arch: ArchSpec
    network: Network
    meta: dict = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)

    def parameters(self) -> list[np.ndarray]:
        return self.network.parameters()

    def copy_parameters(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def load_parameters(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values):
            p[...] = v


def init_model(arch: ArchSpec, seed: int) -> Model:
    """He-uniform weights (``U(-sqrt(6/fan_in), +sqrt(6/fan_in))``), zero biases."""
    network = arch.build()
    rng = make_rng(seed, "init")
    for layer in network.layers:
        for name in sorted(layer.params):
            if name == "bias":
                continue
            limit = math.sqrt(6.0 / layer.fan_in)
            layer.params[name][...] = rng.uniform(-limit, limit, size=layer.params[name].shape)
    return Model(arch, network, {"seed": int(seed)})


def _check_input(model: Model, patches: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[1:] != tuple(model.arch.input_dims):
        raise ShapeError(f"patches of shape {patches.shape[1:]} do not match model input "
                         f"{tuple(model.arch.input_dims)}")
    return patches


def predict_proba(model: Model, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Nodule probability ``c(x)`` for each patch in an ``(N, H, W, C)`` stack."""
    patches = _check_input(model, patches)
    out = np.empty(len(patches))
    for start in range(0, len(patches), batch_size):
        logits = model.network.forward(patches[start:start + batch_size])
        out[start:start + batch_size] = softmax(logits)[:, 1]
    model.network._taped = False
    for layer in model.network.layers:
        layer._cache = None
    return out


def predict(model: Model, patch: np.ndarray) -> float:
    return float(predict_proba(model, np.asarray(patch)[None])[0])


def accuracy_from_probs(probs: np.ndarray, labels: np.ndarray, kind: str) -> float:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    called = probs >= 0.5
    if kind == NODULE_ACCURACY:
        pos = labels == 1
        if not pos.any():
            raise ValueError("nodule accuracy needs at least one label-1 sample")
        return float(called[pos].mean())
    if kind == OVERALL_ACCURACY:
        if len(labels) == 0:
            raise ValueError("accuracy of an empty set")
        return float((called == (labels == 1)).mean())
    raise ValueError(f"unknown criterion {kind!r}")


def evaluate_accuracy(model: Model, patches: np.ndarray, labels: np.ndarray, kind: str) -> float:
    return accuracy_from_probs(predict_proba(model, patches), labels, kind)


def train(model: Model, patches: np.ndarray, labels: np.ndarray, val_patches: np.ndarray,
          val_labels: np.ndarray, criterion: str, hyper: Hyper, rng: np.random.Generator) -> Model:
    """Minibatch momentum SGD for ``hyper.epochs`` epochs with epoch-best selection.

    After every epoch the criterion is evaluated on the validation patches;
    the parameters of the best epoch (``hyper.tie_break`` decides between
    equal values) are loaded back into ``model`` before returning.
    ``model.log`` receives one row per epoch.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    patches = _check_input(model, patches)
    labels = np.asarray(labels, dtype=np.int64)
    if len(patches) == 0 or len(val_labels) == 0:
        raise TrainingError("training and validation sets must be non-empty")
    if criterion == NODULE_ACCURACY and not np.any(np.asarray(val_labels) == 1):
        raise TrainingError("nodule-accuracy selection needs label-1 validation samples")

    val_patches = np.asarray(val_patches)
    val_labels = np.asarray(val_labels)
    if criterion == NODULE_ACCURACY:
        # only label-1 samples affect nodule accuracy
        keep = val_labels == 1
        val_patches, val_labels = val_patches[keep], val_labels[keep]
    later_wins = hyper.tie_break == "latest"
    opt = SGD(model.parameters(), hyper.learning_rate, hyper.momentum)
    best_value, best_epoch, best_params = -math.inf, 0, None
    log: list[dict] = []
    n = len(patches)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, hyper.batch_size)):
            idx = order[start:start + hyper.batch_size]
            logits = model.network.forward(patches[idx])
            loss, grad = softmax_xent_batch(logits, labels[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.network.backward(grad, input_grad=False)
            opt.step(model.network.gradients())
            total += loss * len(idx)
            seen += len(idx)
        value = evaluate_accuracy(model, val_patches, val_labels, criterion)
        log.append({"epoch": epoch, "mean_loss": total / seen, "criterion": value, "selected": False})
        if value > best_value or (later_wins and value == best_value):
            best_value, best_epoch, best_params = value, epoch, model.copy_parameters()

    if best_params is not None:
        model.load_parameters(best_params)
        log[best_epoch - 1]["selected"] = True
        model.meta.update({"selected_epoch": best_epoch, "criterion": criterion,
                           "criterion_value": best_value})
    model.log = log
    return model


# --------------------------------------------------------------------------
# persistence


def model_to_bytes(model: Model) -> bytes:
    desc = json.dumps({"arch": model.arch.to_dict(), "meta": model.meta}, sort_keys=True).encode("utf-8")
    params = model.parameters()
    count = sum(p.size for p in params)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)
    return MAGIC + struct.pack("<HI", FORMAT_VERSION, len(desc)) + desc + struct.pack("<Q", count) + body


def model_from_bytes(data: bytes) -> Model:
    if len(data) < 10 or data[:4] != MAGIC:
        raise ModelFormatError("bad magic: not a CFPR model file")
    version, desc_len = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    offset = 10 + desc_len
    if len(data) < offset + 8:
        raise ModelFormatError("truncated model header")
    try:
        desc = json.loads(data[10:offset].decode("utf-8"))
        arch = ArchSpec.from_dict(desc["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad architecture descriptor: {exc}") from None
    (count,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if len(data) != offset + 8 * count:
        raise ModelFormatError(f"size mismatch: header declares {offset + 8 * count} bytes, file has {len(data)}")
    model = Model(arch, arch.build(), desc.get("meta", {}))
    if count != sum(p.size for p in model.parameters()):
        raise ModelFormatError("parameter count does not match architecture")
    values = np.frombuffer(data, dtype="<f8", offset=offset)
    pos = 0
    for p in model.parameters():
        p[...] = values[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return model


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
