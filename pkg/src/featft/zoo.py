"""Three small heterogeneous classifiers, training, and checkpoint I/O.

Architectures cover three topology classes: a plain conv stack, a residual
block, and a multi-branch (1x1/3x3/5x5) block. All take 3x32x32 input,
emit 10 logits, and end in global average pooling so they also run at
other spatial sizes (used by the gradient-check tests at 16x16).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .engine import (INPUT, ConfigurationError, LayerOp, Model, ModelSpec,
                     forward, grad_weights_of_cross_entropy, infer_shapes)

CHECKPOINT_MAGIC = b"FTW1"
CHECKPOINT_VERSION = 1
_META_NAME_PREFIX = "__model_name__/"
_META_TENSOR = "__meta__"


class TrainingError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    learning_rate: float = 0.03
    batch_size: int = 16
    seed: int = 0


@dataclass
class Checkpoint:
    model_name: str
    weights: dict[str, np.ndarray]
    seed: int = 0
    epochs: int = 0
    accuracy: float = 0.0


class _Builder:
    def __init__(self):
        self.layers: list[LayerOp] = []

    def add(self, **kw) -> int:
        self.layers.append(LayerOp(**kw))
        return len(self.layers) - 1

    def conv_bias_relu(self, src: int, name: str, cin: int, cout: int,
                       kernel: int = 3, pad: int | None = None) -> int:
        if pad is None:
            pad = kernel // 2
        c = self.add(kind="conv2d", inputs=(src,), weight=f"{name}.w",
                     kernel=kernel, pad=pad, out_channels=cout)
        b = self.add(kind="bias_add", inputs=(c,), weight=f"{name}.b")
        return self.add(kind="relu", inputs=(b,))


def _plain() -> ModelSpec:
    b = _Builder()
    x = b.conv_bias_relu(INPUT, "c1", 3, 16)
    x = b.add(kind="avg_pool", inputs=(x,), kernel=2)
    x = b.conv_bias_relu(x, "c2", 16, 24)
    tap = b.conv_bias_relu(x, "c3", 24, 24)
    x = b.add(kind="avg_pool", inputs=(tap,), kernel=2)
    x = b.conv_bias_relu(x, "c4", 24, 32)
    x = b.add(kind="global_avg_pool", inputs=(x,))
    x = b.add(kind="dense", inputs=(x,), weight="fc.w", out_channels=10)
    b.add(kind="bias_add", inputs=(x,), weight="fc.b")
    return ModelSpec("mini_plain", (3, 32, 32), b.layers, 10, tap, input_center=0.30, input_scale=0.40)


def _residual() -> ModelSpec:
    b = _Builder()
    x = b.conv_bias_relu(INPUT, "c1", 3, 16)
    trunk = b.add(kind="max_pool", inputs=(x,), kernel=2)
    x = b.conv_bias_relu(trunk, "r1", 16, 16)
    c = b.add(kind="conv2d", inputs=(x,), weight="r2.w", kernel=3, pad=1,
              out_channels=16)
    c = b.add(kind="bias_add", inputs=(c,), weight="r2.b")
    s = b.add(kind="residual_add", inputs=(c, trunk))
    tap = b.add(kind="relu", inputs=(s,))
    x = b.add(kind="avg_pool", inputs=(tap,), kernel=2)
    x = b.conv_bias_relu(x, "c2", 16, 24)
    x = b.add(kind="global_avg_pool", inputs=(x,))
    x = b.add(kind="dense", inputs=(x,), weight="fc.w", out_channels=10)
    b.add(kind="bias_add", inputs=(x,), weight="fc.b")
    return ModelSpec("mini_residual", (3, 32, 32), b.layers, 10, tap, input_center=0.30, input_scale=0.40)


def _branch() -> ModelSpec:
    b = _Builder()
    x = b.conv_bias_relu(INPUT, "c1", 3, 16)
    stem = b.add(kind="avg_pool", inputs=(x,), kernel=2)
    b1 = b.conv_bias_relu(stem, "b1", 16, 8, kernel=1)
    b3 = b.conv_bias_relu(stem, "b3", 16, 8, kernel=3)
    b5 = b.conv_bias_relu(stem, "b5", 16, 8, kernel=5)
    tap = b.add(kind="branch_concat", inputs=(b1, b3, b5))
    x = b.add(kind="avg_pool", inputs=(tap,), kernel=2)
    x = b.conv_bias_relu(x, "c2", 24, 32)
    x = b.add(kind="global_avg_pool", inputs=(x,))
    x = b.add(kind="dense", inputs=(x,), weight="fc.w", out_channels=10)
    b.add(kind="bias_add", inputs=(x,), weight="fc.b")
    return ModelSpec("mini_branch", (3, 32, 32), b.layers, 10, tap, input_center=0.30, input_scale=0.40)


def build_zoo() -> list[ModelSpec]:
    specs = [_plain(), _residual(), _branch()]
    for s in specs:
        infer_shapes(s)                       # fail fast on wiring bugs
        ratio = s.default_tap / len(s.layers)
        assert 1 / 3 < ratio < 2 / 3, (s.name, ratio)
    return specs


def init_weights(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """He-normal conv/dense init, zero biases; deterministic per (spec, seed)."""
    shapes = infer_shapes(spec)
    weights: dict[str, np.ndarray] = {}
    for i, op in enumerate(spec.layers):
        if op.weight is None or op.weight in weights:
            continue
        rng = np.random.default_rng([seed, i])
        if op.kind == "conv2d":
            src = op.inputs[0]
            cin = spec.input_shape[0] if src == INPUT else shapes[src][0]
            fan_in = cin * op.kernel * op.kernel
            weights[op.weight] = rng.normal(
                0, np.sqrt(2.0 / fan_in),
                (op.out_channels, cin, op.kernel, op.kernel)).astype(np.float32)
        elif op.kind == "dense":
            fan_in = int(np.prod(shapes[op.inputs[0]]))
            weights[op.weight] = rng.normal(
                0, np.sqrt(2.0 / fan_in), (op.out_channels, fan_in)).astype(np.float32)
        elif op.kind == "bias_add":
            n = shapes[i][0] if len(shapes[i]) == 3 else shapes[i][0]
            weights[op.weight] = np.zeros(n, dtype=np.float32)
    return weights


def predict(model: Model, image: np.ndarray) -> int:
    logits, _ = forward(model, image.astype(np.float32, copy=False))
    return int(np.argmax(logits))


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    hits = sum(predict(model, img) == int(y) for img, y in zip(images, labels))
    return hits / max(len(labels), 1)


def train(spec: ModelSpec, dataset: Dataset, cfg: TrainConfig) -> Checkpoint:
    """Plain SGD with momentum 0.9, constant learning rate, fixed seed."""
    xs, ys = dataset.subset("train")
    if xs.size == 0:
        raise TrainingError("dataset has no train split")
    if int(ys.max()) >= spec.class_count:
        raise ConfigurationError("dataset label space exceeds class_count")
    weights = init_weights(spec, cfg.seed)
    model = Model(spec, weights)
    velocity = {k: np.zeros_like(v) for k, v in weights.items()}
    rng = np.random.default_rng([cfg.seed, 0xBEEF])
    n = len(ys)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            grads: dict[str, np.ndarray] = {}
            total = 0.0
            for i in idx:
                loss, g = grad_weights_of_cross_entropy(model, xs[i], int(ys[i]))
                total += loss
                for k, v in g.items():
                    grads[k] = grads.get(k, 0) + v
            if not np.isfinite(total):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            scale = cfg.learning_rate / len(idx)
            for k in weights:
                if k in grads:
                    velocity[k] = 0.9 * velocity[k] - scale * grads[k]
                    weights[k] += velocity[k].astype(np.float32)
    hx, hy = dataset.subset("heldout")
    acc = accuracy(model, hx, hy)
    return Checkpoint(spec.name, weights, seed=cfg.seed, epochs=cfg.epochs,
                      accuracy=acc)


def _meta_tensors(cp: Checkpoint) -> dict[str, np.ndarray]:
    t = dict(cp.weights)
    t[_META_NAME_PREFIX + cp.model_name] = np.zeros(0, dtype=np.float32)
    t[_META_TENSOR] = np.array([cp.seed, cp.epochs, cp.accuracy], dtype=np.float32)
    return t


def checkpoint_bytes(cp: Checkpoint) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    tensors = _meta_tensors(cp)
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f4", copy=False).tobytes())
    return b"".join(out)


def save_checkpoint(cp: Checkpoint, path: str) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(cp))


def checkpoint_digest(cp: Checkpoint) -> str:
    return hashlib.sha256(checkpoint_bytes(cp)).hexdigest()


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated {what} at offset {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4")
        tensors[name] = arr.reshape(dims).copy()
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    model_name = None
    meta = np.zeros(3, dtype=np.float32)
    weights = {}
    for name, arr in tensors.items():
        if name.startswith(_META_NAME_PREFIX):
            model_name = name[len(_META_NAME_PREFIX):]
        elif name == _META_TENSOR:
            meta = arr
        else:
            weights[name] = arr
    if model_name is None:
        raise FormatError(f"{path}: missing model-name record")
    return Checkpoint(model_name, weights, seed=int(meta[0]),
                      epochs=int(meta[1]), accuracy=float(meta[2]))


def load_model(spec: ModelSpec, cp: Checkpoint) -> Model:
    if cp.model_name != spec.name:
        raise ConfigurationError(f"checkpoint is for {cp.model_name}, not {spec.name}")
    need = {op.weight for op in spec.layers if op.weight}
    missing = need - set(cp.weights)
    if missing:
        raise ConfigurationError(f"checkpoint missing weights: {sorted(missing)}")
    return Model(spec, cp.weights)
