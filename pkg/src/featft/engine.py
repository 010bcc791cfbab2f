"""Dense-tensor CNN engine with explicit per-layer backward rules.

Models are static layer lists (a DAG: each layer names the earlier layers
it consumes), so gradients are computed by a fixed reverse schedule instead
of a general tape. Supports gradients with respect to the input image, a
tapped internal feature map, and the weights (for training).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# layer index of the model input pseudo-node
INPUT = -1

FEATURE_MAP_KINDS = frozenset(
    {"conv2d", "bias_add", "relu", "avg_pool", "max_pool",
     "residual_add", "branch_concat"}
)


class ConfigurationError(ValueError):
    """Bad model / tap / shape wiring, detected before any numerics run."""


@dataclass(frozen=True)
class LayerOp:
    kind: str
    inputs: tuple[int, ...] = (INPUT,)
    weight: str | None = None      # weight tensor name (conv2d, dense, bias_add)
    kernel: int = 0                # conv kernel side or pool window side
    stride: int = 1
    pad: int = 0
    out_channels: int = 0          # conv2d / dense output size


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple[int, int, int]       # (C, H, W)
    layers: list[LayerOp]
    class_count: int
    default_tap: int
    input_center: float = 0.0   # fixed normalization: (x - center) / scale
    input_scale: float = 1.0


@dataclass
class Model:
    spec: ModelSpec
    weights: dict[str, np.ndarray]

    @property
    def name(self) -> str:
        return self.spec.name


@dataclass(frozen=True)
class ScalarSpec:
    """A scalar functional of the network output used as a gradient target.

    kind 'cross_entropy': CE of softmax(logits) against `label`
    kind 'logit':         the raw logit at `label`
    kind 'feature_inner': <delta, f_tap(input)> for a fixed delta tensor
    """
    kind: str
    label: int | None = None
    delta: np.ndarray | None = None
    tap: int | None = None


def out_shape(op: LayerOp, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    """Declared output shape of `op` given its input shapes."""
    s = in_shapes[0]
    if op.kind == "conv2d":
        c, h, w = s
        ho = (h + 2 * op.pad - op.kernel) // op.stride + 1
        wo = (w + 2 * op.pad - op.kernel) // op.stride + 1
        if ho <= 0 or wo <= 0:
            raise ConfigurationError(f"conv2d output collapses: {s} k={op.kernel}")
        return (op.out_channels, ho, wo)
    if op.kind in ("bias_add", "relu"):
        return s
    if op.kind in ("avg_pool", "max_pool"):
        c, h, w = s
        if h % op.kernel or w % op.kernel:
            raise ConfigurationError(f"pool window {op.kernel} does not tile {s}")
        return (c, h // op.kernel, w // op.kernel)
    if op.kind == "dense":
        return (op.out_channels,)
    if op.kind == "residual_add":
        if in_shapes[0] != in_shapes[1]:
            raise ConfigurationError(f"residual_add shape mismatch: {in_shapes}")
        return s
    if op.kind == "branch_concat":
        for b in in_shapes[1:]:
            if b[1:] != s[1:]:
                raise ConfigurationError(f"branch_concat spatial mismatch: {in_shapes}")
        return (sum(b[0] for b in in_shapes),) + s[1:]
    if op.kind == "global_avg_pool":
        return (s[0],)
    raise ConfigurationError(f"unknown layer kind {op.kind!r}")


def infer_shapes(spec: ModelSpec,
                 input_shape: tuple[int, int, int] | None = None) -> list[tuple[int, ...]]:
    """Shapes of every layer output; raises ConfigurationError on bad wiring."""
    shapes: list[tuple[int, ...]] = []
    inp = input_shape if input_shape is not None else spec.input_shape
    for i, op in enumerate(spec.layers):
        ins = []
        for j in op.inputs:
            if j >= i or j < INPUT:
                raise ConfigurationError(f"layer {i} consumes invalid input {j}")
            ins.append(inp if j == INPUT else shapes[j])
        shapes.append(out_shape(op, ins))
    if shapes[-1] != (spec.class_count,):
        raise ConfigurationError(
            f"model {spec.name}: head emits {shapes[-1]}, want ({spec.class_count},)")
    return shapes


def feature_layers(spec: ModelSpec) -> list[int]:
    """Layer ids whose output is a 3-D feature map (valid tap points)."""
    shapes = infer_shapes(spec)
    return [i for i, (op, s) in enumerate(zip(spec.layers, shapes))
            if len(s) == 3 and op.kind in FEATURE_MAP_KINDS]


def check_tap(spec: ModelSpec, tap: int) -> None:
    if tap not in feature_layers(spec):
        raise ConfigurationError(f"tap {tap} is not a feature-map layer of {spec.name}")


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (c, k, k, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride))
    return win.reshape(c * k * k, ho * wo), (ho, wo)


def _col2im(gcols: np.ndarray, xshape, k: int, stride: int, pad: int) -> np.ndarray:
    c, h, w = xshape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    g = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    gc = gcols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            g[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gc[:, i, j]
    return g[:, pad:pad + h, pad:pad + w] if pad else g


def _forward_layer(op: LayerOp, xs: list[np.ndarray], w: dict[str, np.ndarray],
                   dtype) -> np.ndarray:
    x = xs[0]
    if op.kind == "conv2d":
        ww = w[op.weight].astype(dtype, copy=False)
        cols, (ho, wo) = _im2col(x, op.kernel, op.stride, op.pad)
        return (ww.reshape(op.out_channels, -1) @ cols).reshape(op.out_channels, ho, wo)
    if op.kind == "bias_add":
        b = w[op.weight].astype(dtype, copy=False)
        return x + (b[:, None, None] if x.ndim == 3 else b)
    if op.kind == "relu":
        return np.maximum(x, 0)
    if op.kind == "avg_pool":
        c, h, wd = x.shape
        s = op.kernel
        return x.reshape(c, h // s, s, wd // s, s).mean(axis=(2, 4))
    if op.kind == "max_pool":
        c, h, wd = x.shape
        s = op.kernel
        win = x.reshape(c, h // s, s, wd // s, s).transpose(0, 1, 3, 2, 4)
        return win.reshape(c, h // s, wd // s, s * s).max(axis=-1)
    if op.kind == "dense":
        ww = w[op.weight].astype(dtype, copy=False)
        return ww @ x.reshape(-1)
    if op.kind == "residual_add":
        return xs[0] + xs[1]
    if op.kind == "branch_concat":
        return np.concatenate(xs, axis=0)
    if op.kind == "global_avg_pool":
        return x.mean(axis=(1, 2))
    raise ConfigurationError(f"unknown layer kind {op.kind!r}")


def _backward_layer(op: LayerOp, xs: list[np.ndarray], gy: np.ndarray,
                    w: dict[str, np.ndarray], dtype,
                    wgrads: dict[str, np.ndarray] | None) -> list[np.ndarray]:
    x = xs[0]
    if op.kind == "conv2d":
        ww = w[op.weight].astype(dtype, copy=False)
        cols, (ho, wo) = _im2col(x, op.kernel, op.stride, op.pad)
        gflat = gy.reshape(op.out_channels, -1)
        if wgrads is not None:
            wgrads[op.weight] = wgrads.get(op.weight, 0) + \
                (gflat @ cols.T).reshape(ww.shape)
        gcols = ww.reshape(op.out_channels, -1).T @ gflat
        return [_col2im(gcols, x.shape, op.kernel, op.stride, op.pad)]
    if op.kind == "bias_add":
        if wgrads is not None:
            gb = gy.sum(axis=(1, 2)) if gy.ndim == 3 else gy
            wgrads[op.weight] = wgrads.get(op.weight, 0) + gb
        return [gy]
    if op.kind == "relu":
        return [gy * (x > 0)]
    if op.kind == "avg_pool":
        s = op.kernel
        g = np.repeat(np.repeat(gy, s, axis=1), s, axis=2) / (s * s)
        return [g.astype(dtype, copy=False)]
    if op.kind == "max_pool":
        c, h, wd = x.shape
        s = op.kernel
        win = x.reshape(c, h // s, s, wd // s, s).transpose(0, 1, 3, 2, 4)
        win = win.reshape(c, h // s, wd // s, s * s)
        # argmax takes the first maximum, which is the row-major-first tie rule
        idx = win.argmax(axis=-1)
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
        g = gwin.reshape(c, h // s, wd // s, s, s).transpose(0, 1, 3, 2, 4)
        return [g.reshape(c, h, wd)]
    if op.kind == "dense":
        ww = w[op.weight].astype(dtype, copy=False)
        if wgrads is not None:
            wgrads[op.weight] = wgrads.get(op.weight, 0) + np.outer(gy, x.reshape(-1))
        return [(ww.T @ gy).reshape(x.shape)]
    if op.kind == "residual_add":
        return [gy, gy]
    if op.kind == "branch_concat":
        splits = np.cumsum([b.shape[0] for b in xs[:-1]])
        return list(np.split(gy, splits, axis=0))
    if op.kind == "global_avg_pool":
        c, h, wd = x.shape
        return [np.broadcast_to(gy[:, None, None] / (h * wd), x.shape).astype(dtype, copy=False).copy()]
    raise ConfigurationError(f"unknown layer kind {op.kind!r}")


def _normalized(model: Model, x: np.ndarray) -> np.ndarray:
    """Apply the model's fixed affine input normalization.

    The map is (x - center) / scale with constant center and scale, so the
    Jacobian is (1/scale) * I; `_input_grad_scale` is the factor that converts
    a gradient with respect to the normalized input back to the raw image.
    """
    spec = model.spec
    if spec.input_center == 0.0 and spec.input_scale == 1.0:
        return x
    if spec.input_scale <= 0:
        raise ConfigurationError(f"input_scale must be positive, got {spec.input_scale}")
    c = np.asarray(spec.input_center, dtype=x.dtype)
    s = np.asarray(spec.input_scale, dtype=x.dtype)
    return (x - c) / s


def _input_grad_scale(model: Model, dtype) -> np.ndarray:
    return np.asarray(1.0 / model.spec.input_scale, dtype=dtype)


def _run(model: Model, x: np.ndarray) -> list[np.ndarray]:
    """Forward pass keeping every intermediate (for a later backward sweep)."""
    values: list[np.ndarray] = []
    for op in model.spec.layers:
        xs = [x if j == INPUT else values[j] for j in op.inputs]
        values.append(_forward_layer(op, xs, model.weights, x.dtype))
    return values


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise FloatingPointError("non-finite values in layer output")


def forward(model: Model, x: np.ndarray, tap: int | None = None):
    """Run the network; returns (logits, feature-at-tap or None)."""
    if x.shape[0] != model.spec.input_shape[0]:
        raise ConfigurationError(
            f"input shape {x.shape} incompatible with {model.spec.input_shape}")
    if tap is not None:
        check_tap(model.spec, tap)
    values = _run(model, _normalized(model, x))
    logits = values[-1]
    feat = values[tap] if tap is not None else None
    _check_finite(logits)
    return logits, feat


def _backward(model: Model, x: np.ndarray, values: list[np.ndarray],
              seeds: dict[int, np.ndarray], stop_at: int | None = None,
              wgrads: dict[str, np.ndarray] | None = None) -> np.ndarray | None:
    """Reverse sweep from seeded layer outputs.

    seeds maps layer id -> upstream gradient of the scalar w.r.t. that output.
    If stop_at is given, returns the accumulated gradient at that layer's
    output (treating it as a leaf); otherwise returns the input gradient.
    """
    dtype = x.dtype
    grads: dict[int, np.ndarray] = {k: v.astype(dtype, copy=False) for k, v in seeds.items()}
    ginput = np.zeros_like(x)
    for i in range(len(model.spec.layers) - 1, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        if stop_at is not None and i == stop_at:
            return g
        op = model.spec.layers[i]
        xs = [x if j == INPUT else values[j] for j in op.inputs]
        gxs = _backward_layer(op, xs, g, model.weights, dtype, wgrads)
        for j, gx in zip(op.inputs, gxs):
            if j == INPUT:
                ginput = ginput + gx
            elif j in grads:
                grads[j] = grads[j] + gx
            else:
                grads[j] = gx
    if stop_at is not None:
        raise ConfigurationError(f"no gradient reached tap layer {stop_at}")
    return ginput


def _scalar_seed(model: Model, values: list[np.ndarray], scalar: ScalarSpec):
    """(scalar value, {layer: seed grad}) for a ScalarSpec."""
    spec = model.spec
    last = len(spec.layers) - 1
    logits = values[-1]
    if scalar.kind == "cross_entropy":
        if not 0 <= scalar.label < spec.class_count:
            raise ConfigurationError(f"label {scalar.label} out of range")
        z = logits - logits.max()
        p = np.exp(z)
        p /= p.sum()
        value = float(np.log(np.exp(z).sum()) - z[scalar.label])
        seed = p.copy()
        seed[scalar.label] -= 1.0
        return value, {last: seed}
    if scalar.kind == "logit":
        if not 0 <= scalar.label < spec.class_count:
            raise ConfigurationError(f"label {scalar.label} out of range")
        seed = np.zeros_like(logits)
        seed[scalar.label] = 1.0
        return float(logits[scalar.label]), {last: seed}
    if scalar.kind == "feature_inner":
        check_tap(spec, scalar.tap)
        feat = values[scalar.tap]
        if scalar.delta.shape != feat.shape:
            raise ConfigurationError(
                f"delta shape {scalar.delta.shape} != feature shape {feat.shape}")
        return float(np.sum(scalar.delta * feat)), {scalar.tap: scalar.delta}
    raise ConfigurationError(f"unknown scalar kind {scalar.kind!r}")


def value_and_grad_input(model: Model, x: np.ndarray, scalar: ScalarSpec):
    """Scalar value and its gradient with respect to the input image."""
    xc = _normalized(model, x)
    values = _run(model, xc)
    value, seeds = _scalar_seed(model, values, scalar)
    g = _backward(model, xc, values, seeds) * _input_grad_scale(model, x.dtype)
    _check_finite(g)
    return value, g


def grad_input_of_scalar(model: Model, x: np.ndarray, scalar: ScalarSpec) -> np.ndarray:
    return value_and_grad_input(model, x, scalar)[1]


def grad_feature_of_logit(model: Model, x: np.ndarray, tap: int, label: int) -> np.ndarray:
    """d(logit[label]) / d(feature at tap), upstream of the tap held fixed."""
    check_tap(model.spec, tap)
    if not 0 <= label < model.spec.class_count:
        raise ConfigurationError(f"label {label} out of range")
    xc = _normalized(model, x)
    values = _run(model, xc)
    seed = np.zeros_like(values[-1])
    seed[label] = 1.0
    g = _backward(model, xc, values, {len(model.spec.layers) - 1: seed}, stop_at=tap)
    _check_finite(g)
    return g


def grad_weights_of_cross_entropy(model: Model, x: np.ndarray, label: int):
    """(loss, weight-gradient dict); the training backward pass."""
    xc = _normalized(model, x)
    values = _run(model, xc)
    value, seeds = _scalar_seed(model, values, ScalarSpec("cross_entropy", label=label))
    wgrads: dict[str, np.ndarray] = {}
    _backward(model, xc, values, seeds, wgrads=wgrads)
    return value, wgrads
