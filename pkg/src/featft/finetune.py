"""Feature-space fine-tuning of adversarial examples.

Given an AE from a baseline attack, compute mask-ensemble aggregate
gradients at a tapped middle layer (toward the target class from the AE,
toward the original class from the clean image), combine them, and run a
few sign-ascent steps on the combined feature attribution. Also provides
the untargeted feature-attribution attack used as a reference and an
intermediate-level (fixed feature direction) fine-tuner for comparison.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import engine
from .attacks import AttackConfig, clip_to_budget, sample_di, ti_smooth
from .engine import (ConfigurationError, Model, ScalarSpec, check_tap,
                     forward, grad_feature_of_logit, value_and_grad_input)

MASK_KINDS = ("pixel", "patch")


@dataclass
class FinetuneConfig:
    iters_Nft: int = 10
    beta: float = 0.2             # original-class suppression weight
    step_alpha: float = 2 / 255
    tap: int | None = None        # None -> model's default tap
    mask_kind: str = "pixel"
    ensemble_n: int = 30
    keep_prob: float = 0.7
    patch_size: int = 4           # input-space patch side, in pixels
    di_ti_enabled: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.iters_Nft < 0 or self.beta < 0 or self.ensemble_n < 1:
            raise ConfigurationError("bad finetune parameters")
        if not 0 < self.keep_prob <= 1:
            raise ConfigurationError("keep_prob must be in (0, 1]")
        if self.mask_kind not in MASK_KINDS:
            raise ConfigurationError(f"mask_kind must be one of {MASK_KINDS}")


@dataclass
class AggregateGradient:
    values: np.ndarray
    tap: int
    label: int
    mask_kind: str
    ensemble_n: int
    keep_prob: float
    patch_size: int
    seed: int


def _resolve_tap(model: Model, tap: int | None) -> int:
    t = model.spec.default_tap if tap is None else tap
    check_tap(model.spec, t)
    return t


def sample_mask(shape, mask_kind: str, keep_prob: float, patch_size: int,
                rng: np.random.Generator) -> np.ndarray:
    """Spatial keep-mask on the input image, broadcast over channels.

    pixel: every pixel kept independently; patch: the image is tiled into
    patch_size x patch_size blocks, each kept or dropped as a unit.
    """
    _, h, w = shape
    if mask_kind == "pixel":
        keep = rng.random((h, w)) < keep_prob
    else:
        gh = -(-h // patch_size)
        gw = -(-w // patch_size)
        blocks = rng.random((gh, gw)) < keep_prob
        keep = np.repeat(np.repeat(blocks, patch_size, 0), patch_size, 1)[:h, :w]
    return keep.astype(np.float32)[None]


def aggregate_gradient(model: Model, image: np.ndarray, label: int, tap: int | None,
                       cfg: FinetuneConfig, rng: np.random.Generator) -> AggregateGradient:
    """Feature-importance tensor: per-mask feature gradients of the class
    logit, summed over the mask ensemble and L2-normalized."""
    t = _resolve_tap(model, tap)
    total = None
    # dropped pixels are filled with the model's normalization center, which
    # zeroes them in the network's input domain; a raw zero would instead
    # inject an extreme out-of-range value after normalization
    fill = model.spec.input_center
    for _ in range(cfg.ensemble_n):
        mask = sample_mask(image.shape, cfg.mask_kind, cfg.keep_prob,
                           cfg.patch_size, rng)
        masked = (image * mask + (1.0 - mask) * fill).astype(image.dtype)
        g = grad_feature_of_logit(model, masked, t, label)
        total = g if total is None else total + g
    norm = float(np.linalg.norm(total))
    if norm == 0.0:
        warnings.warn("aggregate gradient vanished over the whole mask ensemble")
        values = total
    else:
        values = total / norm
    return AggregateGradient(values, t, label, cfg.mask_kind, cfg.ensemble_n,
                             cfg.keep_prob, cfg.patch_size, cfg.seed)


def combine_aggregate(delta_t: AggregateGradient, delta_o: AggregateGradient,
                      beta: float) -> np.ndarray:
    if delta_t.tap != delta_o.tap or delta_t.values.shape != delta_o.values.shape:
        raise ConfigurationError("aggregate gradients disagree on tap/shape")
    if beta == 0.0:
        return delta_t.values.copy()
    return delta_t.values - beta * delta_o.values


def _sign_ascent(start: np.ndarray, original: np.ndarray, model: Model,
                 scalar: ScalarSpec, iters: int, step_alpha: float,
                 epsilon: float, maximize: bool = True,
                 di_ti: bool = False, attack_cfg: AttackConfig | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    cur = start.astype(np.float32, copy=True)
    sgn = 1.0 if maximize else -1.0
    for _ in range(iters):
        if di_ti:
            op = sample_di(cur.shape, attack_cfg.di_prob,
                           attack_cfg.di_resize_max, rng)
            _, g = value_and_grad_input(model, op.apply(cur), scalar)
            g = ti_smooth(op.adjoint(g), attack_cfg.ti_kernel_radius)
        else:
            _, g = value_and_grad_input(model, cur, scalar)
        cur = clip_to_budget(cur + step_alpha * sgn * np.sign(g), original, epsilon)
    return cur


def finetune(ae: np.ndarray, original: np.ndarray, y_t: int, y_o: int,
             model: Model, cfg: FinetuneConfig,
             attack_cfg: AttackConfig) -> np.ndarray:
    """Aggregate gradients are computed once (independent mask streams for
    the target and original terms) and held fixed through the loop."""
    t = _resolve_tap(model, cfg.tap)
    rng_t = np.random.default_rng([cfg.seed, 0])
    rng_o = np.random.default_rng([cfg.seed, 1])
    delta_t = aggregate_gradient(model, ae.astype(np.float32), y_t, t, cfg, rng_t)
    delta_o = aggregate_gradient(model, original.astype(np.float32), y_o, t, cfg, rng_o)
    combined = combine_aggregate(delta_t, delta_o, cfg.beta)
    scalar = ScalarSpec("feature_inner", delta=combined, tap=t)
    rng = np.random.default_rng([cfg.seed, 2])
    return _sign_ascent(ae, original, model, scalar, cfg.iters_Nft,
                        cfg.step_alpha, attack_cfg.epsilon, maximize=True,
                        di_ti=cfg.di_ti_enabled, attack_cfg=attack_cfg, rng=rng)


def feature_objective(model: Model, image: np.ndarray, combined: np.ndarray,
                      tap: int) -> float:
    _, feat = forward(model, image.astype(np.float32, copy=False), tap=tap)
    return float(np.sum(combined * feat))


def untargeted_feature_attack(image: np.ndarray, y_o: int, model: Model,
                              cfg: FinetuneConfig,
                              attack_cfg: AttackConfig | None = None) -> np.ndarray:
    """Reference attribution attack: minimize the inner product of the clean
    image's feature importance (toward y_o) with the current features."""
    if attack_cfg is None:
        attack_cfg = AttackConfig()
    t = _resolve_tap(model, cfg.tap)
    rng = np.random.default_rng([cfg.seed, 3])
    delta = aggregate_gradient(model, image.astype(np.float32), y_o, t, cfg, rng)
    scalar = ScalarSpec("feature_inner", delta=delta.values, tap=t)
    rng2 = np.random.default_rng([cfg.seed, 4])
    return _sign_ascent(image, image, model, scalar, attack_cfg.iters_N,
                        attack_cfg.step_alpha, attack_cfg.epsilon,
                        maximize=False, di_ti=cfg.di_ti_enabled,
                        attack_cfg=attack_cfg, rng=rng2)


def targeted_ila_finetune(ae: np.ndarray, original: np.ndarray, model: Model,
                          tap: int | None, iters: int,
                          attack_cfg: AttackConfig) -> np.ndarray:
    """Intermediate-level fine-tuner: ascend the projection of the current
    feature displacement onto the fixed direction f(ae) - f(original)."""
    t = _resolve_tap(model, tap)
    _, f_ae = forward(model, ae.astype(np.float32), tap=t)
    _, f_orig = forward(model, original.astype(np.float32), tap=t)
    direction = f_ae - f_orig
    if not np.any(direction):
        warnings.warn("ila: feature direction is zero, returning input unchanged")
        return ae.astype(np.float32, copy=True)
    # <f(I) - f(orig), d> differs from <f(I), d> by a constant, so the
    # gradient target is the plain inner product with d
    scalar = ScalarSpec("feature_inner", delta=direction, tap=t)
    return _sign_ascent(ae, original, model, scalar, iters,
                        attack_cfg.step_alpha, attack_cfg.epsilon, maximize=True)
