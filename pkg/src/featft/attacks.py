"""Baseline targeted iterative attacks: TMDI (translation-invariant,
momentum, diverse-inputs sign-gradient) with CE, Logit, and SupHigh losses,
over a single source model or an equal-weight ensemble.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import engine
from .engine import (ConfigurationError, Model, _backward, _input_grad_scale,
                     _normalized, _run)

LOSSES = ("ce", "logit", "suphigh")


@dataclass
class AttackConfig:
    epsilon: float = 16 / 255
    step_alpha: float = 2 / 255
    iters_N: int = 200
    momentum_mu: float = 1.0
    di_prob: float = 0.7
    di_resize_max: float = 1.10   # content canvas enlargement bound
    ti_kernel_radius: int = 3     # 0 disables smoothing
    loss: str = "ce"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.step_alpha <= self.epsilon <= 1:
            raise ConfigurationError("need 0 < step_alpha <= epsilon <= 1")
        if not 0 <= self.di_prob <= 1:
            raise ConfigurationError("di_prob must be in [0, 1]")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"loss must be one of {LOSSES}")


@dataclass
class SupHighParams:
    beta1: float = 1.0      # original-label suppression weight
    beta2: float = 1.0      # high-confidence suppression weight
    n_high: int = 3

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0 or self.n_high < 1:
            raise ConfigurationError("bad SupHigh parameters")


@dataclass
class AttackTask:
    image: np.ndarray
    y_o: int
    y_t: int
    source: Model | list[Model]

    def __post_init__(self):
        if self.y_t == self.y_o:
            raise ConfigurationError("target label equals original label")


def members_of(source) -> list[Model]:
    """Ensemble members in canonical (name-sorted) order, so member
    permutation cannot change any result."""
    ms = [source] if isinstance(source, Model) else list(source)
    return sorted(ms, key=lambda m: m.name)


def clip_to_budget(candidate: np.ndarray, original: np.ndarray,
                   epsilon: float) -> np.ndarray:
    out = np.clip(candidate, original - epsilon, original + epsilon)
    return np.clip(out, 0.0, 1.0)


def ti_kernel(radius: int) -> np.ndarray:
    """Normalized truncated-Gaussian kernel, side 2*radius+1, sigma=r/sqrt(3)."""
    if radius == 0:
        return np.ones((1, 1))
    sigma = radius / np.sqrt(3.0)
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    k1 = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(k1, k1)
    return k / k.sum()


def ti_smooth(gradient: np.ndarray, radius: int) -> np.ndarray:
    if radius < 0:
        raise ConfigurationError("ti radius must be >= 0")
    if radius == 0:
        return gradient
    k = ti_kernel(radius).astype(gradient.dtype)
    out = np.empty_like(gradient)
    for c in range(gradient.shape[0]):
        out[c] = ndimage.convolve(gradient[c], k, mode="constant", cval=0.0)
    return out


def _resize_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Bilinear 1-D interpolation matrix (n_out x n_in)."""
    r = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1:
        r[0, 0] = 1.0
        return r
    for i in range(n_out):
        src = i * (n_in - 1) / (n_out - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        w = src - lo
        r[i, lo] += 1 - w
        r[i, hi] += w
    return r


class DiOp:
    """One sampled diverse-input transform: bilinear shrink of the content
    into a smaller box, zero-padded at a random offset back to full size.
    A linear map, so the gradient flows back through `adjoint`."""

    def __init__(self, ry=None, rx=None, oy=0, ox=0, shape=None):
        self.ry, self.rx, self.oy, self.ox, self.shape = ry, rx, oy, ox, shape

    @property
    def identity(self) -> bool:
        return self.ry is None

    def apply(self, img: np.ndarray) -> np.ndarray:
        if self.identity:
            return img
        small = self.ry @ img @ self.rx.T
        out = np.zeros_like(img)
        s_h, s_w = small.shape[1], small.shape[2]
        out[:, self.oy:self.oy + s_h, self.ox:self.ox + s_w] = small
        return out

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        if self.identity:
            return g
        s_h, s_w = self.ry.shape[0], self.rx.shape[0]
        gs = g[:, self.oy:self.oy + s_h, self.ox:self.ox + s_w]
        return self.ry.T @ gs @ self.rx


def sample_di(shape, di_prob: float, di_resize_max: float,
              rng: np.random.Generator) -> DiOp:
    _, h, w = shape
    if rng.random() >= di_prob:
        return DiOp()
    s_min = max(1, int(np.floor(h / di_resize_max)))
    s = int(rng.integers(s_min, h + 1))
    oy = int(rng.integers(0, h - s + 1))
    ox = int(rng.integers(0, w - s + 1))
    ry = _resize_matrix(s, h, np.float32)
    rx = _resize_matrix(s, w, np.float32)
    return DiOp(ry, rx, oy, ox, shape)


def di_transform(image: np.ndarray, di_prob: float, di_resize_max: float,
                 rng: np.random.Generator) -> np.ndarray:
    return sample_di(image.shape, di_prob, di_resize_max, rng).apply(image)


def _mean_logits(members: list[Model], image: np.ndarray):
    """Mean member logits; each member applies its own input normalization."""
    normed = [_normalized(m, image) for m in members]
    runs = [_run(m, xn) for m, xn in zip(members, normed)]
    logits = sum(r[-1] for r in runs) / len(members)
    return logits, runs, normed


def _grad_of_logit_seed(members, normed, runs, seed: np.ndarray) -> np.ndarray:
    """Gradient of <seed, mean member logits> with respect to the raw image."""
    g = np.zeros_like(normed[0])
    share = seed / len(members)
    for m, xn, values in zip(members, normed, runs):
        gm = _backward(m, xn, values, {len(m.spec.layers) - 1: share})
        g = g + gm * _input_grad_scale(m, xn.dtype)
    return g


def loss_value_and_grad(task: AttackTask, image: np.ndarray, loss: str,
                        suphigh: SupHighParams | None = None):
    """Loss value and the ascent direction that reduces it.

    The returned gradient points where a +alpha*sign step should move the
    image; for an ensemble source it is taken through the arithmetic mean
    of member logits.
    """
    members = members_of(task.source)
    logits, runs, normed = _mean_logits(members, image)
    nc = members[0].spec.class_count
    e_t = np.zeros_like(logits)
    e_t[task.y_t] = 1.0
    if loss == "ce":
        z = logits - logits.max()
        p = np.exp(z)
        p /= p.sum()
        value = float(np.log(np.exp(z).sum()) - z[task.y_t])
        grad = _grad_of_logit_seed(members, normed, runs, e_t - p)
        return value, grad
    if loss == "logit":
        value = float(-logits[task.y_t])
        grad = _grad_of_logit_seed(members, normed, runs, e_t)
        return value, grad
    if loss == "suphigh":
        if suphigh is None:
            raise ConfigurationError("suphigh loss requires SupHighParams")
        if suphigh.n_high >= nc:
            raise ConfigurationError("n_high must be < class_count")
        seed1 = e_t.copy()
        seed1[task.y_o] -= suphigh.beta1
        order = np.argsort(-logits, kind="stable")
        high = [int(i) for i in order if i not in (task.y_t, task.y_o)]
        seed2 = np.zeros_like(logits)
        for i in high[:suphigh.n_high]:
            seed2[i] = 1.0
        g1 = _grad_of_logit_seed(members, normed, runs, seed1)
        g2 = _grad_of_logit_seed(members, normed, runs, seed2)
        value = float(-(logits[task.y_t] - suphigh.beta1 * logits[task.y_o]))
        denom = float(np.sum(g1 * g1))
        if denom == 0.0:
            warnings.warn("suphigh: degenerate primary gradient, "
                          "skipping orthogonalization")
            return value, -suphigh.beta2 * g2
        ortho = g2 - (float(np.sum(g2 * g1)) / denom) * g1
        return value, g1 - suphigh.beta2 * ortho
    raise ConfigurationError(f"unknown loss {loss!r}")


@dataclass
class AttackTrace:
    losses: list[float] = field(default_factory=list)
    zero_grad_steps: list[int] = field(default_factory=list)


def run_baseline_attack(task: AttackTask, cfg: AttackConfig,
                        suphigh: SupHighParams | None = None,
                        rng: np.random.Generator | None = None,
                        trace: AttackTrace | None = None) -> np.ndarray:
    """Momentum sign-gradient iteration under an L-infinity budget.

    Per step: diverse-input transform of the current iterate, loss gradient
    pulled back through the transform, Gaussian kernel smoothing, L1-normalized
    momentum accumulation, then a signed step clipped to the budget.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    original = np.clip(task.image.astype(np.float32, copy=True), 0.0, 1.0)
    adv = original.copy()
    momentum = np.zeros_like(adv)
    for n in range(cfg.iters_N):
        op = sample_di(adv.shape, cfg.di_prob, cfg.di_resize_max, rng)
        value, g_t = loss_value_and_grad(task, op.apply(adv), cfg.loss, suphigh)
        g = op.adjoint(g_t)
        g = ti_smooth(g, cfg.ti_kernel_radius)
        l1 = float(np.abs(g).sum())
        if l1 == 0.0:
            if trace is not None:
                trace.zero_grad_steps.append(n)
        else:
            g = g / l1
        momentum = cfg.momentum_mu * momentum + g
        adv = clip_to_budget(adv + cfg.step_alpha * np.sign(momentum),
                             original, cfg.epsilon)
        if trace is not None:
            trace.losses.append(value)
    return adv
