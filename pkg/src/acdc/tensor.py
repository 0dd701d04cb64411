"""Dense numerics shared by every module: affine maps, activations, losses
with analytic gradients, Glorot initialization and SGD with momentum.

Parameters are plain ``dict[str, np.ndarray]`` maps of float64 arrays.
Matrices are stored ``(out, in)`` so an affine map is ``W @ x + b``.
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np
from scipy.special import expit

Params = Dict[str, np.ndarray]

PROB_EPS = 1e-12

LOSS_KINDS = ("mse", "binary-log", "multiclass-log")


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class NumericGuardError(FloatingPointError):
    """Raised when a probability is not a finite value in [0, 1]."""


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if W.ndim != 2 or x.shape != (W.shape[1],) or b.shape != (W.shape[0],):
        raise ShapeError(
            f"affine: W{W.shape} x{x.shape} b{b.shape} do not line up"
        )
    return W @ x + b


def sigmoid(z):
    return expit(z)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _safe_log(p: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise NumericGuardError(f"probabilities outside [0, 1]: {p}")
    return np.log(np.maximum(p, PROB_EPS))


def losses(kind: str, pred: np.ndarray, target: np.ndarray):
    """Loss value and its gradient with respect to the output pre-activation.

    ``pred`` is the head's activated output: a sigmoid for ``mse`` and
    ``binary-log``, a softmax for ``multiclass-log``.

    * ``mse``: mean over dimensions of ``(pred - target)**2``.
    * ``binary-log``: summed binary cross-entropy.
    * ``multiclass-log``: ``-sum(target * log(pred))``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred{pred.shape} vs target{target.shape}")
    if kind == "mse":
        diff = pred - target
        loss = float(np.mean(diff * diff))
        grad = (2.0 / diff.size) * diff * pred * (1.0 - pred)
        return loss, grad
    if kind == "binary-log":
        loss = float(-np.sum(target * _safe_log(pred)
                             + (1.0 - target) * _safe_log(1.0 - pred)))
        return loss, pred - target
    if kind == "multiclass-log":
        loss = float(-np.sum(target * _safe_log(pred)))
        return loss, pred - target
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_sample(fan_in: int, fan_out: int, rng: np.random.Generator, shape=None):
    """Glorot-uniform draw; ``shape`` defaults to ``(fan_out, fan_in)``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    if shape is None:
        shape = (fan_out, fan_in)
    bound = xavier_bound(fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape)


class MomentumState:
    """Velocity buffers mirroring a parameter dict, zero-initialized."""

    def __init__(self, params: Params):
        self.velocity: Params = {k: np.zeros_like(v) for k, v in params.items()}

    def check(self, params: Params) -> None:
        if self.velocity.keys() != params.keys():
            raise ShapeError("momentum keys do not mirror parameters")
        for k, p in params.items():
            if self.velocity[k].shape != p.shape:
                raise ShapeError(f"momentum buffer {k}: {self.velocity[k].shape} vs {p.shape}")


def sgd_momentum_step(params: Params, grads: Params, state: MomentumState,
                      lr: float, momentum: float) -> None:
    """In-place ``v <- momentum*v - lr*g; p <- p + v`` for the keys in ``grads``.

    Parameters without a gradient keep both value and velocity.
    """
    for k, g in grads.items():
        p = params[k]
        v = state.velocity[k]
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{k}: param{p.shape} grad{g.shape} velocity{v.shape}")
        v *= momentum
        v -= lr * g
        p += v


def finite_diff_grad(f: Callable[[Params], float], params: Params,
                     eps: float = 1e-6) -> Params:
    """Central-difference gradient of ``f`` over every entry of ``params``.

    Perturbs ``params`` in place and restores each entry afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out: Params = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params)
            flat[i] = orig - eps
            fm = f(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[k] = g
    return out


def relative_error(a: Params, b: Params) -> float:
    """Norm-wise relative error between two gradient dicts over shared keys."""
    keys = sorted(a.keys() & b.keys())
    va = np.concatenate([a[k].ravel() for k in keys])
    vb = np.concatenate([b[k].ravel() for k in keys])
    denom = max(np.linalg.norm(va), np.linalg.norm(vb), 1e-12)
    return float(np.linalg.norm(va - vb) / denom)
