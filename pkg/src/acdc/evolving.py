"""Self-evolving structure primitives.

Running input moments feed a probit approximation of each module's
expected output; the resulting bias/variance sequences are monitored by a
statistical-process-control rule that decides when a hidden layer grows a
node or prunes its weakest one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGMA_FLOOR = 1e-12


class InputMoments:
    """Cumulative elementwise mean, population variance and second raw moment."""

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros(dim)
        self.sq_mean = np.zeros(dim)

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros(self.dim)
        return self._m2 / self.count

    def update(self, x: np.ndarray) -> None:
        if x.shape != (self.dim,):
            raise ValueError(f"moments of dim {self.dim} fed a {x.shape} sample")
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (x - self.mean)
        self.sq_mean += (x * x - self.sq_mean) / self.count

    def copy(self) -> "InputMoments":
        other = InputMoments(self.dim)
        other.count = self.count
        other.mean = self.mean.copy()
        other._m2 = self._m2.copy()
        other.sq_mean = self.sq_mean.copy()
        return other

    def state(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self._m2,
                "sq_mean": self.sq_mean}

    @classmethod
    def from_state(cls, state: dict) -> "InputMoments":
        mean = np.asarray(state["mean"], dtype=np.float64)
        m = cls(mean.shape[0])
        m.count = int(state["count"])
        m.mean = mean.copy()
        m._m2 = np.asarray(state["m2"], dtype=np.float64).copy()
        m.sq_mean = np.asarray(state["sq_mean"], dtype=np.float64).copy()
        return m


def probit_rescale(mean: np.ndarray, variance: np.ndarray) -> np.ndarray:
    """``mean / sqrt(1 + pi*variance/8)``: the input to the first sigmoid."""
    return mean / np.sqrt(1.0 + np.pi * variance / 8.0)


def bias_variance(e_y: np.ndarray, e_y2: np.ndarray, y: np.ndarray):
    """Scalar bias and variance averaged over output dimensions.

    The raw variance estimate ``E[y^2] - E[y]^2`` is floored at zero per
    output because ``E[y^2]`` comes from an approximation and can dip below.
    """
    bias = float(np.mean((e_y - y) ** 2))
    var = float(np.mean(np.maximum(e_y2 - e_y * e_y, 0.0)))
    return bias, var


def spc_thresholds(bias: float, var: float, alpha1: float, alpha2: float):
    """Growing threshold ``beta`` and pruning threshold ``lam = 2 * beta(var)``.

    ``beta = alpha1 * exp(-bias) + alpha2`` spans roughly ``[alpha2, alpha1 +
    alpha2]`` so the grow test sits between one and two standard deviations
    of the running bias.
    """
    beta = alpha1 * math.exp(-bias) + alpha2
    lam = 2.0 * (alpha1 * math.exp(-var) + alpha2)
    return beta, lam


class _Running:
    """Welford mean/std of a scalar sequence plus its min trackers."""

    __slots__ = ("count", "mean", "m2", "mean_min", "std_min")

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.mean_min = math.inf
        self.std_min = math.inf

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.count) if self.count else 0.0

    def update(self, value: float) -> None:
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (value - self.mean)
        self.mean_min = min(self.mean_min, self.mean)
        # One sample has no spread; the std tracker starts at the second.
        if self.count >= 2:
            self.std_min = max(min(self.std_min, self.std), SIGMA_FLOOR)

    def reset_min(self) -> None:
        self.mean_min = self.mean
        if self.count >= 2:
            self.std_min = max(self.std, SIGMA_FLOOR)

    def exceeds(self, factor: float) -> bool:
        if self.count < 2:
            return False
        return self.mean + self.std >= self.mean_min + factor * self.std_min


class SpcStats:
    """Running bias and variance statistics for one evolving module."""

    def __init__(self):
        self.bias = _Running()
        self.var = _Running()

    @property
    def count(self) -> int:
        return self.bias.count

    def update(self, bias: float, var: float) -> None:
        self.bias.update(bias)
        self.var.update(var)

    def evaluate(self, beta: float, lam: float):
        """Check both conditions, re-initialize the min trackers of each one
        that fired, and return ``(grow, prune)``."""
        grow = should_grow(self, beta)
        prune = should_prune(self, lam)
        if grow:
            self.bias.reset_min()
        if prune:
            self.var.reset_min()
        return grow, prune

    def state(self) -> dict:
        return {name: [r.count, r.mean, r.m2, r.mean_min, r.std_min]
                for name, r in (("bias", self.bias), ("var", self.var))}

    @classmethod
    def from_state(cls, state: dict) -> "SpcStats":
        s = cls()
        for name in ("bias", "var"):
            r = getattr(s, name)
            count, r.mean, r.m2, r.mean_min, r.std_min = state[name]
            r.count = int(count)
        return s


def should_grow(stats: SpcStats, beta: float) -> bool:
    if stats.count < 1:
        raise ValueError("SPC statistics are empty")
    return stats.bias.exceeds(beta)


def should_prune(stats: SpcStats, lam: float) -> bool:
    if stats.count < 1:
        raise ValueError("SPC statistics are empty")
    return stats.var.exceeds(lam)


@dataclass
class StructuralEvents:
    """Grow/prune counts per module accumulated over some span of steps."""

    grow_dae: int = 0
    prune_dae: int = 0
    grow_daa: int = 0
    prune_daa: int = 0
    grow_disc: int = 0
    prune_disc: int = 0

    def add(self, module: str, kind: str, n: int = 1) -> None:
        key = f"{kind}_{module}"
        setattr(self, key, getattr(self, key) + n)

    def merge(self, other: "StructuralEvents") -> None:
        for key in self.__dataclass_fields__:
            setattr(self, key, getattr(self, key) + getattr(other, key))

    def total(self) -> int:
        return sum(getattr(self, k) for k in self.__dataclass_fields__)
