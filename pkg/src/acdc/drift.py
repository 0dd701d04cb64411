"""Synthetic benchmarks: scaling-hyperplane drift schedules and a
two-domain Gaussian stream with covariate shift."""

from __future__ import annotations

import bisect
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .stream import Domain, Sample


@dataclass
class DriftSchedule:
    """Abrupt concept boundaries over a stream of ``n`` samples.

    ``vectors[0]`` is the identity concept; ``vectors[k]`` for ``k >= 1``
    scales the unit-normalized sample elementwise.
    """

    u: int
    z: int
    n: int
    boundaries: List[int]
    vectors: np.ndarray
    seed: Optional[int] = None

    def concept(self, index: int) -> int:
        if not 0 <= index < self.n:
            raise IndexError(f"sample index {index} outside stream of {self.n}")
        return bisect.bisect_right(self.boundaries, index)

    def to_dict(self) -> dict:
        return {"u": self.u, "z": self.z, "n": self.n,
                "boundaries": list(self.boundaries),
                "vectors": self.vectors.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DriftSchedule":
        return cls(u=d["u"], z=d["z"], n=d["n"], boundaries=list(d["boundaries"]),
                   vectors=np.asarray(d["vectors"], dtype=np.float64), seed=d.get("seed"))


def make_schedule(u: int, z: int, n: int, seed=None) -> DriftSchedule:
    """``z`` equal segments; drift vectors for concepts 2..z are uniform in
    ``[0, 2)^u`` under ``seed``."""
    if z < 1:
        raise ValueError("need at least one concept")
    if n < z:
        raise ValueError("stream shorter than its concept count")
    rng = np.random.default_rng(seed)
    vectors = np.ones((z, u))
    if z > 1:
        vectors[1:] = rng.uniform(0.0, 2.0, size=(z - 1, u))
    boundaries = [k * n // z for k in range(1, z)]
    return DriftSchedule(u=u, z=z, n=n, boundaries=boundaries, vectors=vectors, seed=seed)


def apply_drift(x: np.ndarray, schedule: DriftSchedule, index: int) -> np.ndarray:
    """``d_z * x / ||x||`` inside a drifted concept, ``x`` itself in the first.

    The norm is the L2 norm of the sample before drift; an all-zero sample
    maps to zeros.
    """
    c = schedule.concept(index)
    if c == 0:
        return x
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        return np.zeros_like(x, dtype=np.float64)
    return schedule.vectors[c] * x / norm


def drift_stream(X: np.ndarray, schedule: DriftSchedule) -> np.ndarray:
    if X.shape[0] != schedule.n:
        raise ValueError(f"schedule covers {schedule.n} samples, stream has {X.shape[0]}")
    return np.array([apply_drift(x, schedule, i) for i, x in enumerate(X)])


@dataclass
class SynthSpec:
    """Gaussian classes shared by both domains; the target domain sees the
    same class-conditional data after a rotation and translation.

    Class means have norm ``separation``. The target is translated by
    ``shift`` along a seeded random unit direction and its first two axes
    are turned by ``rotation`` radians. With ``squash`` every coordinate
    finally passes through ``sigmoid(x / squash)`` so features live in
    (0, 1) like the tied decoder's output.
    """

    u: int = 10
    m: int = 3
    n_source: int = 20000
    n_target: int = 8000
    separation: float = 2.0
    noise: float = 1.0
    shift: float = 3.0
    rotation: float = 0.0
    squash: Optional[float] = 1.0
    seed: int = 0
    class_means: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_means"] = None if self.class_means is None else self.class_means.tolist()
        return d


def _class_means(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.class_means is not None:
        return np.asarray(spec.class_means, dtype=np.float64)
    means = rng.standard_normal((spec.m, spec.u))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return spec.separation * means


def domain_transform(spec: SynthSpec, rng: np.random.Generator):
    """The target-domain map ``x -> R x + t`` as ``(R, t)``."""
    R = np.eye(spec.u)
    c, s = np.cos(spec.rotation), np.sin(spec.rotation)
    R[:2, :2] = [[c, -s], [s, c]]
    direction = rng.standard_normal(spec.u)
    return R, spec.shift * direction / np.linalg.norm(direction)


def _balanced_labels(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % m)


def synth_arrays(spec: SynthSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``(X_s, y_s, X_t, y_t)`` for the two domains."""
    rng = np.random.default_rng(spec.seed)
    means = _class_means(spec, rng)
    R, t = domain_transform(spec, rng)
    y_s = _balanced_labels(spec.n_source, spec.m, rng)
    y_t = _balanced_labels(spec.n_target, spec.m, rng)
    X_s = means[y_s] + spec.noise * rng.standard_normal((spec.n_source, spec.u))
    X_t = means[y_t] + spec.noise * rng.standard_normal((spec.n_target, spec.u))
    X_t = X_t @ R.T + t
    if spec.squash:
        X_s = expit(X_s / spec.squash)
        X_t = expit(X_t / spec.squash)
    return X_s, y_s, X_t, y_t


def to_samples(X: np.ndarray, y, domain: Domain) -> List[Sample]:
    labels = [None] * len(X) if y is None else [int(v) for v in y]
    return [Sample(features=X[i], label=labels[i], domain=domain, index=i)
            for i in range(len(X))]


def synth_streams(spec: SynthSpec):
    """Labeled source stream and a target stream whose labels are kept for
    scoring only."""
    X_s, y_s, X_t, y_t = synth_arrays(spec)
    return to_samples(X_s, y_s, Domain.SOURCE), to_samples(X_t, y_t, Domain.TARGET)
