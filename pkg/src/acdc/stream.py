"""Prequential test-then-train loop over two streams with different rates.

Samples are interleaved in proportion to what each stream still has to
deliver, collected into windows, scored before any training, then paired
(the smaller side is cycled through seeded permutations) and learned.
"""

from __future__ import annotations

import enum
import itertools
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .evolving import StructuralEvents
from .net import (
    AcdcModel,
    adapt_step,
    empirical_h_divergence,
    learn_step,
    param_hash,
    predict_many,
)


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class StreamExhausted(Exception):
    """Both streams have delivered everything they declared."""


class RunError(RuntimeError):
    """A model failure inside the loop, tagged with the window it hit."""

    def __init__(self, window: int, cause: BaseException):
        super().__init__(f"window {window}: {type(cause).__name__}: {cause}")
        self.window = window


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: Optional[int]
    domain: Domain
    index: int

    def __post_init__(self):
        if self.domain is Domain.SOURCE and self.label is None:
            raise ValueError(f"source sample {self.index} has no label")


@dataclass
class WindowPair:
    w_s: List[Sample]
    w_t: List[Sample]
    pairs: List[Tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.w_s) + len(self.w_t)


@dataclass
class ThroughputState:
    n_s: int
    n_t: int
    received_s: int = 0
    received_t: int = 0

    def __post_init__(self):
        if self.n_s < 0 or self.n_t < 0:
            raise ValueError("stream sizes must be non-negative")

    @property
    def remaining(self) -> int:
        return self.n_s + self.n_t - self.received_s - self.received_t

    def source_probability(self) -> float:
        left = self.remaining
        if left <= 0:
            raise StreamExhausted("both streams exhausted")
        return (self.n_s - self.received_s) / left


def next_sample_domain(state: ThroughputState, rng: np.random.Generator) -> Domain:
    """Draw which stream delivers next and count it as received.

    The source probability is the source's share of everything still
    outstanding, so an exhausted stream is never drawn. Exactly one uniform
    is consumed per call, forced or not, which keeps the generator in step
    across runs.
    """
    p = state.source_probability()
    if rng.random() < p:
        state.received_s += 1
        return Domain.SOURCE
    state.received_t += 1
    return Domain.TARGET


def fill_window(streams: Tuple[Iterator[Sample], Iterator[Sample]],
                state: ThroughputState, n_m: int,
                rng: np.random.Generator) -> WindowPair:
    """Read up to ``n_m`` samples in interleaved order, split by domain.

    The last window of a run may be short. Raises :class:`StreamExhausted`
    when nothing is left.
    """
    if n_m < 1:
        raise ValueError("window size must be positive")
    if state.remaining <= 0:
        raise StreamExhausted("both streams exhausted")
    src, tgt = streams
    w_s: List[Sample] = []
    w_t: List[Sample] = []
    for _ in range(min(n_m, state.remaining)):
        dom = next_sample_domain(state, rng)
        it, out, seen = ((src, w_s, state.received_s) if dom is Domain.SOURCE
                         else (tgt, w_t, state.received_t))
        try:
            out.append(next(it))
        except StopIteration:
            raise ValueError(f"{dom.value} stream ended after {seen - 1} samples, "
                             f"fewer than declared") from None
    return WindowPair(w_s, w_t)


def permutation_cycle(n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """``length`` indices into ``range(n)`` built from whole permutations."""
    reps = -(-length // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:length]


def pair_permute(w: WindowPair, rng: np.random.Generator) -> WindowPair:
    """Pair every sample of the larger side, in arrival order, with the
    smaller side cycled through independent permutations of itself.

    On equal sizes the source keeps its order and the target is permuted.
    """
    a, b = len(w.w_s), len(w.w_t)
    if a == 0 or b == 0:
        raise ValueError("pairing needs both sides nonempty")
    if a >= b:
        t_idx = permutation_cycle(b, a, rng)
        pairs = [(i, int(j)) for i, j in enumerate(t_idx)]
    else:
        s_idx = permutation_cycle(a, b, rng)
        pairs = [(int(i), j) for j, i in enumerate(s_idx)]
    return WindowPair(w.w_s, w.w_t, pairs)


@dataclass
class WindowMetrics:
    """One row of the metrics trace. NaN marks a quantity the window could
    not produce (no target samples, no labels, nothing trained)."""

    window: int
    n_source: int
    n_target: int
    target_acc: float
    target_acc_cum: float
    source_acc: float
    loss_dae: float
    loss_daa: float
    loss_disc: float
    r_dae: int
    r_daa: int
    r_disc: int
    grow_dae: int
    prune_dae: int
    grow_daa: int
    prune_daa: int
    grow_disc: int
    prune_disc: int
    h_divergence: float
    wall_ms: float
    hash_before: str = ""
    hash_after: str = ""

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]


@dataclass
class MetricsTrace:
    rows: List[WindowMetrics] = field(default_factory=list)

    def append(self, row: WindowMetrics) -> None:
        if self.rows and row.window <= self.rows[-1].window:
            raise ValueError("metrics rows must have increasing window index")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class StreamConfig:
    window: int = 1000
    epochs: int = 1
    seed: Optional[int] = 0

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window size must be at least 2")
        if self.epochs < 1:
            raise ValueError("need at least one internal epoch")


@dataclass
class RunState:
    """Everything outside the model that a resumed run needs."""

    throughput: ThroughputState
    rng: np.random.Generator
    window: int = 0
    correct_t: int = 0
    scored_t: int = 0

    @classmethod
    def fresh(cls, n_s: int, n_t: int, seed=None) -> "RunState":
        return cls(ThroughputState(n_s, n_t), np.random.default_rng(seed))


def _stack(samples: Sequence[Sample], u: int) -> np.ndarray:
    if not samples:
        return np.empty((0, u))
    return np.stack([s.features for s in samples]).astype(np.float64, copy=False)


def _accuracy(model: AcdcModel, samples: Sequence[Sample]):
    """``(correct, scored)`` over the samples that carry a label."""
    labeled = [s for s in samples if s.label is not None]
    if not labeled:
        return 0, 0
    pred, _ = predict_many(model, _stack(labeled, model.u))
    truth = np.array([s.label for s in labeled])
    return int(np.sum(pred == truth)), len(labeled)


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def _train(model: AcdcModel, w: WindowPair, epochs: int, rng: np.random.Generator):
    """Internal epochs over one window; returns mean losses and events."""
    u, m = model.u, model.m
    X_s = _stack(w.w_s, u)
    Y_s = np.eye(m)[[s.label for s in w.w_s]]
    if w.w_t:
        X_t = _stack(w.w_t, u)
        pairs = pair_permute(w, rng).pairs
    else:
        X_t = None
        pairs = [(i, -1) for i in range(len(w.w_s))]
    events = StructuralEvents()
    totals = np.zeros(3)
    for epoch in range(epochs):
        for i, j in pairs:
            x_t = None if X_t is None else X_t[j]
            if epoch == 0:
                events.merge(adapt_step(model, X_s[i], Y_s[i], x_t))
            totals += learn_step(model, X_s[i], Y_s[i], x_t)
    return totals / (epochs * len(pairs)), events


def run_window(model: AcdcModel, w: WindowPair, state: RunState,
               config: StreamConfig) -> WindowMetrics:
    """Score the window, then train on it."""
    t0 = time.perf_counter()
    hash_before = param_hash(model)
    c_t, n_t = _accuracy(model, w.w_t)
    c_s, n_s = _accuracy(model, w.w_s)
    state.correct_t += c_t
    state.scored_t += n_t
    h_div = math.nan
    if w.w_s and w.w_t and model.flags.daa_enabled:
        h_div = empirical_h_divergence(model, _stack(w.w_s, model.u),
                                       _stack(w.w_t, model.u))

    losses = np.full(3, math.nan)
    events = StructuralEvents()
    if w.w_s:
        losses, events = _train(model, w, config.epochs, state.rng)
        if not (w.w_t and model.flags.daa_enabled):
            losses[1] = math.nan

    r_dae, r_daa, r_disc = model.widths
    return WindowMetrics(
        window=state.window, n_source=len(w.w_s), n_target=len(w.w_t),
        target_acc=_ratio(c_t, n_t),
        target_acc_cum=_ratio(state.correct_t, state.scored_t),
        source_acc=_ratio(c_s, n_s),
        loss_dae=float(losses[0]), loss_daa=float(losses[1]), loss_disc=float(losses[2]),
        r_dae=r_dae, r_daa=r_daa, r_disc=r_disc,
        grow_dae=events.grow_dae, prune_dae=events.prune_dae,
        grow_daa=events.grow_daa, prune_daa=events.prune_daa,
        grow_disc=events.grow_disc, prune_disc=events.prune_disc,
        h_divergence=h_div,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
        hash_before=hash_before, hash_after=param_hash(model),
    )


def _sized(stream) -> Tuple[Iterable, int]:
    if not hasattr(stream, "__len__"):
        raise TypeError("streams must be sized; pass totals explicitly")
    return stream, len(stream)


def prequential_run(model: AcdcModel, streams, config: StreamConfig,
                    state: Optional[RunState] = None,
                    totals: Optional[Tuple[int, int]] = None,
                    max_windows: Optional[int] = None,
                    on_window: Optional[Callable[[AcdcModel, RunState, WindowMetrics], None]] = None,
                    ) -> MetricsTrace:
    """Run the test-then-train protocol until both streams are consumed.

    ``streams`` is a ``(source, target)`` pair of iterables that start at
    the beginning of their streams. Without ``totals`` both must be sized.
    Passing a ``state`` from an earlier call resumes it: the samples that
    state already consumed are skipped. ``max_windows`` stops after that
    many windows in this call; ``on_window`` sees the model and state after
    every window (checkpointing hooks in here).
    """
    src, tgt = streams
    if totals is None:
        src, n_s = _sized(src)
        tgt, n_t = _sized(tgt)
    else:
        n_s, n_t = totals
    if state is None:
        state = RunState.fresh(n_s, n_t, config.seed)
    elif (state.throughput.n_s, state.throughput.n_t) != (n_s, n_t):
        raise ValueError("run state was built for streams of different size")

    it_s = itertools.islice(iter(src), state.throughput.received_s, None)
    it_t = itertools.islice(iter(tgt), state.throughput.received_t, None)
    trace = MetricsTrace()
    done = 0
    while max_windows is None or done < max_windows:
        try:
            w = fill_window((it_s, it_t), state.throughput, config.window, state.rng)
        except StreamExhausted:
            break
        try:
            row = run_window(model, w, state, config)
        except (ArithmeticError, ValueError, FloatingPointError) as exc:
            raise RunError(state.window, exc) from exc
        trace.append(row)
        state.window += 1
        done += 1
        if on_window is not None:
            on_window(model, state, row)
    return trace
