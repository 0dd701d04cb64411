"""The three-headed adaptation model.

A tied-weight denoising autoencoder (DAE) provides the shared latent
space. A domain classifier (DAA) sits behind a gradient-reversal boundary
at the encoder, and a discriminator (DISC) learns source labels and
predicts the target stream. Each head's last hidden layer grows and prunes
under the SPC rule in :mod:`acdc.evolving`.

Parameter names::

    W_dae (R_dae, u)   b_a (R_dae)   b_b (u)          encoder / tied decoder
    W_daa1 (R_daa, R_dae)  b_c   W_daa2 (1, R_daa)  b_d
    W_disc1 (R_disc, R_dae) b_e  W_disc2 (m, R_disc) b_f
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .evolving import (
    InputMoments,
    SpcStats,
    StructuralEvents,
    bias_variance,
    probit_rescale,
    spc_thresholds,
)
from .tensor import PROB_EPS, MomentumState, Params, sgd_momentum_step, sigmoid, xavier_sample

MODULES = ("dae", "daa", "disc")

DAE_KEYS = ("W_dae", "b_a", "b_b")
ENCODER_KEYS = ("W_dae", "b_a")
DAA_KEYS = ("W_daa1", "b_c", "W_daa2", "b_d")
DISC_KEYS = ("W_disc1", "b_e", "W_disc2", "b_f")
PARAM_KEYS = DAE_KEYS + DAA_KEYS + DISC_KEYS

# (incoming weights, incoming bias, downstream matrices) of each evolving layer.
LAYERS = {
    "dae": ("W_dae", "b_a", ("W_daa1", "W_disc1")),
    "daa": ("W_daa1", "b_c", ("W_daa2",)),
    "disc": ("W_disc1", "b_e", ("W_disc2",)),
}


@dataclass
class AblationFlags:
    daa_enabled: bool = True
    evolution_enabled: bool = True
    dae_starts_single_node: bool = False
    daa_signals_disc: bool = True


@dataclass
class Hyper:
    lr: float = 0.01
    momentum: float = 0.95
    alpha1: float = 1.25
    alpha2: float = 0.75
    noise: float = 0.10
    reversal: float = 1.0
    # Hidden width of every module when evolution is switched off.
    fixed_width: int = 100


@dataclass
class AcdcModel:
    u: int
    m: int
    params: Params
    momentum: MomentumState
    flags: AblationFlags = field(default_factory=AblationFlags)
    hyper: Hyper = field(default_factory=Hyper)
    moments: Dict[str, InputMoments] = field(default_factory=dict)
    spc: Dict[str, SpcStats] = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    # When a list, every SPC evaluation appends a record to it.
    spc_log: Optional[list] = None

    @property
    def widths(self):
        p = self.params
        return p["W_dae"].shape[0], p["W_daa1"].shape[0], p["W_disc1"].shape[0]

    def width(self, module: str) -> int:
        return self.params[LAYERS[module][0]].shape[0]

    def check_shapes(self) -> None:
        p = self.params
        r_dae, r_daa, r_disc = self.widths
        expected = {
            "W_dae": (r_dae, self.u), "b_a": (r_dae,), "b_b": (self.u,),
            "W_daa1": (r_daa, r_dae), "b_c": (r_daa,),
            "W_daa2": (1, r_daa), "b_d": (1,),
            "W_disc1": (r_disc, r_dae), "b_e": (r_disc,),
            "W_disc2": (self.m, r_disc), "b_f": (self.m,),
        }
        for k, shape in expected.items():
            if p[k].shape != shape:
                raise ValueError(f"{k} has shape {p[k].shape}, expected {shape}")
        self.momentum.check(p)


def init_model(u: int, m: int, flags: Optional[AblationFlags] = None,
               hyper: Optional[Hyper] = None, seed=None) -> AcdcModel:
    """Fresh model: Glorot weights, zero biases, zero momentum.

    The DAE starts with ``ceil(u/2)`` hidden nodes (one under ablation C)
    and the DAA and DISC with one each; with evolution off every module
    starts at ``hyper.fixed_width``.
    """
    if u < 2 or m < 2:
        raise ValueError("need u >= 2 features and m >= 2 classes")
    flags = flags or AblationFlags()
    hyper = hyper or Hyper()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    if flags.evolution_enabled:
        r_dae, r_daa, r_disc = math.ceil(u / 2), 1, 1
    else:
        r_dae = r_daa = r_disc = hyper.fixed_width
    if flags.dae_starts_single_node:
        r_dae = 1

    params = {
        "W_dae": xavier_sample(u, r_dae, rng),
        "b_a": np.zeros(r_dae),
        "b_b": np.zeros(u),
        "W_daa1": xavier_sample(r_dae, r_daa, rng),
        "b_c": np.zeros(r_daa),
        "W_daa2": xavier_sample(r_daa, 1, rng),
        "b_d": np.zeros(1),
        "W_disc1": xavier_sample(r_dae, r_disc, rng),
        "b_e": np.zeros(r_disc),
        "W_disc2": xavier_sample(r_disc, m, rng),
        "b_f": np.zeros(m),
    }
    return AcdcModel(
        u=u, m=m, params=params, momentum=MomentumState(params),
        flags=flags, hyper=hyper,
        moments={k: InputMoments(u) for k in MODULES},
        spc={k: SpcStats() for k in MODULES},
        rng=rng,
    )


# --------------------------------------------------------------------------
# forward passes; X is a (n, u) batch of row samples


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _by_row(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``X @ W.T`` one output column at a time, so an output never depends
    on how many rows ``W`` has."""
    out = np.empty((X.shape[0], W.shape[0]))
    for i, w in enumerate(W):
        out[:, i] = X @ w
    return out


def _by_term(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``X @ W.T`` accumulated term by term in index order, so inserting or
    deleting a term whose weights are zero leaves every output unchanged."""
    out = X[:, 0:1] * W[:, 0]
    for j in range(1, X.shape[1]):
        out = out + X[:, j:j + 1] * W[:, j]
    return out


# Inference passes below use the fixed-order products above: BLAS kernels
# pick their summation order by matrix shape, which would make a grown or
# pruned zero-weight node perturb outputs in the last bit.

def encode(params: Params, x) -> np.ndarray:
    X = _rows(x)
    H = sigmoid(_by_row(X, params["W_dae"]) + params["b_a"])
    return H[0] if np.ndim(x) == 1 else H


def decode(params: Params, h) -> np.ndarray:
    H = _rows(h)
    Xh = sigmoid(_by_term(H, params["W_dae"].T) + params["b_b"])
    return Xh[0] if np.ndim(h) == 1 else Xh


def _softmax_rows(Z: np.ndarray) -> np.ndarray:
    E = np.exp(Z - Z.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def daa_head(params: Params, H: np.ndarray):
    A = sigmoid(_by_term(H, params["W_daa1"]) + params["b_c"])
    D = sigmoid(_by_term(A, params["W_daa2"]) + params["b_d"])
    return A, D


def disc_head(params: Params, H: np.ndarray):
    A = sigmoid(_by_term(H, params["W_disc1"]) + params["b_e"])
    P = _softmax_rows(_by_term(A, params["W_disc2"]) + params["b_f"])
    return A, P


# --------------------------------------------------------------------------
# losses with analytic gradients (pure functions of params)


def dae_loss_grads(params: Params, inputs, targets):
    """Summed per-row reconstruction MSE of ``inputs -> targets`` and its
    gradient over ``W_dae`` (both tied paths), ``b_a`` and ``b_b``."""
    X, T = _rows(inputs), _rows(targets)
    W = params["W_dae"]
    H = sigmoid(X @ W.T + params["b_a"])
    Xh = sigmoid(H @ W + params["b_b"])
    diff = Xh - T
    u = X.shape[1]
    loss = float(np.sum(diff * diff) / u)
    D2 = (2.0 / u) * diff * Xh * (1.0 - Xh)
    D1 = (D2 @ W.T) * H * (1.0 - H)
    grads = {
        "W_dae": H.T @ D2 + D1.T @ X,
        "b_a": D1.sum(axis=0),
        "b_b": D2.sum(axis=0),
    }
    return loss, grads


def daa_loss_grads(params: Params, x_s, x_t, reversal: Optional[float] = None):
    """Binary log loss for ``x_s -> 0`` plus ``x_t -> 1``.

    With ``reversal=None`` the returned gradient is the true gradient of
    the loss. Otherwise the encoder entries pass through the reversal
    boundary and are scaled by ``-reversal``.
    """
    X = np.vstack([_rows(x_s), _rows(x_t)])
    y = np.zeros((X.shape[0], 1))
    y[_rows(x_s).shape[0]:] = 1.0
    H = sigmoid(X @ params["W_dae"].T + params["b_a"])
    A, D = daa_head(params, H)
    loss = float(-np.sum(y * np.log(np.maximum(D, PROB_EPS))
                         + (1.0 - y) * np.log(np.maximum(1.0 - D, PROB_EPS))))
    G2 = D - y
    G1 = (G2 @ params["W_daa2"]) * A * (1.0 - A)
    GH = (G1 @ params["W_daa1"]) * H * (1.0 - H)
    scale = 1.0 if reversal is None else -reversal
    grads = {
        "W_daa1": G1.T @ H, "b_c": G1.sum(axis=0),
        "W_daa2": G2.T @ A, "b_d": G2.sum(axis=0),
        "W_dae": scale * (GH.T @ X), "b_a": scale * GH.sum(axis=0),
    }
    return loss, grads


def disc_loss_grads(params: Params, x_s, y_s):
    """Multiclass log loss of the softmax head on one-hot ``y_s``; the
    gradient reaches the shared encoder."""
    X, Y = _rows(x_s), _rows(y_s)
    H = sigmoid(X @ params["W_dae"].T + params["b_a"])
    A, P = disc_head(params, H)
    loss = float(-np.sum(Y * np.log(np.maximum(P, PROB_EPS))))
    G2 = P - Y
    G1 = (G2 @ params["W_disc2"]) * A * (1.0 - A)
    GH = (G1 @ params["W_disc1"]) * H * (1.0 - H)
    grads = {
        "W_disc1": G1.T @ H, "b_e": G1.sum(axis=0),
        "W_disc2": G2.T @ A, "b_f": G2.sum(axis=0),
        "W_dae": GH.T @ X, "b_a": GH.sum(axis=0),
    }
    return loss, grads


# --------------------------------------------------------------------------
# learning


def _step(model: AcdcModel, grads: Params) -> None:
    sgd_momentum_step(model.params, grads, model.momentum,
                      model.hyper.lr, model.hyper.momentum)


def mask_noise(x: np.ndarray, frac: float, rng: np.random.Generator) -> np.ndarray:
    """Copy of ``x`` with ``round(frac * u)`` uniformly chosen entries zeroed."""
    if not 0.0 <= frac < 1.0:
        raise ValueError("masking fraction must lie in [0, 1)")
    out = np.array(x, dtype=np.float64, copy=True)
    k = int(math.floor(frac * out.size + 0.5))
    if k:
        out[rng.choice(out.size, size=k, replace=False)] = 0.0
    return out


def greedy_pretrain_step(model: AcdcModel, x: np.ndarray) -> float:
    """One clean ``x -> x`` reconstruction step on the DAE parameters."""
    loss, grads = dae_loss_grads(model.params, x, x)
    _step(model, grads)
    return loss


def dae_learn(model: AcdcModel, x_s, x_t=None) -> float:
    """Clean pre-training on each input, then one noisy cross-reconstruction
    step ``x_s -> x_t`` and ``x_t -> x_s``. Returns the noisy-step loss.

    Without a target sample the DAE reconstructs the source onto itself.
    """
    greedy_pretrain_step(model, x_s)
    if x_t is None:
        inputs = mask_noise(x_s, model.hyper.noise, model.rng)
        targets = x_s
    else:
        greedy_pretrain_step(model, x_t)
        inputs = np.vstack([mask_noise(x_s, model.hyper.noise, model.rng),
                            mask_noise(x_t, model.hyper.noise, model.rng)])
        targets = np.vstack([x_t, x_s])
    loss, grads = dae_loss_grads(model.params, inputs, targets)
    _step(model, grads)
    return loss


def daa_learn(model: AcdcModel, x_s, x_t) -> float:
    if not model.flags.daa_enabled or x_t is None:
        return 0.0
    loss, grads = daa_loss_grads(model.params, x_s, x_t, reversal=model.hyper.reversal)
    _step(model, grads)
    return loss


def disc_learn(model: AcdcModel, x_s, y_s) -> float:
    loss, grads = disc_loss_grads(model.params, x_s, y_s)
    _step(model, grads)
    return loss


def learn_step(model: AcdcModel, x_s, y_s, x_t=None):
    """DAE, DAA and DISC updates in that order; returns the three losses."""
    return (dae_learn(model, x_s, x_t),
            daa_learn(model, x_s, x_t),
            disc_learn(model, x_s, y_s))


# --------------------------------------------------------------------------
# expected outputs and structural adaptation


def _module_forward(params: Params, module: str, s: np.ndarray):
    """Deterministic pass from an already-rescaled input; returns the
    evolving layer's activations and the module output."""
    H = encode(params, s[None, :])
    if module == "dae":
        return H[0], decode(params, H)[0]
    if module == "daa":
        A, D = daa_head(params, H)
    elif module == "disc":
        A, D = disc_head(params, H)
    else:
        raise ValueError(f"unknown module {module!r}")
    return A[0], D[0]


def expected_output(model: AcdcModel, module: str,
                    moments: Optional[InputMoments] = None):
    """Probit approximations of ``E[y]`` and ``E[y^2]`` for one module.

    ``E[y]`` rescales the running input mean inside the first sigmoid and
    propagates deterministically; ``E[y^2]`` does the same with the second
    raw moment in place of the mean.
    """
    mom = moments if moments is not None else model.moments[module]
    if mom.count < 1:
        raise ValueError("expected_output needs at least one observed sample")
    var = mom.variance
    _, e_y = _module_forward(model.params, module, probit_rescale(mom.mean, var))
    _, e_y2 = _module_forward(model.params, module, probit_rescale(mom.sq_mean, var))
    return e_y, e_y2


def grow_node(model: AcdcModel, module: str) -> None:
    """Append one Glorot-initialized node to the module's evolving layer.

    The node's bias starts at zero and every downstream matrix gains a zero
    column, so heads fed by the layer see an unchanged output.
    """
    w_key, b_key, downstream = LAYERS[module]
    p, vel = model.params, model.momentum.velocity
    W = p[w_key]
    r, fan_in = W.shape
    row = xavier_sample(fan_in, r + 1, model.rng, shape=(1, fan_in))
    p[w_key] = np.vstack([W, row])
    p[b_key] = np.append(p[b_key], 0.0)
    vel[w_key] = np.vstack([vel[w_key], np.zeros((1, fan_in))])
    vel[b_key] = np.append(vel[b_key], 0.0)
    for d in downstream:
        p[d] = np.hstack([p[d], np.zeros((p[d].shape[0], 1))])
        vel[d] = np.hstack([vel[d], np.zeros((vel[d].shape[0], 1))])


def node_activations(model: AcdcModel, module: str) -> np.ndarray:
    """Expected activation of every node in the module's evolving layer."""
    mom = model.moments[module]
    if mom.count < 1:
        raise ValueError("node activations need at least one observed sample")
    act, _ = _module_forward(model.params, module,
                             probit_rescale(mom.mean, mom.variance))
    return act


def prune_weakest(model: AcdcModel, module: str) -> Optional[int]:
    """Remove the node with the lowest expected activation (lowest index on
    ties) and its downstream column. Skipped when only one node is left.
    Returns the removed index or ``None``."""
    if model.width(module) < 2:
        return None
    r = int(np.argmin(node_activations(model, module)))
    w_key, b_key, downstream = LAYERS[module]
    p, vel = model.params, model.momentum.velocity
    for store in (p, vel):
        store[w_key] = np.delete(store[w_key], r, axis=0)
        store[b_key] = np.delete(store[b_key], r)
        for d in downstream:
            store[d] = np.delete(store[d], r, axis=1)
    return r


def _evolve(model: AcdcModel, module: str, bias: float, var: float,
            events: StructuralEvents) -> Optional[str]:
    stats = model.spc[module]
    stats.update(bias, var)
    beta, lam = spc_thresholds(bias, var, model.hyper.alpha1, model.hyper.alpha2)
    grow, prune = stats.evaluate(beta, lam)
    action = None
    if grow:
        grow_node(model, module)
        action = "grow"
    elif prune and prune_weakest(model, module) is not None:
        action = "prune"
    if action:
        events.add(module, action)
    if model.spc_log is not None:
        model.spc_log.append((module, bias, var, beta, lam, grow, prune, action))
    return action


def adapt_step(model: AcdcModel, x_s, y_s, x_t=None) -> StructuralEvents:
    """Drift detection and structural adaptation for one sample pair.

    DAE assesses ``x_s -> x_t`` and ``x_t -> x_s``, DAA assesses
    ``x_s -> 0`` and ``x_t -> 1``, DISC assesses ``x_s -> y_s``. A DAA grow
    also grows DISC when ``flags.daa_signals_disc`` is set.
    """
    events = StructuralEvents()
    if not model.flags.evolution_enabled:
        return events

    mom = model.moments["dae"]
    mom.update(x_s)
    if x_t is not None:
        mom.update(x_t)
    e_y, e_y2 = expected_output(model, "dae")
    if x_t is None:
        bias, var = bias_variance(e_y, e_y2, x_s)
    else:
        b1, var = bias_variance(e_y, e_y2, x_t)
        b2, _ = bias_variance(e_y, e_y2, x_s)
        bias = 0.5 * (b1 + b2)
    _evolve(model, "dae", bias, var, events)

    if model.flags.daa_enabled and x_t is not None:
        mom = model.moments["daa"]
        mom.update(x_s)
        mom.update(x_t)
        e_y, e_y2 = expected_output(model, "daa")
        b1, var = bias_variance(e_y, e_y2, np.zeros(1))
        b2, _ = bias_variance(e_y, e_y2, np.ones(1))
        if _evolve(model, "daa", 0.5 * (b1 + b2), var, events) == "grow" \
                and model.flags.daa_signals_disc:
            grow_node(model, "disc")
            events.add("disc", "grow")

    model.moments["disc"].update(x_s)
    e_y, e_y2 = expected_output(model, "disc")
    bias, var = bias_variance(e_y, e_y2, y_s)
    _evolve(model, "disc", bias, var, events)
    return events


# --------------------------------------------------------------------------
# inference and diagnostics


def predict(model: AcdcModel, x):
    """DISC class id and probability vector for one sample (no mutation)."""
    _, P = disc_head(model.params, encode(model.params, _rows(x)))
    return int(np.argmax(P[0])), P[0]


def predict_many(model: AcdcModel, X) -> tuple:
    """Vectorized :func:`predict` over a ``(n, u)`` batch."""
    X = _rows(X)
    _, P = disc_head(model.params, encode(model.params, X))
    return np.argmax(P, axis=1), P


def domain_scores(model: AcdcModel, X) -> np.ndarray:
    """DAA output per row: the probability that a sample is from the target."""
    _, D = daa_head(model.params, encode(model.params, _rows(X)))
    return D[:, 0]


def empirical_h_divergence(model: AcdcModel, W_S: Sequence, W_T: Sequence) -> float:
    """``2 * |1 - (err_S + err_T)|`` with the current DAA as the hypothesis.

    ``err_S`` is the share of source samples scored as target and ``err_T``
    the share of target samples scored as source. The absolute value takes
    the better of the DAA and its complement, so the result is in [0, 2].
    """
    if len(W_S) == 0 or len(W_T) == 0:
        raise ValueError("empirical H-divergence needs two nonempty windows")
    err_s = float(np.mean(domain_scores(model, np.asarray(W_S)) >= 0.5))
    err_t = float(np.mean(domain_scores(model, np.asarray(W_T)) < 0.5))
    return 2.0 * abs(1.0 - (err_s + err_t))


def param_hash(model: AcdcModel) -> str:
    h = hashlib.sha256()
    for k in PARAM_KEYS:
        arr = np.ascontiguousarray(model.params[k])
        h.update(k.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def model_config(model: AcdcModel) -> dict:
    return {"u": model.u, "m": model.m, "flags": asdict(model.flags),
            "hyper": asdict(model.hyper)}


def clone_model(model: AcdcModel) -> AcdcModel:
    """Deep copy including RNG state."""
    rng = np.random.default_rng()
    rng.bit_generator.state = model.rng.bit_generator.state
    mom = MomentumState(model.params)
    mom.velocity = {k: v.copy() for k, v in model.momentum.velocity.items()}
    return AcdcModel(
        u=model.u, m=model.m,
        params={k: v.copy() for k, v in model.params.items()},
        momentum=mom,
        flags=AblationFlags(**asdict(model.flags)),
        hyper=Hyper(**asdict(model.hyper)),
        moments={k: v.copy() for k, v in model.moments.items()},
        spc={k: SpcStats.from_state(v.state()) for k, v in model.spc.items()},
        rng=rng,
    )

