"""Numerical self-checks: finite-difference gradients, gradient reversal
sign and probit expectations against Monte Carlo."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np
from scipy.special import expit

from .evolving import InputMoments
from .net import (
    ENCODER_KEYS,
    daa_loss_grads,
    dae_loss_grads,
    disc_loss_grads,
    expected_output,
    init_model,
)
from .tensor import finite_diff_grad, relative_error, xavier_sample

GRAD_TOL = 1e-4
PROBIT_TOL = 0.05


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def random_params(rng: np.random.Generator, u: int, r_dae: int, r_daa: int,
                  r_disc: int, m: int, scale: float = 0.8) -> dict:
    shapes = {
        "W_dae": (r_dae, u), "b_a": (r_dae,), "b_b": (u,),
        "W_daa1": (r_daa, r_dae), "b_c": (r_daa,), "W_daa2": (1, r_daa), "b_d": (1,),
        "W_disc1": (r_disc, r_dae), "b_e": (r_disc,), "W_disc2": (m, r_disc), "b_f": (m,),
    }
    return {k: scale * rng.standard_normal(s) for k, s in shapes.items()}


def glorot_params(rng: np.random.Generator, u: int, r_dae: int, r_daa: int,
                  r_disc: int, m: int, bias_scale: float = 0.5) -> dict:
    """Glorot-uniform weights as the model draws them, small uniform biases."""
    p = random_params(rng, u, r_dae, r_daa, r_disc, m)
    for k, v in p.items():
        if v.ndim == 2:
            p[k] = xavier_sample(v.shape[1], v.shape[0], rng)
        else:
            p[k] = rng.uniform(-bias_scale, bias_scale, v.shape)
    return p


def random_config(rng: np.random.Generator):
    """``(u, r_dae, r_daa, r_disc, m)`` within u<=8, R<=6, m<=4."""
    return (int(rng.integers(2, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 7)),
            int(rng.integers(1, 7)), int(rng.integers(2, 5)))


def gradient_errors(rng: np.random.Generator, n_configs: int = 20) -> List[dict]:
    """Worst relative error of each loss over ``n_configs`` random nets."""
    out = []
    for _ in range(n_configs):
        u, r_dae, r_daa, r_disc, m = random_config(rng)
        params = random_params(rng, u, r_dae, r_daa, r_disc, m)
        x_s, x_t = rng.uniform(0, 1, u), rng.uniform(0, 1, u)
        noisy = np.vstack([x_s * (rng.uniform(size=u) > 0.2), x_t])
        y = np.eye(m)[rng.integers(m)]

        cases: List[tuple] = [
            ("dae", lambda p: dae_loss_grads(p, noisy, np.vstack([x_t, x_s]))),
            ("daa", lambda p: daa_loss_grads(p, x_s, x_t)),
            ("disc", lambda p: disc_loss_grads(p, x_s, y)),
        ]
        errs = {"config": (u, r_dae, r_daa, r_disc, m)}
        for name, fn in cases:
            _, analytic = fn(params)
            numeric = finite_diff_grad(lambda p, fn=fn: fn(p)[0], params)
            errs[name] = relative_error(analytic, {k: numeric[k] for k in analytic})
        out.append(errs)
    return out


def check_gradients(seed: int = 0, n_configs: int = 20) -> List[CheckResult]:
    errs = gradient_errors(np.random.default_rng(seed), n_configs)
    results = []
    for name in ("dae", "daa", "disc"):
        worst = max(e[name] for e in errs)
        results.append(CheckResult(f"gradient {name}", worst < GRAD_TOL,
                                   f"max rel err {worst:.2e} over {n_configs} nets"))
    return results


def grl_mismatch(rng: np.random.Generator, n_configs: int = 20) -> int:
    """Number of entries where the reversed encoder gradient is not the exact
    negation of the true one (head gradients must match exactly too)."""
    bad = 0
    for _ in range(n_configs):
        u, r_dae, r_daa, r_disc, m = random_config(rng)
        params = random_params(rng, u, r_dae, r_daa, r_disc, m)
        x_s, x_t = rng.uniform(0, 1, u), rng.uniform(0, 1, u)
        _, true = daa_loss_grads(params, x_s, x_t)
        _, rev = daa_loss_grads(params, x_s, x_t, reversal=1.0)
        for k in true:
            want = -true[k] if k in ENCODER_KEYS else true[k]
            bad += int(np.sum(rev[k] != want))
    return bad


def check_grl(seed: int = 0) -> List[CheckResult]:
    bad = grl_mismatch(np.random.default_rng(seed))
    return [CheckResult("gradient reversal", bad == 0, f"{bad} mismatched entries")]


def monte_carlo_output(params: dict, module: str, mean: np.ndarray, var: np.ndarray,
                       rng: np.random.Generator, draws: int = 10**6,
                       chunk: int = 200_000) -> np.ndarray:
    """Mean module output over Gaussian inputs ``N(mean, diag(var))``."""
    total = None
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        X = mean + np.sqrt(var) * rng.standard_normal((n, mean.size))
        s = _batch_forward(params, module, X).sum(axis=0)
        total = s if total is None else total + s
        done += n
    return total / draws


def _batch_forward(params: dict, module: str, X: np.ndarray) -> np.ndarray:
    # written independently of the model's own forward pass
    H = expit(X @ params["W_dae"].T + params["b_a"])
    if module == "dae":
        return expit(H @ params["W_dae"] + params["b_b"])
    if module == "daa":
        A = expit(H @ params["W_daa1"].T + params["b_c"])
        return expit(A @ params["W_daa2"].T + params["b_d"])
    A = expit(H @ params["W_disc1"].T + params["b_e"])
    Z = A @ params["W_disc2"].T + params["b_f"]
    Z -= Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def probit_errors(rng: np.random.Generator, n_nets: int = 10,
                  draws: int = 10**6) -> List[float]:
    """Max absolute gap between the probit ``E[y]`` and Monte Carlo, per net
    (over all three modules)."""
    gaps = []
    for _ in range(n_nets):
        u, r_dae, r_daa, r_disc, m = random_config(rng)
        model = init_model(u, m, seed=int(rng.integers(2**32)))
        model.params = glorot_params(rng, u, r_dae, r_daa, r_disc, m)
        mean = rng.uniform(-1, 1, u)
        # one pseudo-sample whose population variance is drawn directly
        mom = InputMoments.from_state({"count": 1, "mean": mean,
                                       "m2": rng.uniform(0.0, 1.0, u),
                                       "sq_mean": mean * mean})
        gap = 0.0
        for module in ("dae", "daa", "disc"):
            e_y, _ = expected_output(model, module, mom)
            mc = monte_carlo_output(model.params, module, mom.mean, mom.variance, rng, draws)
            gap = max(gap, float(np.max(np.abs(e_y - mc))))
        gaps.append(gap)
    return gaps


def check_probit(seed: int = 0, n_nets: int = 10, draws: int = 10**6) -> List[CheckResult]:
    gaps = probit_errors(np.random.default_rng(seed), n_nets, draws)
    worst = max(gaps)
    return [CheckResult("probit expectation", worst < PROBIT_TOL,
                        f"max abs gap {worst:.4f} vs Monte Carlo over {n_nets} nets")]


SUITES: dict = {
    "gradients": check_gradients,
    "grl": check_grl,
    "probit": check_probit,
}


def run_all(seed: int = 0, report: Callable[[str], None] = print) -> List[CheckResult]:
    results = []
    for fn in SUITES.values():
        for r in fn(seed):
            report(r.line())
            results.append(r)
    return results
