"""Self-contained numerical verification suites.

Each suite draws random instances from a seed, compares an implementation
path against an independent reference, and reports the worst error seen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Triple
from .dirlik import GaussianSpec, ObservedDirection, log_pair_likelihood, quadrature_oracle
from .evaluation import average_precision, ndcg_at_k
from .model import Hyperparams, PmtfModel, covariance_from_factor
from .objective import (PriorWeights, batch_terms, finite_difference_check, niw_grad,
                        niw_log_prior, triple_gradients, triple_objective)

QUADRATURE_TOL = 1e-8
GRADIENT_TOL = 1e-4
NIW_TOL = 1e-6
METRIC_TOL = 1e-12


@dataclass
class SuiteResult:
    name: str
    worst: float
    tol: float
    n: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<22} worst={self.worst:.3e}  tol={self.tol:.0e}  n={self.n}"


def random_spd(rng, k: int, jitter: float = 0.1) -> np.ndarray:
    a = rng.normal(size=(k, k))
    return a @ a.T / k + jitter * np.eye(k)


# ---------------------------------------------------------------------------
# closed form vs quadrature
# ---------------------------------------------------------------------------

def suite_quadrature(rng, n: int = 200) -> SuiteResult:
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(1, 6))
        cov = random_spd(rng, k)
        mean = rng.normal(size=k)
        d = rng.normal(size=k)
        xi = float(rng.uniform(0.0, 1.0))
        spec = GaussianSpec(mean, cov)
        direction = ObservedDirection(d)
        closed = math.exp(log_pair_likelihood(direction, spec, xi))
        ref = quadrature_oracle(direction, spec, xi)
        worst = max(worst, abs(closed - ref) / ref)
    return SuiteResult("closed_form_vs_quad", worst, QUADRATURE_TOL, n)


# ---------------------------------------------------------------------------
# analytic vs finite-difference gradients
# ---------------------------------------------------------------------------

def _conditioned_factor(rng, k: int, min_singular: float = 0.2) -> np.ndarray:
    # central differences at h = 1e-5 lose about (h / sigma_min)^2 to truncation,
    # so nearly singular factors are redrawn
    while True:
        factor = np.eye(k) * 0.7 + rng.normal(0.0, 0.2, size=(k, k))
        if np.linalg.svd(factor, compute_uv=False).min() >= min_singular:
            return factor


def random_instance(rng, k: int | None = None):
    """A small random model, one comparison touching it and prior weights."""
    k = int(rng.integers(1, 6)) if k is None else k
    dim = 3
    n_users, n_items = 2, 3
    model = PmtfModel(
        rng.normal(0.0, 0.6, size=(n_users, dim)),
        rng.normal(0.0, 0.6, size=(n_items, dim)),
        rng.normal(0.0, 0.6, size=(k, dim)),
        np.stack([_conditioned_factor(rng, k) for _ in range(n_users)]),
        np.stack([_conditioned_factor(rng, k) for _ in range(n_items)]),
        lam=float(rng.uniform(0.2, 0.8)),
    )
    mask = rng.random(k) < 0.8
    mask[int(rng.integers(k))] = True
    d = np.where(mask, rng.normal(0.0, 1.5, size=k), 0.0)
    d[mask & (d == 0)] = 0.5
    triple = Triple(0, 1, 2, d, mask)
    hyper = Hyperparams(latent_dim=dim, margin=float(rng.uniform(0.0, 1.0)),
                        lam=model.lam, sigma_u=0.8, sigma_v=1.2, sigma_w=1.0)
    hyper = hyper.resolved(k, random_spd(rng, k, 0.3))
    weights = PriorWeights(*rng.uniform(0.1, 1.0, size=4))
    return model, triple, hyper, weights


def _fd_param(model, triple, hyper, weights, attr, index, analytic, h):
    def fn(x):
        m = model.copy()
        arr = getattr(m, attr)
        if index is None:
            arr[...] = x
        else:
            arr[index] = x
        return triple_objective(m, triple, hyper, weights)

    base = getattr(model, attr)
    x0 = base if index is None else base[index]
    floor = roundoff_floor(triple_objective(model, triple, hyper, weights), h, GRADIENT_TOL)
    return finite_difference_check(fn, x0, analytic, h=h, floor=floor)


def gradient_errors(rng, inject_bug: bool = False, h: float = 1e-5) -> dict:
    """Worst relative error per parameter group on one random instance."""
    model, triple, hyper, weights = random_instance(rng)
    grads = triple_gradients(model, triple, hyper, weights)
    bump = 1.01 if inject_bug else 1.0
    out = {}

    dhat0 = model.predict_difference(triple.u, triple.i, triple.j)
    sigma = model.pair_covariance(triple.u, triple.i, triple.j)

    def f_dhat(x):
        t = batch_terms(triple.d[None], x[None], sigma[None], triple.mask[None],
                        hyper.margin, grad_dhat=False)
        return float(t.value[0])

    g_dhat = batch_terms(triple.d[None], dhat0[None], sigma[None], triple.mask[None],
                         hyper.margin).g_dhat[0]
    obs = triple.mask
    out["dhat"] = finite_difference_check(lambda x: f_dhat(_fill(dhat0, obs, x)),
                                          dhat0[obs], bump * g_dhat[obs], h=h)
    out["U"] = _fd_param(model, triple, hyper, weights, "u_factors", triple.u, bump * grads.g_u, h)
    out["V_i"] = _fd_param(model, triple, hyper, weights, "v_factors", triple.i, bump * grads.g_vi, h)
    out["V_j"] = _fd_param(model, triple, hyper, weights, "v_factors", triple.j, bump * grads.g_vj, h)
    out["W"] = _fd_param(model, triple, hyper, weights, "w_factors", None, bump * grads.g_w, h)
    out["L_u"] = _fd_param(model, triple, hyper, weights, "user_cov_factors", triple.u,
                           bump * grads.g_lu, h)
    out["L_i"] = _fd_param(model, triple, hyper, weights, "item_cov_factors", triple.i,
                           bump * grads.g_li, h)
    out["L_j"] = _fd_param(model, triple, hyper, weights, "item_cov_factors", triple.j,
                           bump * grads.g_lj, h)

    factor = model.user_cov_factors[triple.u]
    g = niw_grad(covariance_from_factor(factor, model.jitter), hyper.nu, hyper.psi)
    prior = lambda x: niw_log_prior(covariance_from_factor(x, model.jitter), hyper.nu, hyper.psi)
    out["NIW"] = finite_difference_check(prior, factor, bump * (g + g.T) @ factor, h=h,
                                         floor=roundoff_floor(prior(factor), h, NIW_TOL))
    return out


def roundoff_floor(f0: float, h: float, tol: float) -> float:
    """Smallest derivative a central difference resolves to relative ``tol``.

    Rounding in ``f`` leaves an absolute error near ``eps |f| / h`` in the
    difference quotient; components below ten times that, divided by ``tol``,
    are compared on that absolute scale instead.
    """
    noise = np.finfo(float).eps * max(abs(f0), 1.0) / h
    return max(1e-6, 10.0 * noise / tol)


def _fill(base, mask, x):
    full = base.copy()
    full[mask] = x
    return full


def suite_gradients(rng, n: int = 30, inject_bug: bool = False) -> list:
    worst = {}
    for _ in range(n):
        for name, err in gradient_errors(rng, inject_bug).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return [SuiteResult(f"grad_{name}", err, NIW_TOL if name == "NIW" else GRADIENT_TOL, n)
            for name, err in worst.items()]


# ---------------------------------------------------------------------------
# ranking metrics vs brute force
# ---------------------------------------------------------------------------

def brute_ndcg(scores, gains, k: int) -> float:
    n = len(scores)
    order = sorted(range(n), key=lambda t: (-scores[t], t))
    dcg = sum(gains[t] / math.log2(r + 2) for r, t in enumerate(order[:k]))
    ideal = sorted(gains, reverse=True)
    idcg = sum(g / math.log2(r + 2) for r, g in enumerate(ideal[:k]))
    return 1.0 if idcg == 0 else dcg / idcg


def brute_average_precision(scores, relevant) -> float:
    n = len(scores)
    order = sorted(range(n), key=lambda t: (-scores[t], t))
    hits, total = 0, 0.0
    for r, t in enumerate(order, start=1):
        if relevant[t]:
            hits += 1
            total += hits / r
    return math.nan if hits == 0 else total / hits


def random_ranking_instance(rng):
    n = int(rng.integers(1, 21))
    scores = rng.normal(size=n)
    if rng.random() < 0.5:
        scores = np.round(scores, 1)          # force ties
    gains = rng.integers(1, 6, size=n).astype(float)
    return scores, gains


def suite_metrics(rng, n: int = 1000) -> SuiteResult:
    worst = 0.0
    for _ in range(n):
        scores, gains = random_ranking_instance(rng)
        for k in (1, 5, 10, 50):
            worst = max(worst, abs(ndcg_at_k(scores, gains, k) - brute_ndcg(list(scores), list(gains), k)))
        rel = gains >= 4
        a = average_precision(scores, rel)
        b = brute_average_precision(list(scores), list(rel))
        if math.isnan(a) != math.isnan(b):
            worst = math.inf
        elif not math.isnan(a):
            worst = max(worst, abs(a - b))
    return SuiteResult("ndcg_map_vs_brute", worst, METRIC_TOL, n)


def run_all(seed: int = 0, inject_bug: bool = False, n_quad: int = 200,
            n_grad: int = 30, n_metric: int = 1000) -> list:
    rng = np.random.default_rng(seed)
    results = [suite_quadrature(rng, n_quad)]
    results.extend(suite_gradients(rng, n_grad, inject_bug))
    results.append(suite_metrics(rng, n_metric))
    return results
