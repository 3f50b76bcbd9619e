"""DMR log-posterior under PMTF and its analytic gradients.

Per compared pair the objective keeps the parameter-dependent part of the
log line-integral likelihood::

    f = -1/2 (ln|S| + C - B^2/A + ln(2A)) + ln erfc(Z)

which differs from :func:`dmrank.dirlik.log_pair_likelihood` by the
constant ``(K'/2) ln 2pi - 1/2 ln pi``.  With ``s = S^-1 d`` and
``t = S^-1 dhat`` (``S`` the pair covariance) and ``h = hazard(Z)``:

    df/d dhat = -t + (B/A) s + h s / sqrt(2A)

    df/dS = -1/2 S^-1 + 1/2 t t^T - (B/A) s t^T + (B^2 / 2A^2) s s^T
            + s s^T / (2A) - h dZ/dS

    dZ/dS = -xi/(2 sqrt(2A)) s s^T + s t^T / sqrt(2A) - B/(2A)^(3/2) s s^T

(``S`` is treated as an unconstrained matrix; the chain to a factor ``L``
with ``S = L L^T + eps I`` is ``(G + G^T) L``.)  Every formula here is
checked against central finite differences in the test suite.

Missing aspects are handled without changing array shapes: masked-out rows
and columns of ``S`` are replaced by the identity and the matching entries
of ``d`` and ``dhat`` by zero, which leaves ``A``, ``B``, ``C`` and
``ln|S|`` equal to their values on the marginal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import multigammaln

from .dirlik import LOG_2PI, erfc_hazard, log_erfc
from .errors import EmptyComparisonError, SingularCovarianceError
from .model import Hyperparams, PmtfModel, covariance_from_factor

_HALF_LOG_PI = 0.5 * math.log(math.pi)


def likelihood_offset(k_obs) -> float:
    """``log_pair_likelihood - pair_objective_term`` for ``k_obs`` compared aspects."""
    return -0.5 * np.asarray(k_obs) * LOG_2PI + _HALF_LOG_PI


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------

def niw_log_prior(cov, nu: float, psi) -> float:
    """Inverse-Wishart log density of ``cov`` including normalising constants.

    ``-(nu+K+1)/2 ln|cov| - 1/2 tr(psi cov^-1) + nu/2 ln|psi|
    - nu K/2 ln 2 - ln Gamma_K(nu/2)``.
    """
    cov = np.asarray(cov, dtype=float)
    psi = np.asarray(psi, dtype=float)
    k = cov.shape[0]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("covariance not positive definite") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    trace = float(np.trace(np.linalg.solve(cov, psi)))
    _, logdet_psi = np.linalg.slogdet(psi)
    return (
        -0.5 * (nu + k + 1) * logdet
        - 0.5 * trace
        + 0.5 * nu * logdet_psi
        - 0.5 * nu * k * math.log(2.0)
        - float(multigammaln(0.5 * nu, k))
    )


def niw_grad(cov, nu: float, psi) -> np.ndarray:
    """Gradient of :func:`niw_log_prior`; accepts ``(K, K)`` or ``(n, K, K)``."""
    cov = np.asarray(cov, dtype=float)
    k = cov.shape[-1]
    inv = np.linalg.inv(cov)
    return 0.5 * inv @ psi @ inv - 0.5 * (nu + k + 1) * inv


def niw_mode(nu: float, psi) -> np.ndarray:
    k = np.asarray(psi).shape[0]
    return np.asarray(psi, dtype=float) / (nu + k + 1)


def gauss_log_prior(x, sigma: float) -> float:
    """``sum ln N(x | 0, sigma^2)`` over every entry of ``x``."""
    x = np.asarray(x, dtype=float)
    return float(-0.5 * np.sum(x * x) / sigma ** 2 - 0.5 * x.size * math.log(2.0 * math.pi * sigma ** 2))


# ---------------------------------------------------------------------------
# batched core
# ---------------------------------------------------------------------------

@dataclass
class BatchTerms:
    """Pair terms and gradients for a stack of comparisons."""

    value: np.ndarray        # (n,) pair objective terms
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    z: np.ndarray
    k_obs: np.ndarray        # (n,) number of compared aspects
    g_dhat: np.ndarray | None = None    # (n, K)
    g_sigma: np.ndarray | None = None   # (n, K, K)

    @property
    def log_likelihood(self) -> np.ndarray:
        return self.value + likelihood_offset(self.k_obs)


def _embed(d, dhat, sigma, mask):
    mask = np.asarray(mask, dtype=bool)
    d = np.where(mask, d, 0.0)
    dhat = np.where(mask, dhat, 0.0)
    if mask.all():
        return d, dhat, sigma, mask
    both = mask[:, :, None] & mask[:, None, :]
    eye = np.eye(mask.shape[1], dtype=bool)
    sigma = np.where(both, sigma, np.where(eye, 1.0, 0.0))
    return d, dhat, sigma, mask


def batch_terms(d, dhat, sigma, mask, xi: float, grad_dhat=True, grad_sigma=False) -> BatchTerms:
    """Evaluate the pair objective for ``n`` comparisons at once.

    Parameters
    ----------
    d, dhat : (n, K) arrays
        Observed and predicted differences.
    sigma : (n, K, K) array
        Pair covariances ``Sigma_uij``.
    mask : (n, K) bool array
        Aspects observed on both sides.
    xi : float
        Margin.
    """
    d = np.asarray(d, dtype=float)
    dhat = np.asarray(dhat, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    d, dhat, sig, mask = _embed(d, dhat, sigma, mask)
    k_obs = mask.sum(axis=1)
    if (k_obs == 0).any():
        raise EmptyComparisonError("empty comparison in batch")
    try:
        chol = np.linalg.cholesky(sig)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("covariance not invertible") from exc
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    rhs = np.stack([d, dhat], axis=2)
    sol = np.linalg.solve(sig, rhs)
    s, t = sol[:, :, 0], sol[:, :, 1]
    a = np.einsum("nk,nk->n", d, s)
    b = np.einsum("nk,nk->n", dhat, s)
    c = np.einsum("nk,nk->n", dhat, t)
    if not (a > 0).all():
        raise EmptyComparisonError("zero difference vector in batch")
    z = np.sqrt(a / 2.0) * (xi - b / a)
    value = -0.5 * (logdet + c - b * b / a + np.log(2.0 * a)) + log_erfc(z)
    out = BatchTerms(value, a, b, c, z, k_obs)
    if not (grad_dhat or grad_sigma):
        return out
    h = erfc_hazard(z)
    root2a = np.sqrt(2.0 * a)
    if grad_dhat:
        g = -t + (b / a)[:, None] * s + (h / root2a)[:, None] * s
        out.g_dhat = np.where(mask, g, 0.0)
    if grad_sigma:
        inv = np.linalg.inv(sig)
        ss = s[:, :, None] * s[:, None, :]
        st = s[:, :, None] * t[:, None, :]
        tt = t[:, :, None] * t[:, None, :]
        dz = (
            (-(xi / (2.0 * root2a)) - b / root2a ** 3)[:, None, None] * ss
            + (1.0 / root2a)[:, None, None] * st
        )
        g = (
            -0.5 * inv
            + 0.5 * tt
            - (b / a)[:, None, None] * st
            + (b * b / (2.0 * a * a) + 1.0 / (2.0 * a))[:, None, None] * ss
            - h[:, None, None] * dz
        )
        both = mask[:, :, None] & mask[:, None, :]
        out.g_sigma = np.where(both, g, 0.0)
    return out


# ---------------------------------------------------------------------------
# single-comparison API
# ---------------------------------------------------------------------------

def _triple_arrays(model: PmtfModel, triple):
    dhat = model.predict_difference(triple.u, triple.i, triple.j)
    sigma = model.pair_covariance(triple.u, triple.i, triple.j)
    return (np.asarray(triple.d, float)[None], dhat[None], sigma[None],
            np.asarray(triple.mask, bool)[None])


def pair_objective_term(model: PmtfModel, triple, xi: float) -> float:
    """Log-likelihood term of one triple without the aspect-count constants."""
    d, dhat, sigma, mask = _triple_arrays(model, triple)
    return float(batch_terms(d, dhat, sigma, mask, xi, grad_dhat=False).value[0])


def grad_wrt_dhat(stats, d, dhat, sigma, xi: float) -> np.ndarray:
    """Gradient of the pair term with respect to the predicted difference.

    All arguments are already restricted to the compared aspects; ``stats``
    is the :class:`~dmrank.dirlik.QuadStats` of the same pair.
    """
    d = np.asarray(d, float)
    dhat = np.asarray(dhat, float)
    sol = np.linalg.solve(np.asarray(sigma, float), np.column_stack([d, dhat]))
    s, t = sol[:, 0], sol[:, 1]
    a, b = stats.a, stats.b
    h = erfc_hazard(stats.z)
    return -t + (b / a) * s + h * s / math.sqrt(2.0 * a)


@dataclass
class PairGradients:
    g_u: np.ndarray
    g_vi: np.ndarray
    g_vj: np.ndarray
    g_w: np.ndarray
    g_lu: np.ndarray | None = None
    g_li: np.ndarray | None = None
    g_lj: np.ndarray | None = None


@dataclass
class PriorWeights:
    """Multipliers on each prior term attached to a single comparison.

    The trainer sets these to ``1 / exposure`` so that summing over uniformly
    sampled triples estimates the full log posterior without bias.
    """

    user: float = 1.0
    item_i: float = 1.0
    item_j: float = 1.0
    w: float = 1.0


def triple_objective(model: PmtfModel, triple, hyper: Hyperparams,
                     weights: PriorWeights | None = None, covariance_prior=True) -> float:
    """Pair term plus the weighted priors of every parameter it touches."""
    weights = weights or PriorWeights()
    val = pair_objective_term(model, triple, hyper.margin)
    val += weights.user * gauss_log_prior(model.u_factors[triple.u], hyper.sigma_u)
    val += weights.item_i * gauss_log_prior(model.v_factors[triple.i], hyper.sigma_v)
    val += weights.item_j * gauss_log_prior(model.v_factors[triple.j], hyper.sigma_v)
    val += weights.w * gauss_log_prior(model.w_factors, hyper.sigma_w)
    if covariance_prior and not model.frozen_covariance:
        val += weights.user * niw_log_prior(model.user_covariance(triple.u), hyper.nu, hyper.psi)
        val += weights.item_i * niw_log_prior(model.item_covariance(triple.i), hyper.nu, hyper.psi)
        val += weights.item_j * niw_log_prior(model.item_covariance(triple.j), hyper.nu, hyper.psi)
    return val


def latent_chain(g_dhat, u_vec, vi_vec, vj_vec, w_mat):
    """Chain ``df/d dhat`` through ``dhat = (U_u * (V_i - V_j)) W^T``.

    Works on single vectors or stacks along a leading axis.
    """
    gw = g_dhat @ w_mat                         # (.., d)
    diff = vi_vec - vj_vec
    g_u = gw * diff
    g_vi = gw * u_vec
    g_vj = -g_vi
    g_w = np.einsum("...k,...f->...kf", g_dhat, u_vec * diff)
    return g_u, g_vi, g_vj, g_w


def grad_latent(model: PmtfModel, triple, g_dhat, hyper: Hyperparams,
                weights: PriorWeights | None = None) -> PairGradients:
    """Gradients of :func:`triple_objective` for ``U_u, V_i, V_j, W``.

    ``g_dhat`` is the full-length (K) gradient with zeros at masked aspects.
    """
    weights = weights or PriorWeights()
    u, i, j = triple.u, triple.i, triple.j
    U, V, W = model.u_factors, model.v_factors, model.w_factors
    g_u, g_vi, g_vj, g_w = latent_chain(np.asarray(g_dhat, float), U[u], V[i], V[j], W)
    g_u = g_u - weights.user * U[u] / hyper.sigma_u ** 2
    g_vi = g_vi - weights.item_i * V[i] / hyper.sigma_v ** 2
    g_vj = g_vj - weights.item_j * V[j] / hyper.sigma_v ** 2
    g_w = g_w - weights.w * W / hyper.sigma_w ** 2
    return PairGradients(g_u, g_vi, g_vj, g_w)


def grad_covariance(model: PmtfModel, triple, hyper: Hyperparams,
                    weights: PriorWeights | None = None):
    """Gradients of :func:`triple_objective` for ``L_u^U, L_i^V, L_j^V``."""
    weights = weights or PriorWeights()
    d, dhat, sigma, mask = _triple_arrays(model, triple)
    terms = batch_terms(d, dhat, sigma, mask, hyper.margin, grad_dhat=False, grad_sigma=True)
    g_pair = terms.g_sigma[0]
    lam = model.lam
    lu = model.user_cov_factors[triple.u]
    li = model.item_cov_factors[triple.i]
    lj = model.item_cov_factors[triple.j]
    g_sym = g_pair + g_pair.T

    def prior_part(cov, weight):
        g = niw_grad(cov, hyper.nu, hyper.psi)
        return weight * (g + g.T)

    g_lu = (2.0 * lam * g_sym + prior_part(model.user_covariance(triple.u), weights.user)) @ lu
    g_li = ((1.0 - lam) * g_sym + prior_part(model.item_covariance(triple.i), weights.item_i)) @ li
    g_lj = ((1.0 - lam) * g_sym + prior_part(model.item_covariance(triple.j), weights.item_j)) @ lj
    return g_lu, g_li, g_lj


def triple_gradients(model: PmtfModel, triple, hyper: Hyperparams,
                     weights: PriorWeights | None = None) -> PairGradients:
    """All gradients of :func:`triple_objective` for one comparison."""
    d, dhat, sigma, mask = _triple_arrays(model, triple)
    terms = batch_terms(d, dhat, sigma, mask, hyper.margin, grad_dhat=True)
    grads = grad_latent(model, triple, terms.g_dhat[0], hyper, weights)
    if not model.frozen_covariance:
        grads.g_lu, grads.g_li, grads.g_lj = grad_covariance(model, triple, hyper, weights)
    return grads


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------

def log_posterior(model: PmtfModel, triples, hyper: Hyperparams, include_constants=True) -> float:
    """Sum of pair log likelihoods over ``triples`` plus every prior term, once.

    With ``include_constants`` the pair terms carry their ``(2 pi)`` and
    ``pi`` constants so the value is a genuine log density.
    """
    if len(triples):
        users = np.array([t.u for t in triples])
        ii = np.array([t.i for t in triples])
        jj = np.array([t.j for t in triples])
        d = np.stack([t.d for t in triples])
        mask = np.stack([t.mask for t in triples])
        dhat = model.predict_all(users, ii) - model.predict_all(users, jj)
        sigma = model.pair_covariances(users, ii, jj)
        terms = batch_terms(d, dhat, sigma, mask, hyper.margin, grad_dhat=False)
        pair = terms.log_likelihood.sum() if include_constants else terms.value.sum()
    else:
        pair = 0.0
    total = float(pair)
    total += gauss_log_prior(model.u_factors, hyper.sigma_u)
    total += gauss_log_prior(model.v_factors, hyper.sigma_v)
    total += gauss_log_prior(model.w_factors, hyper.sigma_w)
    if not model.frozen_covariance:
        for x in covariance_from_factor(model.user_cov_factors, model.jitter):
            total += niw_log_prior(x, hyper.nu, hyper.psi)
        for x in covariance_from_factor(model.item_cov_factors, model.jitter):
            total += niw_log_prior(x, hyper.nu, hyper.psi)
    return total


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_difference_check(fn, x, analytic, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between ``analytic`` and central differences of ``fn``.

    ``fn`` maps an array shaped like ``x`` to a scalar.  The relative error
    of each component is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    x = np.array(x, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    out = numeric.reshape(-1)
    for n in range(flat.size):
        orig = flat[n]
        flat[n] = orig + h
        fp = fn(x)
        flat[n] = orig - h
        fm = fn(x)
        flat[n] = orig
        out[n] = (fp - fm) / (2.0 * h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
