"""Probabilistic multivariate tensor factorization (PMTF) parameters.

A rating vector is modelled as ``r_ui ~ N((U_u * V_i) W^T, Sigma_ui)`` with
``Sigma_ui = lam * Sigma_u^U + (1 - lam) * Sigma_i^V``.  Every personalised
covariance is stored through an unconstrained factor ``L`` so that
``Sigma = L L^T + jitter * I`` is symmetric positive definite by construction.

Checkpoint layout
-----------------
Checkpoints are numpy ``.npz`` archives (``allow_pickle=False``) holding:

``format_version``   int, currently 1
``dims``             int[5]: M users, N items, K aspects, d latent dim, 0
``u_factors``        float[M, d]
``v_factors``        float[N, d]
``w_factors``        float[K, d]
``user_cov_factors`` float[M, K, K]
``item_cov_factors`` float[N, K, K]
``scalars``          float[2]: lam, jitter
``hyper``            float[7]: latent_dim, margin, lam, nu, sigma_u, sigma_v, sigma_w
``psi``              float[K, K]
``user_ids``, ``item_ids``, ``aspects``   unicode string arrays (may be empty)

All arrays are C-ordered (row-major).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

CHECKPOINT_VERSION = 1
DEFAULT_JITTER = 1e-6


def covariance_from_factor(factor, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """``L L^T + jitter * I``; works on a single ``(K, K)`` or a stack ``(n, K, K)``."""
    factor = np.asarray(factor, dtype=float)
    cov = factor @ np.swapaxes(factor, -1, -2)
    k = factor.shape[-1]
    return cov + jitter * np.eye(k)


def symmetric_factor(cov, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Symmetric square root ``L`` with ``L L^T + jitter * I == cov`` (clipped at 0)."""
    cov = np.asarray(cov, dtype=float)
    k = cov.shape[0]
    w, q = np.linalg.eigh(0.5 * (cov + cov.T) - jitter * np.eye(k))
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


@dataclass
class Hyperparams:
    """Model and prior hyperparameters.

    ``psi`` defaults to ``nu * I`` and ``nu`` to ``K + 2`` when left as None;
    call :meth:`resolved` with the aspect count to fill them in.
    """

    latent_dim: int = 10
    margin: float = 0.2
    lam: float = 0.5
    nu: float | None = None
    psi: np.ndarray | None = None
    sigma_u: float = 1.0
    sigma_v: float = 1.0
    sigma_w: float = 1.0

    def resolved(self, n_aspects: int, sigma_priori=None) -> "Hyperparams":
        nu = float(n_aspects + 2) if self.nu is None else float(self.nu)
        if nu <= n_aspects - 1:
            raise ValueError(f"nu must exceed K - 1 = {n_aspects - 1}, got {nu}")
        if self.psi is not None:
            psi = np.asarray(self.psi, dtype=float)
        elif sigma_priori is not None:
            psi = nu * np.asarray(sigma_priori, dtype=float)
        else:
            psi = nu * np.eye(n_aspects)
        if psi.shape != (n_aspects, n_aspects):
            raise ValueError("psi must be K x K")
        if not np.allclose(psi, psi.T, atol=1e-12) or np.linalg.eigvalsh(psi).min() <= 0:
            raise ValueError("psi must be symmetric positive definite")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        return replace(self, nu=nu, psi=psi)


@dataclass
class PmtfModel:
    u_factors: np.ndarray
    v_factors: np.ndarray
    w_factors: np.ndarray
    user_cov_factors: np.ndarray
    item_cov_factors: np.ndarray
    lam: float = 0.5
    jitter: float = DEFAULT_JITTER
    frozen_covariance: bool = field(default=False)

    def __post_init__(self):
        for name in ("u_factors", "v_factors", "w_factors",
                     "user_cov_factors", "item_cov_factors"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=float))
        d = self.u_factors.shape[1]
        k = self.w_factors.shape[0]
        if self.v_factors.shape[1] != d or self.w_factors.shape[1] != d:
            raise ValueError("latent dimensions of U, V, W disagree")
        if self.user_cov_factors.shape != (self.n_users, k, k):
            raise ValueError("user covariance factors must be (M, K, K)")
        if self.item_cov_factors.shape != (self.n_items, k, k):
            raise ValueError("item covariance factors must be (N, K, K)")

    @property
    def n_users(self) -> int:
        return self.u_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.v_factors.shape[0]

    @property
    def n_aspects(self) -> int:
        return self.w_factors.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.u_factors.shape[1]

    @classmethod
    def initialize(cls, n_users, n_items, n_aspects, latent_dim, rng,
                   sigma_priori=None, lam=0.5, jitter=DEFAULT_JITTER, init_scale=0.05):
        """Small uniform factors; every covariance starts at ``sigma_priori``."""
        scale = init_scale / np.sqrt(latent_dim)
        u = rng.uniform(-scale, scale, size=(n_users, latent_dim))
        v = rng.uniform(-scale, scale, size=(n_items, latent_dim))
        w = rng.uniform(-scale, scale, size=(n_aspects, latent_dim))
        if sigma_priori is None:
            sigma_priori = np.eye(n_aspects)
        root = symmetric_factor(sigma_priori, jitter)
        lu = np.broadcast_to(root, (n_users, n_aspects, n_aspects)).copy()
        li = np.broadcast_to(root, (n_items, n_aspects, n_aspects)).copy()
        return cls(u, v, w, lu, li, lam=lam, jitter=jitter)

    def copy(self) -> "PmtfModel":
        return PmtfModel(
            self.u_factors.copy(), self.v_factors.copy(), self.w_factors.copy(),
            self.user_cov_factors.copy(), self.item_cov_factors.copy(),
            lam=self.lam, jitter=self.jitter, frozen_covariance=self.frozen_covariance,
        )

    def _check_user(self, u):
        if not 0 <= u < self.n_users:
            raise IndexError(f"user index {u} out of range [0, {self.n_users})")

    def _check_item(self, i):
        if not 0 <= i < self.n_items:
            raise IndexError(f"item index {i} out of range [0, {self.n_items})")

    def predict_ratings(self, u: int, i: int) -> np.ndarray:
        """Mean rating vector ``(U_u * V_i) W^T``."""
        self._check_user(u)
        self._check_item(i)
        return (self.u_factors[u] * self.v_factors[i]) @ self.w_factors.T

    def predict_all(self, users, items) -> np.ndarray:
        """Vectorised ``predict_ratings`` over index arrays, shape ``(n, K)``."""
        users = np.asarray(users)
        items = np.asarray(items)
        return (self.u_factors[users] * self.v_factors[items]) @ self.w_factors.T

    def predict_difference(self, u: int, i: int, j: int) -> np.ndarray:
        """Predicted difference mean ``(U_u * (V_i - V_j)) W^T``."""
        if i == j:
            raise ValueError("predict_difference needs two distinct items")
        self._check_user(u)
        self._check_item(i)
        self._check_item(j)
        return (self.u_factors[u] * (self.v_factors[i] - self.v_factors[j])) @ self.w_factors.T

    def user_covariance(self, u: int) -> np.ndarray:
        self._check_user(u)
        return covariance_from_factor(self.user_cov_factors[u], self.jitter)

    def item_covariance(self, i: int) -> np.ndarray:
        self._check_item(i)
        return covariance_from_factor(self.item_cov_factors[i], self.jitter)

    def rating_covariance(self, u: int, i: int) -> np.ndarray:
        """``Sigma_ui = lam Sigma_u^U + (1 - lam) Sigma_i^V``."""
        return self.lam * self.user_covariance(u) + (1.0 - self.lam) * self.item_covariance(i)

    def pair_covariance(self, u: int, i: int, j: int) -> np.ndarray:
        """``Sigma_uij = Sigma_ui + Sigma_uj``."""
        if i == j:
            raise ValueError("pair_covariance needs two distinct items")
        return self.rating_covariance(u, i) + self.rating_covariance(u, j)

    def pair_covariances(self, users, items_i, items_j) -> np.ndarray:
        """Vectorised ``pair_covariance``, shape ``(n, K, K)``."""
        su = covariance_from_factor(self.user_cov_factors[users], self.jitter)
        si = covariance_from_factor(self.item_cov_factors[items_i], self.jitter)
        sj = covariance_from_factor(self.item_cov_factors[items_j], self.jitter)
        return 2.0 * self.lam * su + (1.0 - self.lam) * (si + sj)

    def rating_covariances(self, users, items) -> np.ndarray:
        su = covariance_from_factor(self.user_cov_factors[users], self.jitter)
        si = covariance_from_factor(self.item_cov_factors[items], self.jitter)
        return self.lam * su + (1.0 - self.lam) * si

    def min_covariance_eigenvalue(self, users=None, items=None) -> float:
        """Smallest eigenvalue over the selected composed covariances."""
        users = np.arange(self.n_users) if users is None else np.asarray(users)
        items = np.arange(self.n_items) if items is None else np.asarray(items)
        vals = []
        if users.size:
            vals.append(np.linalg.eigvalsh(
                covariance_from_factor(self.user_cov_factors[users], self.jitter)).min())
        if items.size:
            vals.append(np.linalg.eigvalsh(
                covariance_from_factor(self.item_cov_factors[items], self.jitter)).min())
        return float(min(vals)) if vals else float("inf")

    def set_identity_covariances(self):
        """Freeze every personalised covariance at the identity (DMR-I)."""
        k = self.n_aspects
        self.jitter = 0.0
        self.user_cov_factors = np.broadcast_to(np.eye(k), self.user_cov_factors.shape).copy()
        self.item_cov_factors = np.broadcast_to(np.eye(k), self.item_cov_factors.shape).copy()
        self.frozen_covariance = True


@dataclass
class Checkpoint:
    model: PmtfModel
    hyper: Hyperparams | None = None
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)
    aspects: list = field(default_factory=list)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    m = ckpt.model
    k = m.n_aspects
    h = ckpt.hyper
    if h is None:
        hyper = np.full(7, np.nan)
        psi = np.full((k, k), np.nan)
    else:
        hyper = np.array([
            h.latent_dim, h.margin, h.lam, np.nan if h.nu is None else h.nu,
            h.sigma_u, h.sigma_v, h.sigma_w,
        ], dtype=float)
        psi = np.full((k, k), np.nan) if h.psi is None else np.asarray(h.psi, dtype=float)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format_version=np.array(CHECKPOINT_VERSION),
            dims=np.array([m.n_users, m.n_items, k, m.latent_dim, int(m.frozen_covariance)]),
            u_factors=m.u_factors, v_factors=m.v_factors, w_factors=m.w_factors,
            user_cov_factors=m.user_cov_factors, item_cov_factors=m.item_cov_factors,
            scalars=np.array([m.lam, m.jitter]),
            hyper=hyper, psi=psi,
            user_ids=np.array([str(x) for x in ckpt.user_ids], dtype=str),
            item_ids=np.array([str(x) for x in ckpt.item_ids], dtype=str),
            aspects=np.array([str(x) for x in ckpt.aspects], dtype=str),
        )


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        dims = z["dims"]
        lam, jitter = (float(x) for x in z["scalars"])
        model = PmtfModel(
            z["u_factors"], z["v_factors"], z["w_factors"],
            z["user_cov_factors"], z["item_cov_factors"],
            lam=lam, jitter=jitter, frozen_covariance=bool(dims[4]),
        )
        hv = z["hyper"]
        hyper = None
        if not np.isnan(hv[0]):
            psi = z["psi"]
            hyper = Hyperparams(
                latent_dim=int(hv[0]), margin=float(hv[1]), lam=float(hv[2]),
                nu=None if np.isnan(hv[3]) else float(hv[3]),
                psi=None if np.isnan(psi).any() else psi.copy(),
                sigma_u=float(hv[4]), sigma_v=float(hv[5]), sigma_w=float(hv[6]),
            )
        return Checkpoint(
            model, hyper,
            user_ids=[str(x) for x in z["user_ids"]],
            item_ids=[str(x) for x in z["item_ids"]],
            aspects=[str(x) for x in z["aspects"]],
        )
