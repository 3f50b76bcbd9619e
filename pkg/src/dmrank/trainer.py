"""Two-phase stochastic training under the directional objective.

Each iteration draws one batch of co-rated triples and ascends the latent
factors, then draws a fresh batch and ascends the covariance factors.  Both
phases use per-coordinate AdaGrad.

Prior terms are spread over the sampled triples: a triple carries each prior
with weight ``1 / exposure`` where exposure counts the ordered training
triples touching that parameter, and the batch sum is rescaled by
``|S| / batch_size``.  The sum over a batch is then an unbiased estimate of
the full log posterior, and the likelihood-to-prior balance does not depend
on the batch size.
"""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TRAIN, Dataset, estimate_global_covariance
from .errors import NoComparablePairsError, TrainingDivergence
from .evaluation import validation_ndcg
from .model import DEFAULT_JITTER, Hyperparams, PmtfModel
from .objective import batch_terms, niw_grad

log = logging.getLogger(__name__)

MARGIN_WARNING = 0.5
_MAX_RESAMPLE_ROUNDS = 1000


@dataclass
class TrainConfig:
    batch_size: int = 2000
    max_iters: int = 40000
    learning_rate: float = 0.03
    margin: float = 0.2
    lam: float = 0.5
    latent_dim: int = 10
    seed: int = 0
    eval_every: int = 200
    patience: int = 5
    jitter: float = DEFAULT_JITTER
    nu: float | None = None
    sigma_u: float = 1.0
    sigma_v: float = 1.0
    sigma_w: float = 1.0
    prior_strength: float = 1.0
    clip_norm: float | None = None
    probe_size: int = 1000
    workers: int = 1
    deterministic: bool = True
    implicit: bool = False
    dmr_i: bool = False
    covariance_warmup: int = 0
    covariance_prior: str = "exposure"
    init_scale: float = 0.05

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.eval_every < 1 or self.patience < 1:
            raise ValueError("eval_every and patience must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.margin > MARGIN_WARNING:
            warnings.warn(f"margin {self.margin} > {MARGIN_WARNING}: large margins are known "
                          "to degrade ranking quality", RuntimeWarning, stacklevel=2)

    @property
    def effective_clip(self) -> float | None:
        """Global-norm clip; on by default only for margins above the warning level."""
        if self.clip_norm is not None:
            return self.clip_norm
        return 100.0 if self.margin > MARGIN_WARNING else None

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(latent_dim=self.latent_dim, margin=self.margin, lam=self.lam,
                           nu=self.nu, sigma_u=self.sigma_u, sigma_v=self.sigma_v,
                           sigma_w=self.sigma_w)


# ---------------------------------------------------------------------------
# AdaGrad
# ---------------------------------------------------------------------------

@dataclass
class AdaGradState:
    accumulators: dict = field(default_factory=dict)
    eps: float = 1e-8


def adagrad_step(params: dict, grads: dict, state: AdaGradState, lr: float) -> dict:
    """In-place ascent ``theta += lr * g / sqrt(acc + eps)`` with ``acc += g**2``."""
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(p)
        acc += g * g
        p += lr * g / np.sqrt(acc + state.eps)
    return params


# ---------------------------------------------------------------------------
# triple sampling
# ---------------------------------------------------------------------------

@dataclass
class TripleBatch:
    users: np.ndarray
    items_i: np.ndarray
    items_j: np.ndarray
    d: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.users)

    def select(self, idx) -> "TripleBatch":
        return TripleBatch(self.users[idx], self.items_i[idx], self.items_j[idx],
                           self.d[idx], self.mask[idx])

    def triples(self):
        from .data import Triple
        return [Triple(int(u), int(i), int(j), d, m)
                for u, i, j, d, m in zip(self.users, self.items_i, self.items_j, self.d, self.mask)]


class TripleSampler:
    """Uniform draws with replacement over ordered co-rated triples ``(u, i, j)``.

    Users are chosen with probability proportional to ``m_u (m_u - 1)`` and
    then an ordered pair of their items uniformly, so every ordered triple
    is equally likely.  Draws with no comparable aspect are rejected and
    redrawn, which keeps the distribution uniform over comparable triples.

    With ``implicit=True`` the second item is drawn from items the user did
    not rate, and its rating vector is taken as zero.
    """

    def __init__(self, dataset: Dataset, rows=None, implicit: bool = False):
        if rows is None:
            rows = np.flatnonzero(dataset.part(TRAIN)) if dataset.partition is not None \
                else np.arange(len(dataset))
        rows = np.asarray(rows)
        self.dataset = dataset
        self.implicit = implicit
        order = rows[np.argsort(dataset.users[rows], kind="stable")]
        users, starts, counts = np.unique(dataset.users[order], return_index=True,
                                          return_counts=True)
        self.rows = order
        n_items = dataset.n_items
        if implicit:
            pairs = counts * (n_items - counts)
        else:
            pairs = counts * (counts - 1)
        keep = pairs > 0
        if not keep.any():
            raise NoComparablePairsError("no comparable pairs")
        self.users = users[keep]
        self.starts = starts[keep]
        self.counts = counts[keep]
        self.pair_counts = pairs[keep].astype(float)
        self.total = float(self.pair_counts.sum())
        self.cum = np.cumsum(self.pair_counts) / self.total
        self._rated = None
        if implicit:
            self._rated = [set(dataset.items[order[s:s + c]].tolist())
                           for s, c in zip(self.starts, self.counts)]
        self._exposure()

    def _exposure(self):
        ds = self.dataset
        self.user_exposure = np.zeros(ds.n_users)
        self.user_exposure[self.users] = self.pair_counts
        self.item_exposure = np.zeros(ds.n_items)
        per_item = 2.0 * (self.counts - 1) if not self.implicit else None
        for n, (s, c) in enumerate(zip(self.starts, self.counts)):
            items = ds.items[self.rows[s:s + c]]
            if self.implicit:
                self.item_exposure[items] += ds.n_items - c
                others = np.setdiff1d(np.arange(ds.n_items), items)
                self.item_exposure[others] += c
            else:
                self.item_exposure[items] += per_item[n]

    def _draw(self, n, rng):
        ds = self.dataset
        pick = np.minimum(np.searchsorted(self.cum, rng.random(n), side="right"),
                          self.users.size - 1)
        starts = self.starts[pick]
        counts = self.counts[pick]
        a = (rng.random(n) * counts).astype(np.int64)
        row_i = self.rows[starts + a]
        if self.implicit:
            items_j = np.empty(n, dtype=np.int64)
            for t in range(n):
                rated = self._rated[pick[t]]
                while True:
                    cand = int(rng.integers(ds.n_items))
                    if cand not in rated:
                        items_j[t] = cand
                        break
            vi = ds.values[row_i]
            mask = ~np.isnan(vi)
            d = np.where(mask, vi, 0.0)
            return self.users[pick], ds.items[row_i], items_j, d, mask
        b = (rng.random(n) * (counts - 1)).astype(np.int64)
        b = b + (b >= a)
        row_j = self.rows[starts + b]
        vi, vj = ds.values[row_i], ds.values[row_j]
        mask = ~np.isnan(vi) & ~np.isnan(vj)
        d = np.where(mask, vi - vj, 0.0)
        return self.users[pick], ds.items[row_i], ds.items[row_j], d, mask

    def sample(self, n: int, rng) -> TripleBatch:
        users = np.empty(n, dtype=np.int64)
        ii = np.empty(n, dtype=np.int64)
        jj = np.empty(n, dtype=np.int64)
        d = np.empty((n, self.dataset.n_aspects))
        mask = np.empty((n, self.dataset.n_aspects), dtype=bool)
        todo = np.arange(n)
        for _ in range(_MAX_RESAMPLE_ROUNDS):
            if todo.size == 0:
                break
            u, i, j, dd, mm = self._draw(todo.size, rng)
            ok = mm.any(axis=1) & (np.abs(dd).sum(axis=1) > 0)
            dst = todo[ok]
            users[dst], ii[dst], jj[dst], d[dst], mask[dst] = u[ok], i[ok], j[ok], dd[ok], mm[ok]
            todo = todo[~ok]
        if todo.size:
            raise NoComparablePairsError("no comparable pairs")
        return TripleBatch(users, ii, jj, d, mask)

    def prior_weights(self, batch: TripleBatch):
        """Per-triple prior weights ``1 / exposure`` for user, item i, item j."""
        return (1.0 / self.user_exposure[batch.users],
                1.0 / self.item_exposure[batch.items_i],
                1.0 / self.item_exposure[batch.items_j])


def sample_triples(dataset: Dataset, batch_size: int, rng, sampler: TripleSampler | None = None):
    """Convenience wrapper returning a list of :class:`~dmrank.data.Triple`."""
    sampler = sampler or TripleSampler(dataset)
    return sampler.sample(batch_size, rng).triples()


# ---------------------------------------------------------------------------
# batch gradients
# ---------------------------------------------------------------------------

def _divergence(model, batch, terms_value, z):
    bad = np.flatnonzero(~np.isfinite(terms_value))
    k = int(bad[0]) if bad.size else 0
    return TrainingDivergence(
        f"non-finite objective at triple (u={int(batch.users[k])}, i={int(batch.items_i[k])}, "
        f"j={int(batch.items_j[k])}) with Z={float(z[k]):.6g}")


def _evaluate(model, batch, xi, grad_dhat, grad_sigma):
    dhat = model.predict_all(batch.users, batch.items_i) - model.predict_all(batch.users, batch.items_j)
    sigma = model.pair_covariances(batch.users, batch.items_i, batch.items_j)
    terms = batch_terms(batch.d, dhat, sigma, batch.mask, xi,
                        grad_dhat=grad_dhat, grad_sigma=grad_sigma)
    if not np.all(np.isfinite(terms.value)):
        raise _divergence(model, batch, terms.value, terms.z)
    return terms


def latent_gradients(model: PmtfModel, batch: TripleBatch, hyper: Hyperparams,
                     weights, scale: float):
    """Summed gradients for ``U, V, W`` over one batch, scaled by ``scale``.

    The prior on ``W`` is shared by every triple and is left to the caller.
    """
    terms = _evaluate(model, batch, hyper.margin, True, False)
    g = terms.g_dhat
    if not np.all(np.isfinite(g)):
        raise _divergence(model, batch, np.where(np.isfinite(g).all(axis=1), 0.0, np.nan), terms.z)
    U, V, W = model.u_factors, model.v_factors, model.w_factors
    uu, vi, vj = U[batch.users], V[batch.items_i], V[batch.items_j]
    wu, wi, wj = weights
    gw = g @ W
    diff = vi - vj
    g_u = gw * diff - (wu / hyper.sigma_u ** 2)[:, None] * uu
    g_vi = gw * uu - (wi / hyper.sigma_v ** 2)[:, None] * vi
    g_vj = -gw * uu - (wj / hyper.sigma_v ** 2)[:, None] * vj
    GU = np.zeros_like(U)
    GV = np.zeros_like(V)
    np.add.at(GU, batch.users, g_u)
    np.add.at(GV, batch.items_i, g_vi)
    np.add.at(GV, batch.items_j, g_vj)
    GW = g.T @ (uu * diff)
    return float(terms.value.sum()), {"u": GU * scale, "v": GV * scale, "w": GW * scale}


def covariance_gradients(model: PmtfModel, batch: TripleBatch, hyper: Hyperparams,
                         weights, scale: float):
    """Summed gradients for the user and item covariance factors over one batch."""
    terms = _evaluate(model, batch, hyper.margin, False, True)
    gs = terms.g_sigma + np.swapaxes(terms.g_sigma, 1, 2)
    lam = model.lam
    LU, LV = model.user_cov_factors, model.item_cov_factors
    lu, li, lj = LU[batch.users], LV[batch.items_i], LV[batch.items_j]
    wu, wi, wj = weights
    su = lu @ np.swapaxes(lu, 1, 2) + model.jitter * np.eye(model.n_aspects)
    si = li @ np.swapaxes(li, 1, 2) + model.jitter * np.eye(model.n_aspects)
    sj = lj @ np.swapaxes(lj, 1, 2) + model.jitter * np.eye(model.n_aspects)
    # niw_grad is symmetric, so its symmetrised form is twice itself.
    pu = 2.0 * niw_grad(su, hyper.nu, hyper.psi)
    pi_ = 2.0 * niw_grad(si, hyper.nu, hyper.psi)
    pj = 2.0 * niw_grad(sj, hyper.nu, hyper.psi)
    g_lu = (2.0 * lam * gs + wu[:, None, None] * pu) @ lu
    g_li = ((1.0 - lam) * gs + wi[:, None, None] * pi_) @ li
    g_lj = ((1.0 - lam) * gs + wj[:, None, None] * pj) @ lj
    if not (np.all(np.isfinite(g_lu)) and np.all(np.isfinite(g_li)) and np.all(np.isfinite(g_lj))):
        raise _divergence(model, batch, np.full(len(batch), np.nan), terms.z)
    GLU = np.zeros_like(LU)
    GLV = np.zeros_like(LV)
    np.add.at(GLU, batch.users, g_lu)
    np.add.at(GLV, batch.items_i, g_li)
    np.add.at(GLV, batch.items_j, g_lj)
    return float(terms.value.sum()), {"lu": GLU * scale, "lv": GLV * scale}


def _chunked(fn, model, batch, workers, deterministic, *args):
    """Run ``fn`` over contiguous chunks of ``batch`` and sum the results.

    With ``deterministic`` the partial sums are reduced in chunk order;
    otherwise in completion order, which can change the last bits.
    """
    if workers <= 1 or len(batch) < 2 * workers:
        return fn(model, batch, *args)
    bounds = np.array_split(np.arange(len(batch)), workers)

    def run(idx):
        sub = batch.select(idx)
        sub_args = [tuple(np.asarray(w)[idx] for w in a) if isinstance(a, tuple) else a
                    for a in args]
        return fn(model, sub, *sub_args)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run, idx) for idx in bounds]
        results = [f.result() for f in futures] if deterministic \
            else [f.result() for f in as_completed(futures)]
    value = 0.0
    grads = {}
    for v, g in results:
        value += v
        for k, x in g.items():
            grads[k] = grads[k] + x if k in grads else x.copy()
    return value, grads


def _clip(grads: dict, max_norm: float | None):
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / norm
        grads = {k: g * f for k, g in grads.items()}
    return grads


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: PmtfModel
    hyper: Hyperparams
    log: list
    best_iteration: int
    best_metric: float
    iterations: int
    stopped_early: bool
    sigma_priori: np.ndarray
    initial_probe: float
    best_probe: float
    final_model: PmtfModel | None = None


def probe_objective(model: PmtfModel, probe: TripleBatch, xi: float) -> float:
    """Mean pair log likelihood on a fixed batch."""
    terms = _evaluate(model, probe, xi, False, False)
    return float(terms.log_likelihood.mean())


def _write_log(fh, record):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def train(dataset: Dataset, config: TrainConfig, log_path=None, init_model: PmtfModel | None = None,
          psd_tol: float = 1e-10) -> TrainResult:
    """Fit a model on the training partition with validation early stopping."""
    if dataset.partition is None:
        from .errors import DataError
        raise DataError("dataset has not been split")
    rng = np.random.default_rng(config.seed)
    train_rows = np.flatnonzero(dataset.part(TRAIN))
    sigma_priori = estimate_global_covariance(dataset.values[train_rows])
    hyper = config.hyperparams().resolved(dataset.n_aspects, sigma_priori)
    if init_model is None:
        model = PmtfModel.initialize(dataset.n_users, dataset.n_items, dataset.n_aspects,
                                     config.latent_dim, rng, sigma_priori,
                                     lam=config.lam, jitter=config.jitter,
                                     init_scale=config.init_scale)
    else:
        model = init_model.copy()
    if config.dmr_i:
        model.set_identity_covariances()
    sampler = TripleSampler(dataset, train_rows, implicit=config.implicit)
    probe_rng = np.random.default_rng([config.seed, 1])
    probe = sampler.sample(min(config.probe_size, config.batch_size), probe_rng)

    scale = sampler.total / config.batch_size
    strength = config.prior_strength
    state = AdaGradState()
    latent = {"u": model.u_factors, "v": model.v_factors, "w": model.w_factors}
    covs = {"lu": model.user_cov_factors, "lv": model.item_cov_factors}

    history = []
    fh = open(log_path, "w") if log_path is not None else None
    start = time.perf_counter()
    try:
        best_metric = validation_ndcg(model, dataset)
        initial_probe = probe_objective(model, probe, hyper.margin)
        best_model, best_iter, best_probe = model.copy(), 0, initial_probe
        rec = {"iteration": 0, "probe_objective": initial_probe, "valid_ndcg50": best_metric,
               "elapsed": 0.0}
        history.append(rec)
        _write_log(fh, rec)
        stale = 0
        stopped_early = False
        it = 0
        for it in range(1, config.max_iters + 1):
            batch = sampler.sample(config.batch_size, rng)
            weights = tuple(w * strength for w in sampler.prior_weights(batch))
            _, g = _chunked(latent_gradients, model, batch, config.workers, config.deterministic,
                            hyper, weights, scale)
            g["w"] = g["w"] - strength * model.w_factors / hyper.sigma_w ** 2
            adagrad_step(latent, _clip(g, config.effective_clip), state, config.learning_rate)

            if not model.frozen_covariance and it > config.covariance_warmup:
                batch2 = sampler.sample(config.batch_size, rng)
                if config.covariance_prior == "per_triple":
                    weights2 = tuple(np.full(len(batch2), strength) for _ in range(3))
                else:
                    weights2 = tuple(w * strength for w in sampler.prior_weights(batch2))
                _, g2 = _chunked(covariance_gradients, model, batch2, config.workers,
                                 config.deterministic, hyper, weights2, scale)
                adagrad_step(covs, _clip(g2, config.effective_clip), state, config.learning_rate)
                touched_u = np.unique(batch2.users)
                touched_i = np.unique(np.concatenate([batch2.items_i, batch2.items_j]))
                low = model.min_covariance_eigenvalue(touched_u, touched_i)
                if low < model.jitter - psd_tol:
                    raise TrainingDivergence(f"covariance lost definiteness (min eigenvalue {low:.3g})")

            if it % config.eval_every == 0 or it == config.max_iters:
                pobj = probe_objective(model, probe, hyper.margin)
                metric = validation_ndcg(model, dataset)
                rec = {"iteration": it, "probe_objective": pobj, "valid_ndcg50": metric,
                       "elapsed": round(time.perf_counter() - start, 3)}
                history.append(rec)
                _write_log(fh, rec)
                log.info("iter %d probe %.4f valid NDCG@50 %.4f", it, pobj, metric)
                if metric > best_metric:
                    best_metric, best_model, best_iter, best_probe = metric, model.copy(), it, pobj
                    stale = 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        stopped_early = True
                        break
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(best_model, hyper, history, best_iter, best_metric, it, stopped_early,
                       sigma_priori, initial_probe, best_probe, final_model=model)


def train_dmr_i(dataset: Dataset, config: TrainConfig, log_path=None) -> TrainResult:
    """Same loop with every covariance frozen at the identity."""
    cfg = TrainConfig(**{**asdict(config), "dmr_i": True})
    return train(dataset, cfg, log_path=log_path)
