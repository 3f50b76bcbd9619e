import json
import math
import warnings
from collections import Counter

import numpy as np
import pytest

from dmrank.data import Dataset, SynthConfig, split, synthesize_dataset
from dmrank.errors import NoComparablePairsError, TrainingDivergence
from dmrank.evaluation import pairwise_accuracy, sample_pairs, validation_ndcg
from dmrank.model import Hyperparams, PmtfModel
from dmrank.objective import PriorWeights, triple_gradients
from dmrank.trainer import (AdaGradState, TrainConfig, TripleSampler, adagrad_step,
                            covariance_gradients, latent_gradients, probe_objective,
                            sample_triples, train, train_dmr_i)
from dmrank.verify import random_spd


def small_dataset(seed=0, covariance="planted", n_users=30, n_items=20):
    ds, _ = synthesize_dataset(SynthConfig(n_users=n_users, n_items=n_items, n_aspects=3,
                                           latent_dim=3, density=0.5, covariance=covariance,
                                           seed=seed))
    return split(ds, seed=seed)


def quick_config(**kw):
    base = dict(batch_size=200, max_iters=20, learning_rate=0.05, latent_dim=3, eval_every=5,
                patience=10, probe_size=200, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def tiny(values, users, items, n_items=None):
    values = np.asarray(values, float)
    n_items = n_items or int(max(items)) + 1
    return Dataset([f"u{k}" for k in range(int(max(users)) + 1)], [f"i{k}" for k in range(n_items)],
                   [f"a{k}" for k in range(values.shape[1])], users, items, values)


# ---------------------------------------------------------------------------
# AdaGrad
# ---------------------------------------------------------------------------

def test_adagrad_first_step_is_signed_lr():
    p = {"x": np.zeros(3)}
    g = {"x": np.array([2.0, -0.5, 1e-2])}
    adagrad_step(p, g, AdaGradState(), 0.1)
    assert np.allclose(p["x"], 0.1 * np.sign(g["x"]), rtol=1e-4)


def test_adagrad_zero_gradient_no_change():
    p = {"x": np.array([1.0, 2.0])}
    adagrad_step(p, {"x": np.zeros(2)}, AdaGradState(), 0.5)
    assert p["x"].tolist() == [1.0, 2.0]


def test_adagrad_step_size_decays_as_inverse_sqrt():
    p = {"x": np.zeros(1)}
    state = AdaGradState(eps=0.0)
    prev = 0.0
    for t in range(1, 11):
        adagrad_step(p, {"x": np.array([3.0])}, state, 1.0)
        assert p["x"][0] - prev == pytest.approx(1 / math.sqrt(t), rel=1e-12)
        prev = p["x"][0]
    assert state.accumulators["x"][0] == pytest.approx(90.0)


def test_adagrad_accumulators_nondecreasing_and_shape_checked():
    rng = np.random.default_rng(0)
    p = {"x": np.zeros((2, 2))}
    state = AdaGradState()
    prev = np.zeros((2, 2))
    for _ in range(5):
        adagrad_step(p, {"x": rng.normal(size=(2, 2))}, state, 0.1)
        assert np.all(state.accumulators["x"] >= prev)
        prev = state.accumulators["x"].copy()
    with pytest.raises(ValueError, match="shape mismatch"):
        adagrad_step(p, {"x": np.zeros(3)}, state, 0.1)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_two_item_user_yields_only_its_pair():
    ds = tiny([[5, 4], [3, 2]], [0, 0], [0, 1])
    batch = TripleSampler(ds).sample(200, np.random.default_rng(0))
    seen = set(zip(batch.items_i.tolist(), batch.items_j.tolist()))
    assert seen == {(0, 1), (1, 0)}
    assert np.all(batch.users == 0)
    row = batch.items_i == 0
    assert np.all(batch.d[row] == [2.0, 2.0]) and np.all(batch.d[~row] == [-2.0, -2.0])


def test_sampling_deterministic_given_seed():
    ds = small_dataset()
    a = sample_triples(ds, 50, np.random.default_rng(9))
    b = sample_triples(ds, 50, np.random.default_rng(9))
    assert [(t.u, t.i, t.j) for t in a] == [(t.u, t.i, t.j) for t in b]


def test_sampling_uniform_over_ordered_triples():
    # users with 2, 3 and 4 items: 2 + 6 + 12 = 20 ordered triples
    users = [0, 0, 1, 1, 1, 2, 2, 2, 2]
    items = [0, 1, 0, 1, 2, 0, 1, 2, 3]
    values = np.arange(1, 10, dtype=float)[:, None] * [1.0, 0.5]
    ds = tiny(values, users, items)
    n = 100_000
    batch = TripleSampler(ds).sample(n, np.random.default_rng(1))
    counts = Counter(zip(batch.users.tolist(), batch.items_i.tolist(), batch.items_j.tolist()))
    assert len(counts) == 20
    p = 1 / 20
    sd = math.sqrt(n * p * (1 - p))
    for c in counts.values():
        assert abs(c - n * p) <= 3 * sd


def test_no_comparable_pairs():
    ds = tiny([[5, 4], [3, 2]], [0, 1], [0, 1])
    with pytest.raises(NoComparablePairsError, match="no comparable pairs"):
        TripleSampler(ds)


def test_tied_and_disjoint_pairs_are_redrawn():
    # items 0 and 1 tie on their only shared aspect; item 2 shares no aspect with item 0
    nan = math.nan
    ds = tiny([[4, nan], [4, 3], [nan, 2]], [0, 0, 0], [0, 1, 2])
    batch = TripleSampler(ds).sample(300, np.random.default_rng(2))
    pairs = set(zip(batch.items_i.tolist(), batch.items_j.tolist()))
    assert pairs == {(1, 2), (2, 1)}
    assert np.all(batch.mask == [False, True])


def test_only_ties_raise_after_rejection():
    ds = tiny([[4, 4], [4, 4]], [0, 0], [0, 1])
    with pytest.raises(NoComparablePairsError):
        TripleSampler(ds).sample(5, np.random.default_rng(0))


def test_exposure_counts_ordered_triples():
    users = [0, 0, 0, 1, 1]
    items = [0, 1, 2, 0, 1]
    ds = tiny(np.arange(1, 6, dtype=float)[:, None], users, items)
    s = TripleSampler(ds)
    assert s.total == 8
    assert s.user_exposure.tolist() == [6, 2]
    # item 0 appears in 4 ordered triples of user 0 and 2 of user 1
    assert s.item_exposure.tolist() == [6, 6, 4]


def test_implicit_sampler_pairs_rated_with_unrated():
    ds = tiny([[5.0], [3.0]], [0, 0], [0, 1], n_items=4)
    batch = TripleSampler(ds, implicit=True).sample(100, np.random.default_rng(0))
    assert set(batch.items_i.tolist()) <= {0, 1}
    assert set(batch.items_j.tolist()) <= {2, 3}


# ---------------------------------------------------------------------------
# batched gradients against the single-triple path
# ---------------------------------------------------------------------------

def test_batched_gradients_equal_summed_triple_gradients():
    rng = np.random.default_rng(4)
    ds = small_dataset()
    k = ds.n_aspects
    model = PmtfModel(rng.normal(0, 0.5, (ds.n_users, 3)), rng.normal(0, 0.5, (ds.n_items, 3)),
                      rng.normal(0, 0.5, (k, 3)),
                      np.stack([np.linalg.cholesky(random_spd(rng, k)) for _ in range(ds.n_users)]),
                      np.stack([np.linalg.cholesky(random_spd(rng, k)) for _ in range(ds.n_items)]))
    hyper = Hyperparams(latent_dim=3, margin=0.3).resolved(k, random_spd(rng, k, 0.5))
    sampler = TripleSampler(ds)
    batch = sampler.sample(40, rng)
    wu, wi, wj = sampler.prior_weights(batch)
    _, gl = latent_gradients(model, batch, hyper, (wu, wi, wj), 2.0)
    _, gc = covariance_gradients(model, batch, hyper, (wu, wi, wj), 2.0)
    ref = {"u": np.zeros_like(model.u_factors), "v": np.zeros_like(model.v_factors),
           "w": np.zeros_like(model.w_factors), "lu": np.zeros_like(model.user_cov_factors),
           "lv": np.zeros_like(model.item_cov_factors)}
    for n, t in enumerate(batch.triples()):
        g = triple_gradients(model, t, hyper, PriorWeights(wu[n], wi[n], wj[n], 0.0))
        ref["u"][t.u] += g.g_u
        ref["v"][t.i] += g.g_vi
        ref["v"][t.j] += g.g_vj
        ref["w"] += g.g_w
        ref["lu"][t.u] += g.g_lu
        ref["lv"][t.i] += g.g_li
        ref["lv"][t.j] += g.g_lj
    got = {**gl, **gc}
    for name, r in ref.items():
        assert np.allclose(got[name], 2.0 * r, rtol=1e-10, atol=1e-10), name


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_zero_learning_rate_leaves_model_unchanged():
    ds = small_dataset()
    cfg = quick_config(learning_rate=0.0, max_iters=6, eval_every=3)
    res = train(ds, cfg)
    init = PmtfModel.initialize(ds.n_users, ds.n_items, ds.n_aspects, 3,
                                np.random.default_rng(cfg.seed), res.sigma_priori)
    assert np.array_equal(res.final_model.u_factors, init.u_factors)
    assert np.array_equal(res.final_model.user_cov_factors, init.user_cov_factors)
    assert len({r["valid_ndcg50"] for r in res.log}) == 1


def test_training_bitwise_reproducible():
    ds = small_dataset()
    a = train(ds, quick_config()).final_model
    b = train(ds, quick_config()).final_model
    c = train(ds, quick_config(workers=2)).final_model
    for name in ("u_factors", "v_factors", "w_factors", "user_cov_factors", "item_cov_factors"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
        # chunked reduction reorders sums, so only near-equality holds across worker counts
        assert np.allclose(getattr(a, name), getattr(c, name), rtol=1e-8, atol=1e-10)
    d = train(ds, quick_config(workers=2)).final_model
    assert np.array_equal(c.item_cov_factors, d.item_cov_factors)


def test_different_seeds_differ():
    ds = small_dataset()
    a = train(ds, quick_config(max_iters=2)).final_model
    b = train(ds, quick_config(max_iters=2, seed=4)).final_model
    assert not np.array_equal(a.u_factors, b.u_factors)


def test_dmr_i_never_touches_covariances():
    ds = small_dataset()
    res = train_dmr_i(ds, quick_config())
    k = ds.n_aspects
    assert res.final_model.frozen_covariance
    assert np.array_equal(res.final_model.user_cov_factors,
                          np.broadcast_to(np.eye(k), res.final_model.user_cov_factors.shape))
    assert np.array_equal(res.final_model.item_cov_factors,
                          np.broadcast_to(np.eye(k), res.final_model.item_cov_factors.shape))


def test_training_keeps_covariances_definite_and_improves_probe(tmp_path):
    ds = small_dataset()
    log_path = tmp_path / "log.jsonl"
    res = train(ds, quick_config(max_iters=30), log_path=log_path)
    assert res.final_model.min_covariance_eigenvalue() >= res.final_model.jitter - 1e-10
    assert all(math.isfinite(r["probe_objective"]) for r in res.log)
    assert res.log[-1]["probe_objective"] > res.initial_probe
    records = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert [r["iteration"] for r in records] == [0, 5, 10, 15, 20, 25, 30]
    assert set(records[0]) == {"iteration", "probe_objective", "valid_ndcg50", "elapsed"}


def test_returns_best_validation_checkpoint():
    ds = small_dataset()
    res = train(ds, quick_config(max_iters=30))
    assert res.best_metric == max(r["valid_ndcg50"] for r in res.log)
    assert validation_ndcg(res.model, ds) == pytest.approx(res.best_metric, abs=1e-12)


def test_early_stopping_by_patience():
    ds = small_dataset()
    res = train(ds, quick_config(learning_rate=0.0, max_iters=100, eval_every=2, patience=3))
    assert res.stopped_early and res.iterations == 6


def test_training_improves_heldout_accuracy_over_initialisation():
    ds = small_dataset(n_users=60, n_items=30)
    cfg = quick_config(max_iters=150, eval_every=25, learning_rate=0.1)
    res = train(ds, cfg)
    init = PmtfModel.initialize(ds.n_users, ds.n_items, ds.n_aspects, 3,
                                np.random.default_rng(cfg.seed), res.sigma_priori)
    pairs = sample_pairs(ds)
    assert pairwise_accuracy(res.model, pairs) > pairwise_accuracy(init, pairs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard_names_triple_and_z():
    ds = small_dataset()
    cfg = quick_config()
    rng = np.random.default_rng(0)
    model = PmtfModel.initialize(ds.n_users, ds.n_items, ds.n_aspects, 3, rng)
    model.u_factors[:] = 1e160
    model.v_factors[:] = rng.normal(size=model.v_factors.shape) * 1e160
    with pytest.raises(TrainingDivergence, match=r"triple \(u=\d+, i=\d+, j=\d+\) with Z="):
        train(ds, cfg, init_model=model)


def test_config_validation_and_margin_warning():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cfg = TrainConfig(margin=2.0)
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)
    assert cfg.effective_clip == 100.0
    assert TrainConfig().effective_clip is None


def test_probe_objective_is_mean_log_likelihood():
    ds = small_dataset()
    model = PmtfModel.initialize(ds.n_users, ds.n_items, ds.n_aspects, 3, np.random.default_rng(0))
    sampler = TripleSampler(ds)
    probe = sampler.sample(20, np.random.default_rng(1))
    from dmrank.dirlik import GaussianSpec, ObservedDirection, log_pair_likelihood
    ref = np.mean([log_pair_likelihood(ObservedDirection(t.d, t.mask),
                                       GaussianSpec(model.predict_difference(t.u, t.i, t.j),
                                                    model.pair_covariance(t.u, t.i, t.j)), 0.2)
                   for t in probe.triples()])
    assert probe_objective(model, probe, 0.2) == pytest.approx(ref, abs=1e-10)
