"""Evaluation protocol: top-K ranking, pairwise order accuracy, confidence
buckets and correlation-based explanations.

Conventions (all configurable where noted):

* NDCG gain is the raw rating value with a log2 discount.
* MAP relevance is ``rating >= threshold`` (default 4).
* A user's ranking candidates are the items they rated in the evaluated
  partition; ``candidates="all"`` ranks every item the user did not rate in
  another partition, with gain 0 for unrated ones.
* Ties in predicted scores are broken by ascending item index.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import TEST, VALID, Dataset
from .errors import DataError
from .model import PmtfModel
from .objective import batch_terms

_NO_CORRELATION = 0.1


# ---------------------------------------------------------------------------
# list metrics
# ---------------------------------------------------------------------------

def _rank_order(scores):
    # Descending score, ascending index on ties.
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(scores.size), -scores))


def dcg_at_k(gains_in_rank_order, k: int) -> float:
    g = np.asarray(gains_in_rank_order, dtype=float)[:k]
    return float(np.sum(g / np.log2(np.arange(2, g.size + 2))))


def ndcg_at_k(scores, gains, k: int) -> float:
    """NDCG@k of ``gains`` ranked by ``scores``; 1.0 when the ideal DCG is 0."""
    scores = np.asarray(scores, dtype=float)
    gains = np.asarray(gains, dtype=float)
    if scores.size == 0:
        raise ValueError("ndcg_at_k needs at least one item")
    if scores.shape != gains.shape:
        raise ValueError("scores and gains differ in length")
    if k < 1:
        raise ValueError("k must be >= 1")
    ideal = dcg_at_k(np.sort(gains)[::-1], k)
    if ideal == 0.0:
        return 1.0
    return dcg_at_k(gains[_rank_order(scores)], k) / ideal


def average_precision(scores, relevant) -> float:
    """Average precision of a ranked list; NaN when nothing is relevant."""
    scores = np.asarray(scores, dtype=float)
    relevant = np.asarray(relevant, dtype=bool)
    if scores.size == 0:
        raise ValueError("average_precision needs at least one item")
    rel = relevant[_rank_order(scores)]
    n_rel = int(rel.sum())
    if n_rel == 0:
        return math.nan
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum((hits / ranks)[rel]) / n_rel)


def mean_average_precision(score_lists, relevance_lists) -> float:
    """MAP over lists that contain at least one relevant item."""
    aps = [average_precision(s, r) for s, r in zip(score_lists, relevance_lists)]
    aps = [a for a in aps if not math.isnan(a)]
    return float(np.mean(aps)) if aps else math.nan


# ---------------------------------------------------------------------------
# top-K ranking over a dataset
# ---------------------------------------------------------------------------

@dataclass
class RankingResult:
    aspects: list
    map: np.ndarray
    ndcg: dict
    n_users: int

    @property
    def overall(self) -> dict:
        out = {"MAP": float(self.map[0])}
        out.update({f"NDCG@{k}": float(v[0]) for k, v in self.ndcg.items()})
        return out

    @property
    def average(self) -> dict:
        out = {"MAP": float(np.nanmean(self.map))}
        out.update({f"NDCG@{k}": float(np.nanmean(v)) for k, v in self.ndcg.items()})
        return out

    def records(self, prefix="ranking"):
        rows = []
        for a, name in enumerate(self.aspects):
            rows.append({"metric": f"{prefix}.MAP", "aspect": name, "value": float(self.map[a])})
            for k, v in self.ndcg.items():
                rows.append({"metric": f"{prefix}.NDCG@{k}", "aspect": name, "value": float(v[a])})
        for key, val in self.overall.items():
            rows.append({"metric": f"{prefix}.{key}", "aspect": "by_overall", "value": val})
        for key, val in self.average.items():
            rows.append({"metric": f"{prefix}.{key}", "aspect": "by_average", "value": val})
        return rows

    def to_text(self) -> str:
        names = ["MAP"] + [f"NDCG@{k}" for k in self.ndcg]
        lines = [f"{'':<10}{'By Overall Aspect':>20}{'By Average on All Aspects':>28}"]
        for n in names:
            lines.append(f"{n:<10}{self.overall[n]:>20.4f}{self.average[n]:>28.4f}")
        return "\n".join(lines)


def _user_rows(dataset: Dataset, rows: np.ndarray):
    order = rows[np.argsort(dataset.users[rows], kind="stable")]
    if order.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(dataset.users[order])) + 1
    return np.split(order, cuts)


def ranking_metrics(model: PmtfModel, dataset: Dataset, partition: int = TEST,
                    ks=(10, 50), threshold: float = 4.0, candidates: str = "partition",
                    with_map: bool = True) -> RankingResult:
    """Per-aspect MAP and NDCG@k over users with items in ``partition``."""
    if candidates not in ("partition", "all"):
        raise ValueError("candidates must be 'partition' or 'all'")
    rows = np.flatnonzero(dataset.part(partition))
    k_asp = dataset.n_aspects
    ndcg_acc = {k: [[] for _ in range(k_asp)] for k in ks}
    map_scores = [[] for _ in range(k_asp)]
    map_rel = [[] for _ in range(k_asp)]
    groups = _user_rows(dataset, rows)
    if candidates == "all":
        other = ~dataset.part(partition)
        rated_elsewhere = {}
        for r in np.flatnonzero(other):
            rated_elsewhere.setdefault(int(dataset.users[r]), set()).add(int(dataset.items[r]))
    for grp in groups:
        u = int(dataset.users[grp[0]])
        if candidates == "partition":
            items = dataset.items[grp]
            vals = dataset.values[grp]
        else:
            excl = rated_elsewhere.get(u, set())
            items = np.array([i for i in range(dataset.n_items) if i not in excl], dtype=np.int64)
            vals = np.zeros((items.size, k_asp))
            pos = {int(i): n for n, i in enumerate(items)}
            for r in grp:
                vals[pos[int(dataset.items[r])]] = dataset.values[r]
        pred = model.predict_all(np.full(items.size, u), items)
        for a in range(k_asp):
            # Missing gains count as 0 in all-items mode, and are dropped from
            # the list otherwise.
            col = vals[:, a]
            if candidates == "partition":
                keep = ~np.isnan(col)
                if not keep.any():
                    continue
                sc, gn = pred[keep, a], col[keep]
            else:
                sc, gn = pred[:, a], np.nan_to_num(col, nan=0.0)
            for k in ks:
                ndcg_acc[k][a].append(ndcg_at_k(sc, gn, k))
            if with_map:
                map_scores[a].append(sc)
                map_rel[a].append(gn >= threshold)
    ndcg = {k: np.array([np.mean(x) if x else math.nan for x in ndcg_acc[k]]) for k in ks}
    maps = np.array([mean_average_precision(s, r) if with_map else math.nan
                     for s, r in zip(map_scores, map_rel)])
    return RankingResult(list(dataset.aspects), maps, ndcg, len(groups))


def validation_ndcg(model: PmtfModel, dataset: Dataset, k: int = 50) -> float:
    """Average NDCG@k over all aspects on the validation partition."""
    res = ranking_metrics(model, dataset, VALID, ks=(k,), with_map=False)
    return float(np.nanmean(res.ndcg[k]))


# ---------------------------------------------------------------------------
# pairwise order accuracy
# ---------------------------------------------------------------------------

@dataclass
class PairSet:
    """Evaluation pairs ``(u, i, j)`` with their observed rating vectors."""

    users: np.ndarray
    items_i: np.ndarray
    items_j: np.ndarray
    r_i: np.ndarray
    r_j: np.ndarray

    def __len__(self):
        return len(self.users)

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.r_i) & ~np.isnan(self.r_j)

    @property
    def diff(self) -> np.ndarray:
        return self.r_i - self.r_j


def sample_pairs(dataset: Dataset, partition: int = TEST, n_pairs: int | None = None,
                 rng=None) -> PairSet:
    """Unordered item pairs rated by the same user within ``partition``.

    ``n_pairs=None`` returns every pair; otherwise pairs are drawn uniformly
    with replacement from that set.
    """
    rows = np.flatnonzero(dataset.part(partition)) if dataset.partition is not None \
        else np.arange(len(dataset))
    ri, rj = [], []
    for grp in _user_rows(dataset, rows):
        if grp.size < 2:
            continue
        grp = grp[np.argsort(dataset.items[grp], kind="stable")]
        a, b = np.triu_indices(grp.size, k=1)
        ri.append(grp[a])
        rj.append(grp[b])
    if not ri:
        raise DataError("no comparable pairs in partition")
    ri = np.concatenate(ri)
    rj = np.concatenate(rj)
    if n_pairs is not None:
        if rng is None:
            rng = np.random.default_rng(0)
        pick = rng.integers(0, ri.size, size=n_pairs)
        ri, rj = ri[pick], rj[pick]
    return PairSet(dataset.users[ri], dataset.items[ri], dataset.items[rj],
                   dataset.values[ri], dataset.values[rj])


def order_counts(true_diff, pred_diff):
    """Correct-order count and comparable-aspect count, NaN entries ignored."""
    true_diff = np.asarray(true_diff, dtype=float)
    pred_diff = np.asarray(pred_diff, dtype=float)
    valid = ~np.isnan(true_diff) & (true_diff != 0)
    correct = valid & (np.where(valid, true_diff, 0.0) * pred_diff > 0)
    return int(correct.sum()), int(valid.sum())


def order_accuracy(true_diff, pred_diff) -> float:
    correct, total = order_counts(true_diff, pred_diff)
    if total == 0:
        raise DataError("no comparable aspect pairs")
    return correct / total


def predicted_differences(model: PmtfModel, pairs: PairSet) -> np.ndarray:
    return model.predict_all(pairs.users, pairs.items_i) - model.predict_all(pairs.users, pairs.items_j)


def pairwise_accuracy(model: PmtfModel, pairs: PairSet) -> float:
    """Share of correctly ordered aspects over all pairs; ties and gaps excluded."""
    return order_accuracy(pairs.diff, predicted_differences(model, pairs))


# ---------------------------------------------------------------------------
# confidence buckets
# ---------------------------------------------------------------------------

@dataclass
class ConfidenceReport:
    edges: np.ndarray        # (n_buckets, 2) min and max confidence per bucket
    accuracy: np.ndarray     # (n_buckets,) NaN where a bucket has no comparable aspect
    counts: np.ndarray       # pairs per bucket
    comparable: np.ndarray   # comparable aspects per bucket

    def records(self):
        return [
            {"metric": "confidence.accuracy", "bucket": b, "low": float(lo), "high": float(hi),
             "pairs": int(n), "value": float(acc)}
            for b, ((lo, hi), acc, n) in enumerate(zip(self.edges, self.accuracy, self.counts))
        ]

    def to_text(self) -> str:
        lines = [f"{'bucket':>6}{'pairs':>8}{'conf_low':>12}{'conf_high':>12}{'accuracy':>10}"]
        for b, ((lo, hi), acc, n) in enumerate(zip(self.edges, self.accuracy, self.counts)):
            lines.append(f"{b:>6}{n:>8}{lo:>12.4f}{hi:>12.4f}{acc:>10.4f}")
        return "\n".join(lines)


def pair_confidence(model: PmtfModel, pairs: PairSet, xi: float) -> np.ndarray:
    """Log line integral along each pair's predicted direction.

    The observed direction is replaced by the unit vector of the predicted
    difference over the compared aspects, so the score measures how much
    mass the fitted distribution puts on its own predicted ray.  A direction
    has no length, and the unit representative keeps the score from
    rewarding small predictions through the ``1 / |d|`` scaling of the line
    integral.  Pairs whose prediction vanishes on the compared aspects get
    ``-inf``.
    """
    dhat = predicted_differences(model, pairs)
    mask = pairs.mask
    masked = np.where(mask, dhat, 0.0)
    norm = np.linalg.norm(masked, axis=1)
    usable = mask.any(axis=1) & (norm > 0)
    conf = np.full(len(pairs), -np.inf)
    if usable.any():
        sigma = model.pair_covariances(pairs.users[usable], pairs.items_i[usable],
                                       pairs.items_j[usable])
        unit = masked[usable] / norm[usable, None]
        terms = batch_terms(unit, dhat[usable], sigma, mask[usable], xi, grad_dhat=False)
        conf[usable] = terms.log_likelihood
    return conf


def confidence_report(model: PmtfModel, pairs: PairSet, xi: float,
                      n_buckets: int = 10) -> ConfidenceReport:
    """Pairwise accuracy within equal-population confidence buckets, low to high."""
    conf = pair_confidence(model, pairs, xi)
    pred = predicted_differences(model, pairs)
    true = pairs.diff
    if order_counts(true, pred)[1] == 0:
        raise DataError("no comparable aspect pairs")
    if np.all(conf == conf[0]):
        n_buckets = 1
    order = np.lexsort((np.arange(conf.size), conf))
    buckets = np.array_split(order, min(n_buckets, conf.size))
    edges, acc, counts, comp = [], [], [], []
    for b in buckets:
        c, t = order_counts(true[b], pred[b])
        edges.append((conf[b].min(), conf[b].max()))
        acc.append(c / t if t else math.nan)
        counts.append(b.size)
        comp.append(t)
    return ConfidenceReport(np.array(edges), np.array(acc), np.array(counts), np.array(comp))


# ---------------------------------------------------------------------------
# explanations
# ---------------------------------------------------------------------------

def correlation_matrix(cov, eps: float = 1e-12):
    """Correlation matrix and a mask of aspects with nonzero variance."""
    cov = np.asarray(cov, dtype=float)
    var = np.diag(cov).copy()
    ok = var > eps * max(float(var.max()), 1.0)
    sd = np.sqrt(np.where(ok, var, 1.0))
    corr = cov / np.outer(sd, sd)
    corr[~ok, :] = 0.0
    corr[:, ~ok] = 0.0
    return corr, ok


def explanation_scores(cov) -> np.ndarray:
    """Correlation of every aspect with Overall (aspect 0); NaN where excluded."""
    corr, ok = correlation_matrix(cov)
    if not ok[0]:
        raise DataError("Overall aspect has zero variance")
    scores = corr[0].copy()
    scores[0] = np.nan
    scores[~ok] = np.nan
    return scores


def rank_explanations(cov, top: int = 1) -> list:
    scores = explanation_scores(cov)
    cand = [k for k in range(1, scores.size) if not np.isnan(scores[k])]
    if not cand:
        raise DataError("no non-Overall aspect with nonzero variance")
    cand.sort(key=lambda k: (-scores[k], k))
    return cand[:top]


def explanation_aspect(model: PmtfModel, u: int, i: int) -> int:
    """Aspect most correlated with Overall under ``Sigma_ui``."""
    return rank_explanations(model.rating_covariance(u, i), top=1)[0]


def has_strong_correlation(model: PmtfModel, u: int, i: int, level=_NO_CORRELATION) -> bool:
    scores = explanation_scores(model.rating_covariance(u, i))
    return bool(np.nanmax(np.abs(scores)) >= level)


def explanation_text(item_name: str, aspect_names) -> str:
    names = " and ".join(f"[{a}]" for a in aspect_names)
    return (f"We recommend this item [{item_name}] to you, because you may like "
            f"its aspects of {names}.")


def avg_rating_difference(dataset: Dataset, selector, partition: int = TEST) -> float:
    """Mean ``|r_overall - r_selected|``; a missing selected aspect counts as 0.

    ``selector(u, i)`` returns an aspect index.  Observations without an
    Overall rating are skipped.
    """
    rows = np.flatnonzero(dataset.part(partition)) if dataset.partition is not None \
        else np.arange(len(dataset))
    diffs = []
    for r in rows:
        vals = dataset.values[r]
        if np.isnan(vals[0]):
            continue
        k = selector(int(dataset.users[r]), int(dataset.items[r]))
        sel = 0.0 if np.isnan(vals[k]) else vals[k]
        diffs.append(abs(vals[0] - sel))
    if not diffs:
        raise DataError("empty test set")
    return float(np.mean(diffs))


def model_selector(model: PmtfModel):
    return lambda u, i: explanation_aspect(model, u, i)


def random_selector(n_aspects: int, rng):
    return lambda u, i: int(rng.integers(1, n_aspects))


# ---------------------------------------------------------------------------
# report formatting
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    ranking: RankingResult
    accuracy: float
    confidence: ConfidenceReport
    explanation: float
    explanation_random: float
    extra: dict = field(default_factory=dict)

    def records(self):
        rows = self.ranking.records()
        rows.append({"metric": "pairwise.accuracy", "value": self.accuracy})
        rows.extend(self.confidence.records())
        rows.append({"metric": "explanation.avg_rating_difference", "selector": "model",
                     "value": self.explanation})
        rows.append({"metric": "explanation.avg_rating_difference", "selector": "random",
                     "value": self.explanation_random})
        for k, v in self.extra.items():
            rows.append({"metric": k, "value": v})
        return rows

    def to_text(self) -> str:
        parts = [
            "Multi-aspect ranking (MAP / NDCG@K)",
            self.ranking.to_text(),
            "",
            "Pairwise order accuracy across all aspects",
            f"{'Accuracy':<10}{self.accuracy:>10.4f}",
            "",
            "Pairwise accuracy by confidence level (low to high)",
            self.confidence.to_text(),
            "",
            "Average rating difference between Overall and the selected aspect",
            f"{'Random':<10}{self.explanation_random:>10.4f}",
            f"{'Model':<10}{self.explanation:>10.4f}",
        ]
        return "\n".join(parts)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records())
