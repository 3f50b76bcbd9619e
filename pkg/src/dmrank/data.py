"""Multi-aspect rating data: ingestion, filtering, splitting, synthesis.

Rating files are UTF-8 TSV::

    user_id<TAB>item_id<TAB>Overall<TAB>Aspect1<TAB>...

one observation per line.  A missing aspect is an empty field or ``NA``.
Split assignments travel in a sidecar TSV ``user_id item_id partition``
with partition one of ``train``, ``valid``, ``test``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .model import PmtfModel, covariance_from_factor

TRAIN, VALID, TEST = 0, 1, 2
UNASSIGNED = -1
PARTITION_NAMES = {TRAIN: "train", VALID: "valid", TEST: "test"}
PARTITION_CODES = {v: k for k, v in PARTITION_NAMES.items()}
MISSING_TOKENS = ("", "NA")

TRIPADVISOR_ASPECTS = [
    "Overall", "Sleep Quality", "Service", "Value", "Rooms",
    "Cleanliness", "Location", "Check in / front desk",
]


@dataclass
class Dataset:
    """Indexed multi-aspect ratings.

    ``values`` is ``(n_obs, K)`` with NaN in missing slots and ``mask`` is the
    matching boolean array of observed slots.  Aspect 0 is Overall.
    """

    user_ids: list
    item_ids: list
    aspects: list
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    partition: np.ndarray | None = None
    provenance: str = "explicit"
    rating_bounds: tuple | None = (1.0, 5.0)
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.users), -1)
        if self.values.shape[1] != len(self.aspects):
            raise DataError("rating width does not match the aspect list")
        if self.partition is not None:
            self.partition = np.asarray(self.partition, dtype=np.int8)
        keys = self.users * max(len(self.item_ids), 1) + self.items
        if np.unique(keys).size != keys.size:
            raise DataError("duplicate (user, item) observation")
        if (~self.mask).all(axis=1).any():
            raise DataError("observation with no rated aspect")

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_aspects(self) -> int:
        return len(self.aspects)

    def __len__(self) -> int:
        return len(self.users)

    def rating(self, u: int, i: int) -> np.ndarray:
        if self._index is None:
            self._index = {(int(a), int(b)): n for n, (a, b) in enumerate(zip(self.users, self.items))}
        return self.values[self._index[(u, i)]]

    def subset(self, keep: np.ndarray) -> "Dataset":
        """Observations where ``keep`` is true, ids reindexed densely."""
        keep = np.asarray(keep, dtype=bool)
        users = self.users[keep]
        items = self.items[keep]
        uniq_u, new_u = np.unique(users, return_inverse=True)
        uniq_i, new_i = np.unique(items, return_inverse=True)
        return Dataset(
            [self.user_ids[k] for k in uniq_u],
            [self.item_ids[k] for k in uniq_i],
            list(self.aspects), new_u, new_i, self.values[keep],
            None if self.partition is None else self.partition[keep],
            self.provenance, self.rating_bounds,
        )

    def part(self, which: int) -> np.ndarray:
        """Boolean row selector for one partition."""
        if self.partition is None:
            raise DataError("dataset has not been split")
        return self.partition == which


@dataclass(frozen=True)
class Triple:
    """One sampled comparison: user ``u`` rated both ``i`` and ``j``."""

    u: int
    i: int
    j: int
    d: np.ndarray
    mask: np.ndarray


def _parse_value(tok, lineno):
    tok = tok.strip()
    if tok in MISSING_TOKENS:
        return math.nan
    try:
        v = float(tok)
    except ValueError:
        raise DataError(f"line {lineno}: cannot parse rating {tok!r}") from None
    if not math.isfinite(v):
        raise DataError(f"line {lineno}: non-finite rating {tok!r}")
    return v


def load_ratings(path, expected_aspects=None, rating_bounds=(1.0, 5.0)) -> Dataset:
    """Parse a rating TSV.  Ids keep first-appearance order."""
    user_index, item_index = {}, {}
    users, items, rows = [], [], []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        if len(header) < 3 or header[0] != "user_id" or header[1] != "item_id":
            raise DataError("line 1: header must start with user_id<TAB>item_id<TAB>aspects")
        aspects = header[2:]
        if len(set(aspects)) != len(aspects):
            raise DataError("line 1: duplicate aspect name")
        if expected_aspects is not None:
            unknown = [a for a in aspects if a not in expected_aspects]
            if unknown:
                raise DataError(f"line 1: unknown aspect(s) {unknown}")
        k = len(aspects)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != k + 2:
                raise DataError(f"line {lineno}: expected {k + 2} fields, got {len(parts)}")
            uid, iid = parts[0], parts[1]
            if not uid or not iid:
                raise DataError(f"line {lineno}: empty user or item id")
            if (uid, iid) in seen:
                raise DataError(f"line {lineno}: duplicate observation ({uid}, {iid})")
            seen.add((uid, iid))
            vals = [_parse_value(t, lineno) for t in parts[2:]]
            if all(math.isnan(v) for v in vals):
                raise DataError(f"line {lineno}: no rated aspect")
            if rating_bounds is not None:
                lo, hi = rating_bounds
                for v in vals:
                    if not math.isnan(v) and not lo <= v <= hi:
                        raise DataError(f"line {lineno}: rating {v} outside [{lo}, {hi}]")
            users.append(user_index.setdefault(uid, len(user_index)))
            items.append(item_index.setdefault(iid, len(item_index)))
            rows.append(vals)
    values = np.array(rows, dtype=float).reshape(len(rows), k)
    return Dataset(list(user_index), list(item_index), aspects,
                   np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                   values, rating_bounds=rating_bounds)


def _format_value(v: float) -> str:
    if math.isnan(v):
        return "NA"
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_ratings(path, dataset: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["user_id", "item_id", *dataset.aspects]) + "\n")
        for u, i, row in zip(dataset.users, dataset.items, dataset.values):
            fields = [dataset.user_ids[u], dataset.item_ids[i], *(_format_value(v) for v in row)]
            fh.write("\t".join(fields) + "\n")


def write_split(path, dataset: Dataset) -> None:
    if dataset.partition is None:
        raise DataError("dataset has not been split")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, p in zip(dataset.users, dataset.items, dataset.partition):
            fh.write(f"{dataset.user_ids[u]}\t{dataset.item_ids[i]}\t{PARTITION_NAMES[int(p)]}\n")


def load_split(path, dataset: Dataset) -> Dataset:
    """Attach partitions from a sidecar file; every observation must be covered."""
    uidx = {x: n for n, x in enumerate(dataset.user_ids)}
    iidx = {x: n for n, x in enumerate(dataset.item_ids)}
    row_of = {(int(u), int(i)): n for n, (u, i) in enumerate(zip(dataset.users, dataset.items))}
    part = np.full(len(dataset), UNASSIGNED, dtype=np.int8)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3 or fields[2] not in PARTITION_CODES:
                raise DataError(f"split line {lineno}: expected user, item, train|valid|test")
            key = (uidx.get(fields[0]), iidx.get(fields[1]))
            if key not in row_of:
                raise DataError(f"split line {lineno}: unknown observation {fields[0]}, {fields[1]}")
            part[row_of[key]] = PARTITION_CODES[fields[2]]
    if (part == UNASSIGNED).any():
        raise DataError("split file does not cover every observation")
    return Dataset(dataset.user_ids, dataset.item_ids, dataset.aspects, dataset.users,
                   dataset.items, dataset.values, part, dataset.provenance, dataset.rating_bounds)


def filter_min_observations(dataset: Dataset, min_obs: int = 5) -> Dataset:
    """Drop users and items with fewer than ``min_obs`` observations, to a fixed point."""
    keep = np.ones(len(dataset), dtype=bool)
    while True:
        ucount = np.bincount(dataset.users[keep], minlength=dataset.n_users)
        icount = np.bincount(dataset.items[keep], minlength=dataset.n_items)
        new_keep = keep & (ucount[dataset.users] >= min_obs) & (icount[dataset.items] >= min_obs)
        if new_keep.sum() == keep.sum():
            break
        keep = new_keep
    if not keep.any():
        raise DataError(f"no observations survive filtering at min_obs={min_obs}")
    if keep.all():
        return dataset
    return dataset.subset(keep)


def split_counts(n: int, fractions=(0.70, 0.15, 0.15), rng=None) -> tuple:
    """Per-user partition sizes by largest remainder.

    Floors of ``n * fraction`` first; leftover slots go to the largest
    fractional parts.  Equal remainders are resolved in train, valid, test
    order, or in a random order when ``rng`` is given so that no partition
    is favoured across users.  A lone observation always lands in train.
    """
    quotas = [n * f for f in fractions]
    counts = [int(math.floor(q)) for q in quotas]
    tiebreak = list(range(3)) if rng is None else rng.permutation(3).tolist()
    rema = sorted(range(3), key=lambda k: (-round(quotas[k] - counts[k], 9), tiebreak[k]))
    for k in rema[: n - sum(counts)]:
        counts[k] += 1
    if n >= 1 and counts[0] == 0:
        donor = 1 if counts[1] >= counts[2] else 2
        counts[donor] -= 1
        counts[0] += 1
    return tuple(counts)


def split(dataset: Dataset, fractions=(0.70, 0.15, 0.15), seed: int = 0) -> Dataset:
    """Per-user stratified random train/valid/test assignment."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    part = np.empty(len(dataset), dtype=np.int8)
    order = np.argsort(dataset.users, kind="stable")
    bounds = np.flatnonzero(np.diff(dataset.users[order])) + 1
    for rows in np.split(order, bounds):
        if rows.size == 0:
            continue
        n_tr, n_va, _ = split_counts(rows.size, fractions, rng)
        perm = rng.permutation(rows)
        part[perm[:n_tr]] = TRAIN
        part[perm[n_tr:n_tr + n_va]] = VALID
        part[perm[n_tr + n_va:]] = TEST
    return Dataset(dataset.user_ids, dataset.item_ids, dataset.aspects, dataset.users,
                   dataset.items, dataset.values, part, dataset.provenance, dataset.rating_bounds)


def estimate_global_covariance(values, floor: float = 1e-6, aspects=None) -> np.ndarray:
    """Pairwise-complete sample covariance, projected to SPD by eigenvalue flooring.

    ``values`` is ``(n, K)`` with NaN for missing slots.  Entry ``(k, l)`` uses
    the rows where both aspects are present, with means taken over those
    same rows and denominator ``n_kl - 1``.
    """
    x = np.asarray(values, dtype=float)
    k = x.shape[1]
    present = ~np.isnan(x)
    counts = present.sum(axis=0)
    for a in range(k):
        if counts[a] < 2:
            name = aspects[a] if aspects is not None else a
            raise DataError(f"aspect {name!r} has fewer than 2 observations")
    cov = np.empty((k, k))
    for a in range(k):
        for b in range(a, k):
            both = present[:, a] & present[:, b]
            n = int(both.sum())
            if n < 2:
                cov[a, b] = cov[b, a] = 0.0
                continue
            xa = x[both, a] - x[both, a].mean()
            xb = x[both, b] - x[both, b].mean()
            cov[a, b] = cov[b, a] = float(xa @ xb) / (n - 1)
    cov = 0.5 * (cov + cov.T)
    w, q = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    out = (q * w) @ q.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# synthetic data from a planted model
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_users: int = 200
    n_items: int = 100
    n_aspects: int = 4
    latent_dim: int = 5
    density: float = 0.5
    lam: float = 0.5
    covariance: str = "planted"   # "planted", "identity" or "zero"
    noise_scale: float = 0.6      # marginal std of planted rating noise
    correlation: float = 0.8      # strength of the planted aspect coupling
    mean_rating: float = 3.0
    signal_scale: float = 1.0     # std of the planted mean around mean_rating
    noise_spread: float = 0.0     # log-normal spread of per-entity noise scale
    clip: bool = True
    seed: int = 0


def _planted_factor(rng, k, scale, strength):
    # One dominant loading direction per entity plus isotropic remainder.
    # Overall (aspect 0) always loads on it, so the strongest Overall
    # correlate is the aspect with the largest loading magnitude.
    load = rng.uniform(0.2, 1.0, size=k) * rng.choice([-1.0, 1.0], size=k)
    load[0] = 1.0
    load /= np.linalg.norm(load)
    cov = strength * np.outer(load, load) * k + (1.0 - strength) * np.eye(k)
    d = np.sqrt(np.diag(cov))
    cov = cov / np.outer(d, d) * scale ** 2
    w, q = np.linalg.eigh(cov)
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


def synthesize_dataset(cfg: SynthConfig):
    """Sample ratings from a planted PMTF model.

    Returns ``(dataset, truth)``.  Latent dimension 0 of the planted model is a
    constant offset carrying ``mean_rating``; the remaining dimensions are
    Gaussian with per-factor std chosen so the mean of each aspect varies
    across (user, item) with std ``signal_scale``.
    """
    rng = np.random.default_rng(cfg.seed)
    m, n, k, d = cfg.n_users, cfg.n_items, cfg.n_aspects, cfg.latent_dim
    if min(m, n, k, d) < 1 or not 0.0 < cfg.density <= 1.0:
        raise ValueError("invalid synthetic dimensions or density")

    u = np.zeros((m, d))
    v = np.zeros((n, d))
    w = np.zeros((k, d))
    u[:, 0] = 1.0
    v[:, 0] = 1.0
    w[:, 0] = cfg.mean_rating
    if d > 1 and cfg.signal_scale > 0:
        per = (cfg.signal_scale ** 2 / (d - 1)) ** (1.0 / 6.0)
        u[:, 1:] = rng.normal(0.0, per, size=(m, d - 1))
        v[:, 1:] = rng.normal(0.0, per, size=(n, d - 1))
        w[:, 1:] = rng.normal(0.0, per, size=(k, d - 1))

    if cfg.covariance == "planted":
        lu = np.stack([_planted_factor(rng, k, cfg.noise_scale, cfg.correlation) for _ in range(m)])
        li = np.stack([_planted_factor(rng, k, cfg.noise_scale, cfg.correlation) for _ in range(n)])
        if cfg.noise_spread > 0:
            lu *= np.exp(cfg.noise_spread * rng.standard_normal(m))[:, None, None]
            li *= np.exp(cfg.noise_spread * rng.standard_normal(n))[:, None, None]
    elif cfg.covariance == "identity":
        lu = np.broadcast_to(np.eye(k), (m, k, k)).copy()
        li = np.broadcast_to(np.eye(k), (n, k, k)).copy()
    elif cfg.covariance == "zero":
        lu = np.zeros((m, k, k))
        li = np.zeros((n, k, k))
    else:
        raise ValueError(f"unknown covariance kind {cfg.covariance!r}")
    truth = PmtfModel(u, v, w, lu, li, lam=cfg.lam, jitter=0.0)

    # Each user rates round(density * n) items (at least 2 when possible).
    per_user = max(min(n, 2), int(round(cfg.density * n)))
    users, items = [], []
    for uu in range(m):
        chosen = np.sort(rng.choice(n, size=per_user, replace=False))
        users.extend([uu] * per_user)
        items.extend(chosen.tolist())
    users = np.array(users, dtype=np.int64)
    items = np.array(items, dtype=np.int64)

    mean = truth.predict_all(users, items)
    su = covariance_from_factor(lu[users], 0.0)
    si = covariance_from_factor(li[items], 0.0)
    cov = cfg.lam * su + (1.0 - cfg.lam) * si
    w_, q_ = np.linalg.eigh(cov)
    root = q_ * np.sqrt(np.clip(w_, 0.0, None))[:, None, :]
    noise = np.einsum("nab,nb->na", root, rng.standard_normal((len(users), k)))
    values = mean + noise
    bounds = None
    if cfg.clip:
        values = np.clip(values, 1.0, 5.0)
        bounds = (1.0, 5.0)

    aspects = ["Overall"] + [f"Aspect{a}" for a in range(1, k)]
    ds = Dataset([f"u{x}" for x in range(m)], [f"i{x}" for x in range(n)], aspects,
                 users, items, values, provenance="synthetic", rating_bounds=bounds)
    return ds, truth
