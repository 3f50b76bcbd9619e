"""Command line entry point: ``dmrank {train,evaluate,predict,explain,verify,synth}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure,
4 training divergence.

Heavy imports happen after argument parsing so ``--threads`` can cap the
BLAS thread pools before numpy loads.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3
EXIT_DIVERGED = 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "BLIS_NUM_THREADS", "NUMEXPR_NUM_THREADS")

# flag name -> TrainConfig field
_TRAIN_FLAGS = {
    "dim": "latent_dim", "lr": "learning_rate", "lam": "lam", "margin": "margin",
    "batch": "batch_size", "max_iters": "max_iters", "eval_every": "eval_every",
    "patience": "patience", "seed": "seed", "jitter": "jitter", "nu": "nu",
    "sigma_u": "sigma_u", "sigma_v": "sigma_v", "sigma_w": "sigma_w",
    "prior_strength": "prior_strength", "clip_norm": "clip_norm",
    "covariance_warmup": "covariance_warmup",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmrank", description="Directional multi-aspect ranking.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS and worker threads (default: library choice)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="fit a model")
    t.add_argument("--data", required=True, help="ratings TSV")
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--log", help="training log, one JSON record per evaluation "
                                 "(default: OUT.log.jsonl)")
    t.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    t.add_argument("--split-file", help="reuse an existing split instead of drawing one")
    t.add_argument("--split-seed", type=int, default=None, help="split seed (default: --seed)")
    t.add_argument("--min-obs", type=int, default=5, help="min observations per user and item")
    t.add_argument("--fractions", type=_float_list, default=[0.70, 0.15, 0.15],
                   help="train,valid,test fractions")
    t.add_argument("--dim", type=int, help="latent dimension d (default 10)")
    t.add_argument("--lr", type=float, help="AdaGrad learning rate (default 0.03)")
    t.add_argument("--lambda", dest="lam", type=float, help="user/item covariance mix (default 0.5)")
    t.add_argument("--margin", type=float, help="line-integral margin xi (default 0.2)")
    t.add_argument("--margin-grid", type=_float_list,
                   help="train once per margin and keep the best on validation")
    t.add_argument("--batch", type=int, help="triples per phase (default 2000)")
    t.add_argument("--max-iters", type=int, help="iteration cap (default 40000)")
    t.add_argument("--eval-every", type=int, help="iterations between validations (default 200)")
    t.add_argument("--patience", type=int, help="validations without improvement (default 5)")
    t.add_argument("--seed", type=int, help="training seed (default 0)")
    t.add_argument("--jitter", type=float, help="covariance jitter epsilon (default 1e-6)")
    t.add_argument("--nu", type=float, help="NIW degrees of freedom (default K+2)")
    t.add_argument("--sigma-u", type=float, help="prior std of U")
    t.add_argument("--sigma-v", type=float, help="prior std of V")
    t.add_argument("--sigma-w", type=float, help="prior std of W")
    t.add_argument("--prior-strength", type=float, help="multiplier on every prior term")
    t.add_argument("--clip-norm", type=float, help="global gradient norm clip")
    t.add_argument("--covariance-warmup", type=int, help="iterations before covariance updates")
    t.add_argument("--dmr-i", action="store_true", help="freeze covariances at the identity")
    t.add_argument("--implicit", action="store_true", help="rated-vs-unrated triples")
    t.add_argument("--no-deterministic", action="store_true",
                   help="allow completion-order reduction across workers")

    e = sub.add_parser("evaluate", help="report ranking, accuracy, confidence and explanations")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--split-file", help="default: MODEL.split.tsv")
    e.add_argument("--min-obs", type=int, default=5)
    e.add_argument("--partition", choices=["train", "valid", "test"], default="test")
    e.add_argument("--ks", type=_int_list, default=[10, 50], help="NDCG cutoffs")
    e.add_argument("--threshold", type=float, default=4.0, help="MAP relevance threshold")
    e.add_argument("--candidates", choices=["partition", "all"], default="partition")
    e.add_argument("--buckets", type=int, default=10, help="confidence buckets")
    e.add_argument("--pairs", type=int, default=None, help="sample this many pairs (default all)")
    e.add_argument("--seed", type=int, default=0, help="seed for pair and random-baseline draws")
    e.add_argument("--format", choices=["text", "jsonl"], default="text")
    e.add_argument("--out", help="write the report here instead of stdout")

    pr = sub.add_parser("predict", help="predicted rating vectors")
    pr.add_argument("--model", required=True)
    pr.add_argument("--user", required=True)
    pr.add_argument("--item", required=True, nargs="+")

    x = sub.add_parser("explain", help="aspects most correlated with Overall")
    x.add_argument("--model", required=True)
    x.add_argument("--user", required=True)
    x.add_argument("--item", required=True)
    x.add_argument("--top", type=int, default=1)

    vf = sub.add_parser("verify", help="run the numerical oracle suites")
    vf.add_argument("--seed", type=int, default=0)
    vf.add_argument("--quick", action="store_true", help="fewer random instances")
    vf.add_argument("--inject-bug", action="store_true",
                    help="perturb analytic gradients to confirm the suite can fail")

    s = sub.add_parser("synth", help="write a planted synthetic dataset")
    s.add_argument("--out", required=True, help="ratings TSV")
    s.add_argument("--truth", help="ground-truth checkpoint (default: OUT.truth.npz)")
    s.add_argument("--users", type=int, default=200)
    s.add_argument("--items", type=int, default=100)
    s.add_argument("--aspects", type=int, default=4)
    s.add_argument("--dim", type=int, default=5)
    s.add_argument("--density", type=float, default=0.5)
    s.add_argument("--covariance", choices=["planted", "identity", "zero"], default="planted")
    s.add_argument("--noise", type=float, default=0.6)
    s.add_argument("--correlation", type=float, default=0.8)
    s.add_argument("--noise-spread", type=float, default=0.0)
    s.add_argument("--no-clip", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def train_config_from(args):
    """Built-in defaults, then the config file, then explicit flags."""
    from dataclasses import fields
    from .trainer import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(cfg)
    for flag, name in _TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[name] = v
    if args.dmr_i:
        values["dmr_i"] = True
    if args.implicit:
        values["implicit"] = True
    if args.no_deterministic:
        values["deterministic"] = False
    if args.threads:
        values.setdefault("workers", args.threads)
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _prepare_dataset(path, min_obs, split_file=None, fractions=None, split_seed=0):
    from .data import filter_min_observations, load_ratings, load_split, split

    ds = filter_min_observations(load_ratings(path), min_obs)
    if split_file:
        return load_split(split_file, ds)
    return split(ds, fractions, seed=split_seed)


def align_to_checkpoint(ds, ckpt):
    """Reindex ``ds`` to the checkpoint's id order, dropping unknown ids."""
    import numpy as np
    from .data import Dataset
    from .errors import DataError

    if list(ds.aspects) != list(ckpt.aspects):
        raise DataError(f"aspects {ds.aspects} do not match the model's {ckpt.aspects}")
    uidx = {x: n for n, x in enumerate(ckpt.user_ids)}
    iidx = {x: n for n, x in enumerate(ckpt.item_ids)}
    users = np.array([uidx.get(ds.user_ids[u], -1) for u in ds.users])
    items = np.array([iidx.get(ds.item_ids[i], -1) for i in ds.items])
    keep = (users >= 0) & (items >= 0)
    if not keep.any():
        raise DataError("no observation matches the model's users and items")
    dropped = int((~keep).sum())
    if dropped:
        logging.getLogger(__name__).warning("dropped %d observations with unknown ids", dropped)
    return Dataset(list(ckpt.user_ids), list(ckpt.item_ids), list(ds.aspects),
                   users[keep], items[keep], ds.values[keep],
                   None if ds.partition is None else ds.partition[keep],
                   ds.provenance, ds.rating_bounds)


def _lookup(ids, key, what):
    from .errors import DataError
    try:
        return list(ids).index(key)
    except ValueError:
        raise DataError(f"unknown {what} id {key!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from dataclasses import replace
    from .data import write_split
    from .model import Checkpoint, save_checkpoint
    from .trainer import train

    config = train_config_from(args)
    if abs(sum(args.fractions) - 1.0) > 1e-9 or len(args.fractions) != 3:
        raise UsageError("--fractions needs three numbers summing to 1")
    split_seed = config.seed if args.split_seed is None else args.split_seed
    ds = _prepare_dataset(args.data, args.min_obs, args.split_file, args.fractions, split_seed)
    log_path = args.log or args.out + ".log.jsonl"
    margins = args.margin_grid or [config.margin]
    best = None
    for xi in margins:
        cfg = replace(config, margin=xi)
        path = log_path if len(margins) == 1 else f"{log_path}.xi{xi:g}"
        result = train(ds, cfg, log_path=path)
        print(f"margin={xi:g} best_iteration={result.best_iteration} "
              f"valid_ndcg50={result.best_metric:.6f} iterations={result.iterations}")
        if best is None or result.best_metric > best[1].best_metric:
            best = (xi, result)
    xi, result = best
    save_checkpoint(args.out, Checkpoint(result.model, result.hyper, ds.user_ids, ds.item_ids,
                                         ds.aspects))
    write_split(args.out + ".split.tsv", ds)
    print(f"saved {args.out} (margin={xi:g}, valid_ndcg50={result.best_metric:.6f})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    import numpy as np
    from .data import PARTITION_CODES
    from .evaluation import (EvaluationReport, avg_rating_difference, confidence_report,
                             model_selector, pairwise_accuracy, random_selector,
                             ranking_metrics, sample_pairs)
    from .model import load_checkpoint

    if args.buckets < 1:
        raise UsageError("--buckets must be >= 1")
    ckpt = load_checkpoint(args.model)
    split_file = args.split_file or args.model + ".split.tsv"
    ds = align_to_checkpoint(_prepare_dataset(args.data, args.min_obs, split_file), ckpt)
    part = PARTITION_CODES[args.partition]
    model = ckpt.model
    xi = ckpt.hyper.margin if ckpt.hyper is not None else 0.2
    rng = np.random.default_rng(args.seed)
    ranking = ranking_metrics(model, ds, part, ks=tuple(args.ks), threshold=args.threshold,
                              candidates=args.candidates)
    pairs = sample_pairs(ds, part, args.pairs, rng)
    report = EvaluationReport(
        ranking=ranking,
        accuracy=pairwise_accuracy(model, pairs),
        confidence=confidence_report(model, pairs, xi, args.buckets),
        explanation=avg_rating_difference(ds, model_selector(model), part),
        explanation_random=avg_rating_difference(ds, random_selector(ds.n_aspects, rng), part),
    )
    text = report.to_text() if args.format == "text" else report.to_jsonl()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .model import load_checkpoint

    ckpt = load_checkpoint(args.model)
    u = _lookup(ckpt.user_ids, args.user, "user")
    print("\t".join(["item_id", *ckpt.aspects]))
    for item in args.item:
        i = _lookup(ckpt.item_ids, item, "item")
        pred = ckpt.model.predict_ratings(u, i)
        print("\t".join([item, *(f"{v:.4f}" for v in pred)]))
    return EXIT_OK


def cmd_explain(args) -> int:
    from .evaluation import (explanation_scores, explanation_text, has_strong_correlation,
                             rank_explanations)
    from .model import load_checkpoint

    if args.top < 1:
        raise UsageError("--top must be >= 1")
    ckpt = load_checkpoint(args.model)
    u = _lookup(ckpt.user_ids, args.user, "user")
    i = _lookup(ckpt.item_ids, args.item, "item")
    cov = ckpt.model.rating_covariance(u, i)
    scores = explanation_scores(cov)
    top = rank_explanations(cov, args.top)
    for k in top:
        print(f"{ckpt.aspects[k]}\tcorrelation={scores[k]:.4f}")
    if not has_strong_correlation(ckpt.model, u, i):
        print("note: no strong correlation with Overall; aspect chosen by index tie-break")
    print(explanation_text(args.item, [ckpt.aspects[k] for k in top]))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    sizes = dict(n_quad=50, n_grad=10, n_metric=200) if args.quick else {}
    results = run_all(args.seed, inject_bug=args.inject_bug, **sizes)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import SynthConfig, synthesize_dataset, write_ratings
    from .model import Checkpoint, save_checkpoint

    try:
        cfg = SynthConfig(n_users=args.users, n_items=args.items, n_aspects=args.aspects,
                          latent_dim=args.dim, density=args.density, covariance=args.covariance,
                          noise_scale=args.noise, correlation=args.correlation,
                          noise_spread=args.noise_spread, clip=not args.no_clip, seed=args.seed)
        ds, truth = synthesize_dataset(cfg)
    except ValueError as exc:
        raise UsageError(str(exc))
    write_ratings(args.out, ds)
    save_checkpoint(args.truth or args.out + ".truth.npz",
                    Checkpoint(truth, None, ds.user_ids, ds.item_ids, ds.aspects))
    print(f"wrote {len(ds)} observations to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
    "explain": cmd_explain, "verify": cmd_verify, "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("dmrank: error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import DataError, QuadratureError, TrainingDivergence

    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dmrank: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"dmrank: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except QuadratureError as exc:
        print(f"dmrank: verification error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"dmrank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
