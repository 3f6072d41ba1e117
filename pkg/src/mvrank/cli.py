"""Command-line interface.

Subcommands cover the whole pipeline: ``ingest`` (parse/filter/split),
``train``, ``evaluate``, ``inspect-covariance``, ``synth`` and
``grad-check``. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure. Every artifact-writing command drops a JSON manifest
with a config snapshot and input-file hashes for reproducibility.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, covlinalg, data, evaluation, gradcheck
from .checkpoint import load_checkpoint
from .errors import (DataError, DegenerateCovarianceError, InvalidInputError,
                     MvrankError, NumericError, UndefinedMetricError)
from .model import Hyperparams
from .trainer import TrainConfig, em_fit

MODEL_MODES = {
    "bpmr": "bpmr-rank",
    "pmtf": "pmtf-predict",
    "ptf": "ptf-baseline",
    "bpr": "bpr-baseline",
}

_TRAIN_CONFIG_KEYS = ("max_em_steps", "patience", "validation_tolerance",
                      "log_every", "threads", "bpr_aspect", "ptf_noise_sigma2",
                      "min_personal_obs", "val_sample_size", "cov_warmup_steps")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# --- config files ----------------------------------------------------------


def parse_config(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    try:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InvalidInputError(f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                out[key.strip()] = value.strip()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise InvalidInputError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def apply_config(entries: dict[str, str], hp: Hyperparams,
                 tc: TrainConfig) -> None:
    hp_fields = {f.name for f in dataclasses.fields(Hyperparams)}
    for key, value in entries.items():
        if key == "aspect_weights":
            hp.aspect_weights = np.array([float(x) for x in value.split(",")])
        elif key in hp_fields:
            setattr(hp, key, _coerce(value, getattr(hp, key)))
        elif key in _TRAIN_CONFIG_KEYS:
            setattr(tc, key, _coerce(value, getattr(tc, key)))
        else:
            raise InvalidInputError(f"unknown config key {key!r}")


# --- manifests -------------------------------------------------------------


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, command: str, config: dict, inputs: list,
                   outputs: list, seed, started: float) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "input_sha256": {os.path.basename(str(p)): _sha256(p) for p in inputs},
        "outputs": [os.path.basename(str(p)) for p in outputs],
        "timing_seconds": round(time.time() - started, 3),
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


# --- dataset plumbing ------------------------------------------------------


# Scale bounds were enforced when the splits were first ingested; re-reads
# of our own split files skip the check so continuous data round-trips.
_NO_SCALE = (-np.inf, np.inf)


def _load_aligned_splits(directory, user_ids, item_ids, aspects,
                         names=("train", "val", "test")):
    out = []
    for name in names:
        ds = data.ingest(os.path.join(directory, f"{name}.tsv"),
                         rating_scale=_NO_SCALE)
        if ds.aspects != list(aspects):
            raise DataError(f"{name} split aspects {ds.aspects} do not match "
                            f"the checkpoint aspects {list(aspects)}")
        out.append(data.align(ds, user_ids, item_ids))
    return out


# --- subcommands -----------------------------------------------------------


def _parse_rating_scale(text: str) -> tuple[float, float]:
    if text.lower() == "none":
        return (-np.inf, np.inf)
    parts = text.split(",")
    if len(parts) != 2:
        raise InvalidInputError("rating scale must be 'lo,hi' or 'none'")
    lo, hi = float(parts[0]), float(parts[1])
    if not lo < hi:
        raise InvalidInputError("rating scale lower bound must be below the upper")
    return lo, hi


def cmd_ingest(args) -> int:
    started = time.time()
    ds = data.ingest(args.input, delimiter=args.delimiter,
                     missing_token=args.missing_token,
                     rating_scale=_parse_rating_scale(args.rating_scale))
    ds = data.filter_min_observations(ds, args.min_count)
    spec = data.SplitSpec(args.train_frac, args.val_frac, args.test_frac,
                          seed=args.seed)
    train, val, test, reassigned = data.split(ds, spec)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for name, part in (("train", train), ("val", val), ("test", test)):
        path = os.path.join(args.out, f"{name}.tsv")
        data.write_dataset(part, path, delimiter=args.delimiter,
                           missing_token=args.missing_token)
        outputs.append(path)
    manifest = os.path.join(args.out, "manifest.json")
    write_manifest(manifest, "ingest",
                   {"min_count": args.min_count, "splits": [spec.train_frac,
                    spec.val_frac, spec.test_frac], "reassigned_to_train": reassigned,
                    "n_users": ds.n_users, "n_items": ds.n_items,
                    "n_observations": len(ds.observations)},
                   [args.input], outputs, args.seed, started)
    print(f"ingest: {len(ds.observations)} observations, {ds.n_users} users, "
          f"{ds.n_items} items -> {args.out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    hp = Hyperparams()
    tc = TrainConfig(mode=MODEL_MODES[args.model], hp=hp,
                     checkpoint_path=args.out, log_path=args.log,
                     threads=args.threads)
    config_entries: dict[str, str] = {}
    if args.config is not None:
        config_entries = parse_config(args.config)
        apply_config(config_entries, hp, tc)
    if args.seed is not None:
        hp.seed = args.seed
    if args.max_em_steps is not None:
        tc.max_em_steps = args.max_em_steps
    train_path = os.path.join(args.data, "train.tsv")
    val_path = os.path.join(args.data, "val.tsv")
    train = data.ingest(train_path, rating_scale=_NO_SCALE)
    val = data.align(data.ingest(val_path, rating_scale=_NO_SCALE),
                     train.user_ids, train.item_ids)
    model, history = em_fit(tc, train, val)
    manifest = args.out + ".manifest.json"
    write_manifest(manifest, "train",
                   {"model": args.model, "mode": tc.mode,
                    "config_file": config_entries,
                    "hyperparams": dataclasses.asdict(hp) | {
                        "aspect_weights": None if hp.aspect_weights is None
                        else [float(x) for x in hp.aspect_weights]},
                    "max_em_steps": tc.max_em_steps, "em_steps_run": len(history),
                    "threads": tc.threads},
                   [train_path, val_path], [args.out], hp.seed, started)
    final = history[-1].val_metric if history else float("nan")
    print(f"train: {len(history)} EM steps, final validation metric {final:.6f}, "
          f"checkpoint -> {args.out}")
    return 0


def _mec_rows(model, test, selectors, seed):
    pairs = evaluation.pair_predictions(model, test)
    rows = []
    for selector in selectors:
        rng = np.random.default_rng(seed)
        value, n_used, n_skipped = evaluation.mec(pairs, selector, rng)
        rows.append([f"mec_{selector}", model.aspects[0], "", repr(value), n_used])
    return rows


def cmd_evaluate(args) -> int:
    started = time.time()
    model = load_checkpoint(args.ckpt)
    train, val, test = _load_aligned_splits(args.data, model.user_ids,
                                            model.item_ids, model.aspects)
    if not test.observations:
        raise DataError("test split is empty")
    ks = sorted({int(x) for x in args.ndcg_k.split(",")})
    observed = (train.observed_pairs() | val.observed_pairs()
                | test.observed_pairs())

    metric_rows = []
    group_rows = []
    n_items = len(model.item_ids)
    for aspect_idx, aspect_name in enumerate(model.aspects):
        # A fresh generator per aspect keeps filler items identical across aspects.
        rng = np.random.default_rng(args.seed)
        cands = evaluation.build_candidates(test, observed, n_items, rng,
                                            list_size=args.candidates,
                                            aspect=aspect_idx,
                                            binary_gain=args.binary_gain)
        means, per_user = evaluation.evaluate_ranking(model, cands, ks, aspect_idx)
        for k in ks:
            metric_rows.append(["ndcg", aspect_name, k, repr(means[k]), len(cands)])
        if aspect_idx == 0:
            top_k = max(ks)
            user_metric = {u: vals[top_k] for u, vals in per_user.items()}
            counts = train.user_observation_counts()
            for row in evaluation.group_by_activity(user_metric, counts):
                group_rows.append([row["bucket_lo"], row["bucket_hi"], row["n_users"],
                                   "" if row["ndcg"] is None else repr(row["ndcg"])])

    selectors = (list(evaluation.MEC_SELECTORS) if args.mec_selector == "all"
                 else [args.mec_selector])
    metric_rows.extend(_mec_rows(model, test, selectors, args.seed))

    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "aspect", "k", "value", "n_users"])
        writer.writerows(metric_rows)
    groups_path = os.path.join(args.out, "groups.csv")
    with open(groups_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bucket_lo", "bucket_hi", "n_users", "ndcg"])
        writer.writerows(group_rows)
    manifest = os.path.join(args.out, "manifest.json")
    write_manifest(manifest, "evaluate",
                   {"ndcg_k": ks, "candidates": args.candidates,
                    "mec_selector": args.mec_selector,
                    "binary_gain": args.binary_gain},
                   [args.ckpt], [metrics_path, groups_path], args.seed, started)
    print(f"evaluate: wrote {metrics_path} and {groups_path}")
    return 0


def cmd_inspect_covariance(args) -> int:
    started = time.time()
    model = load_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    user_index = {uid: idx for idx, uid in enumerate(model.user_ids)}
    item_index = {iid: idx for idx, iid in enumerate(model.item_ids)}

    matrices = [("global", model.cov.sigma_global())]
    for uid in args.user or []:
        if uid not in user_index:
            raise DataError(f"unknown user id {uid!r}")
        matrices.append((f"user_{uid}", model.cov.sigma_user(user_index[uid])))
    for iid in args.item or []:
        if iid not in item_index:
            raise DataError(f"unknown item id {iid!r}")
        matrices.append((f"item_{iid}", model.cov.sigma_item(item_index[iid])))

    outputs = []
    mi_rows = []
    for name, sigma in matrices:
        corr = covlinalg.correlation_from_covariance(sigma)
        cov_path = os.path.join(args.out, f"{name}_covariance.csv")
        corr_path = os.path.join(args.out, f"{name}_correlation.csv")
        covlinalg.write_matrix_csv(cov_path, sigma, model.aspects)
        covlinalg.write_matrix_csv(corr_path, corr, model.aspects)
        outputs.extend([cov_path, corr_path])
        lhs, rhs = covlinalg.theorem1_gap(sigma)
        mi_rows.append([name, repr(lhs), repr(rhs)])
    mi_path = os.path.join(args.out, "mi_report.csv")
    with open(mi_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["matrix", "total_correlation", "determinant_bound"])
        writer.writerows(mi_rows)
    outputs.append(mi_path)
    write_manifest(os.path.join(args.out, "manifest.json"), "inspect-covariance",
                   {"users": args.user or [], "items": args.item or []},
                   [args.ckpt], outputs, None, started)
    print(f"inspect-covariance: wrote {len(outputs)} files to {args.out}")
    return 0


def cmd_synth(args) -> int:
    started = time.time()
    correlations = None
    if args.overall_correlations:
        correlations = [float(x) for x in args.overall_correlations.split(",")]
    cfg = data.SyntheticConfig(
        m=args.M, n=args.N, k=args.K, d=args.d, lam=args.lam,
        density=args.density, discretize=args.discretize, seed=args.seed,
        overall_correlations=correlations,
        preference_strength=args.preference_strength)
    ds, truth = data.generate_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    ds_path = os.path.join(args.out, "dataset.tsv")
    data.write_dataset(ds, ds_path)
    aspect_names = ds.aspects
    cov_path = os.path.join(args.out, "truth_global_covariance.csv")
    corr_path = os.path.join(args.out, "truth_pooled_correlation.csv")
    covlinalg.write_matrix_csv(cov_path, truth.sigma_global, aspect_names)
    covlinalg.write_matrix_csv(corr_path, truth.pooled_correlation, aspect_names)
    truth_path = os.path.join(args.out, "truth.json")
    with open(truth_path, "w") as fh:
        json.dump({"U": truth.U.tolist(), "V": truth.V.tolist(),
                   "W": truth.W.tolist(),
                   "pooled_covariance": truth.pooled_covariance.tolist()},
                  fh, sort_keys=True)
    write_manifest(os.path.join(args.out, "manifest.json"), "synth",
                   dataclasses.asdict(cfg), [],
                   [ds_path, cov_path, corr_path, truth_path], args.seed, started)
    print(f"synth: {len(ds.observations)} observations -> {ds_path}")
    return 0


def cmd_grad_check(args) -> int:
    names = gradcheck.OBJECTIVES if args.objective == "all" else (args.objective,)
    writer = csv.writer(sys.stdout)
    writer.writerow(["objective", "block", "max_rel_err"])
    worst = 0.0
    for name in names:
        result = gradcheck.run_check(name, args.seed)
        for block in sorted(result.errors):
            writer.writerow([name, block, repr(float(result.errors[block]))])
        worst = max(worst, result.max_error)
    if worst > args.tolerance:
        raise NumericError(f"max relative error {worst:.3e} exceeds "
                           f"tolerance {args.tolerance:g}")
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvrank",
                     description="Multi-aspect preference models with learned "
                                 "aspect covariances.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse, filter and split a rating file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-frac", type=float, default=0.70)
    p.add_argument("--val-frac", type=float, default=0.15)
    p.add_argument("--test-frac", type=float, default=0.15)
    p.add_argument("--delimiter", default="\t")
    p.add_argument("--missing-token", default=data.MISSING_TOKEN)
    p.add_argument("--rating-scale", default="1,5",
                   help="'lo,hi' bounds for valid ratings, or 'none'")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fit a model on an ingested split directory")
    p.add_argument("--model", required=True, choices=sorted(MODEL_MODES))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-em-steps", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ndcg-k", default="10,20,50")
    p.add_argument("--candidates", type=int, default=evaluation.DEFAULT_LIST_SIZE)
    p.add_argument("--mec-selector", default="all",
                   choices=sorted(evaluation.MEC_SELECTORS) + ["all"])
    p.add_argument("--binary-gain", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-covariance",
                       help="dump learned covariance/correlation matrices")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--user", action="append")
    p.add_argument("--item", action="append")
    p.set_defaults(func=cmd_inspect_covariance)

    p = sub.add_parser("synth", help="generate a synthetic dataset with known truth")
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--d", type=int, default=5)
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--density", type=float, default=0.3)
    p.add_argument("--discretize", action="store_true")
    p.add_argument("--overall-correlations")
    p.add_argument("--preference-strength", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("grad-check",
                       help="finite-difference check of the analytic gradients")
    p.add_argument("--objective", default="all",
                   choices=sorted(gradcheck.OBJECTIVES) + ["all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=gradcheck.DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        print(parser.format_usage(), file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, UndefinedMetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, DegenerateCovarianceError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except MvrankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
