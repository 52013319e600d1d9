"""Command-line entry point: ``mambahawkes <command> [options]``.

Commands: simulate, train, score, fuse, eval, make-bundles. Every command
writes a resolved-config JSON next to its outputs. Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .archive import ArchiveError, file_sha256, load_archive
from .checkpoints import KIND_HAWKES, KIND_MHP, KIND_NOHP, load_hawkes, load_mhp, save_hawkes, save_mhp
from .fusion import (
    MODES,
    LIKELIHOOD_FIELD,
    FusionConfig,
    load_bundles,
    make_synthetic_bundles,
    predict,
    save_bundles,
    save_fusion,
    split_bundles,
    train_fusion,
)
from .hawkes import fit_hawkes, hawkes_loglik_batch
from .intensity import LOGLIK_MODES, NumericalError, QuadratureSpec
from .metrics import MetricReport
from .sequences import (
    HawkesGroundTruth,
    SequenceDataset,
    SequenceFormatError,
    load_jsonl,
    save_jsonl,
    simulate_dataset,
    split_dataset,
    truncate_dataset,
)
from .training import TrainConfig, evaluate_terms, train_model

logger = logging.getLogger("mambahawkes")

CSV_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- small IO helpers ---------------------------------------------------------------------
def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_csv(path, header: Sequence[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# format_version: {CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[dict]]:
    """Rows as dicts; ``#`` comment lines are skipped and the version is checked."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            if key.strip() == "format_version" and val.strip() != str(CSV_VERSION):
                raise DataError(f"{path}: unsupported CSV format_version {val.strip()}")
            continue
        if line.strip():
            body.append(line)
    if not body:
        raise DataError(f"{path}: missing CSV header")
    reader = csv.DictReader(body)
    return list(reader.fieldnames or []), list(reader)


def read_column(path, column: str, key: str = "id") -> dict:
    header, rows = read_csv(path)
    if key not in header or column not in header:
        raise DataError(f"{path}: expected columns {key!r} and {column!r}, found {header}")
    out = {}
    for i, r in enumerate(rows, start=1):
        try:
            out[r[key]] = float(r[column])
        except (TypeError, ValueError):
            raise DataError(f"{path}: row {i}: {column} is not a number") from None
    return out


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_config(path, allowed: Sequence[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise UsageError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
    return cfg


def merge(cfg: dict, overrides: Mapping) -> dict:
    out = dict(cfg)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def echo_config(path, command: str, resolved: Mapping) -> None:
    write_json(path, {"command": command, "version": __version__, "config": dict(resolved)})
    logger.info("resolved config: %s", json.dumps(resolved, sort_keys=True))


def _require_seed(args) -> int:
    if args.seed is None:
        raise UsageError(f"{args.command}: --seed is required for reproducibility")
    return int(args.seed)


def _matrix(text: str, name: str) -> np.ndarray:
    try:
        return np.asarray(json.loads(text), dtype=np.float64)
    except (json.JSONDecodeError, ValueError, TypeError):
        raise UsageError(f"--{name} must be a number or a JSON array") from None


def _load_dataset(path) -> SequenceDataset:
    try:
        return load_jsonl(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


# -- commands -------------------------------------------------------------------------------
def cmd_simulate(args) -> int:
    seed = _require_seed(args)
    out = Path(args.out)
    if args.model == "hawkes":
        if args.mu is None or args.alpha is None or args.beta is None:
            raise UsageError("simulate --model hawkes needs --mu, --alpha and --beta")
        mu = np.atleast_1d(_matrix(args.mu, "mu"))
        R = mu.size
        alpha = np.broadcast_to(_matrix(args.alpha, "alpha"), (R, R)).copy()
        beta = np.broadcast_to(_matrix(args.beta, "beta"), (R, R)).copy()
        try:
            truth = HawkesGroundTruth(mu, alpha, beta)
        except ValueError as exc:
            raise UsageError(f"invalid Hawkes parameters: {exc}") from None
        params = {"model": "hawkes", "mu": mu.tolist(), "alpha": alpha.tolist(), "beta": beta.tolist()}
        kw = {"truth": truth, "horizon": args.horizon, "max_events": args.max_events}
    else:
        if args.rate is None:
            raise UsageError("simulate --model poisson needs --rate")
        params = {"model": "poisson", "rate": args.rate, "num_types": args.num_types}
        kw = {"rate": args.rate, "horizon": args.horizon, "num_types": args.num_types}
    if args.count < 1:
        raise UsageError("--count must be positive")
    try:
        ds = simulate_dataset(args.model, args.count, seed, **kw)
    except ValueError as exc:
        raise UsageError(f"invalid generator parameters: {exc}") from None
    if args.truncate is not None:
        ds = truncate_dataset(ds, args.truncate)
    if args.split is not None:
        fr = [float(x) for x in args.split.split(",")]
        ds = split_dataset(ds, fr, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(ds, out)
    write_json(f"{out}.truth.json", {**params, "horizon": args.horizon})
    echo_config(f"{out}.config.json", "simulate",
                {**params, "horizon": args.horizon, "count": args.count, "seed": seed,
                 "max_events": args.max_events, "truncate": args.truncate, "split": args.split,
                 "out": str(out)})
    print(f"wrote {len(ds)} sequences ({ds.num_events} events) to {out}")
    return EXIT_OK


_TRAIN_FLAGS = ("lr", "batch_size", "epochs", "patience", "quad_nodes", "loglik_mode", "objective",
                "d_model", "d_state", "n_blocks", "d_hidden", "d_out", "first_delta", "val_fraction",
                "tie_beta", "max_iter")


def cmd_train(args) -> int:
    allowed = [f for f in TrainConfig.__dataclass_fields__]
    cfg = load_config(args.config, allowed)
    overrides = {k: getattr(args, k) for k in _TRAIN_FLAGS}
    overrides["variant"] = args.variant
    overrides["truncate"] = args.truncate
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = merge(cfg, overrides)
    if args.no_truncate:
        cfg["truncate"] = None
    if cfg.get("variant") != "hawkes" and "seed" not in cfg:
        raise UsageError("train: --seed (or a config seed) is required for reproducibility")
    try:
        tc = TrainConfig.from_dict(cfg)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"train: {exc}") from None
    ds = _load_dataset(args.data)
    if len(ds) == 0:
        raise DataError(f"{args.data}: no sequences")
    ds = truncate_dataset(ds, tc.truncate)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    resolved = {**tc.to_dict(), "data": str(args.data), "data_sha256": file_sha256(args.data)}
    if tc.variant == "hawkes":
        seqs = list(ds.subset("train")) if ds.split is not None else list(ds)
        fit = fit_hawkes(seqs, tie_beta=tc.tie_beta, max_iter=tc.max_iter, objective=tc.objective)
        digest = save_hawkes(out, fit.model, {"train": resolved})
        write_csv(f"{out}.log.csv", ["iteration", "objective"], enumerate(fit.history))
        summary = f"objective {fit.objective:.6f} after {fit.n_iter} iterations"
    else:
        result = train_model(ds, tc)
        digest = save_mhp(out, result.model, result.head, {"train": resolved})
        write_csv(f"{out}.log.csv", ["epoch", "train_nll", "val_ll_per_event", "best_val_ll_per_event"],
                  ([r["epoch"], r["train_nll"], r["val_ll_per_event"], r["best_val_ll_per_event"]]
                   for r in result.log))
        summary = f"best epoch {result.best_epoch}, val ll/event {result.log[-1]['best_val_ll_per_event']:.6f}"
    echo_config(f"{out}.config.json", "train", resolved)
    print(f"wrote {tc.variant} checkpoint {out} (sha256 {digest[:16]}); {summary}")
    return EXIT_OK


def cmd_score(args) -> int:
    kind, meta, _ = load_archive(args.checkpoint)
    train_cfg = meta.get("train", {})
    ds = _load_dataset(args.data)
    truncate = train_cfg.get("truncate") if args.truncate is None else args.truncate
    if args.no_truncate:
        truncate = None
    ds = truncate_dataset(ds, truncate)
    seqs = list(ds)
    mode = args.loglik_mode or train_cfg.get("loglik_mode", "marked")
    nodes = args.quad_nodes or train_cfg.get("quad_nodes", 16)
    if kind == KIND_HAWKES:
        model, _ = load_hawkes(args.checkpoint)
        if seqs and seqs[0].num_types != model.num_types:
            raise DataError(f"data has {seqs[0].num_types} types; checkpoint expects {model.num_types}")
        terms = hawkes_loglik_batch(model, seqs) if seqs else []
    elif kind in (KIND_MHP, KIND_NOHP):
        model, head, _ = load_mhp(args.checkpoint)
        if seqs and seqs[0].num_types != model.num_types:
            raise DataError(f"data has {seqs[0].num_types} types; checkpoint expects {model.num_types}")
        terms = evaluate_terms(model, head, seqs, QuadratureSpec(nodes), mode) if seqs else []
    else:
        raise DataError(f"{args.checkpoint}: cannot score with a {kind!r} archive")
    write_csv(args.out, ["id", "event_term", "nonevent_term", "total"],
              ([s.id, t.event_term, t.nonevent_term, t.total] for s, t in zip(seqs, terms)))
    echo_config(f"{args.out}.config.json", "score",
                {"checkpoint": str(args.checkpoint), "checkpoint_sha256": file_sha256(args.checkpoint),
                 "data": str(args.data), "truncate": truncate, "loglik_mode": mode, "quad_nodes": nodes,
                 "kind": kind})
    print(f"scored {len(seqs)} sequences with {kind} checkpoint -> {args.out}")
    return EXIT_OK


def _join_likelihoods(bundles, path, field: str) -> None:
    scores = read_column(path, "total")
    ids = {b.id for b in bundles}
    missing = [b.id for b in bundles if b.id not in scores]
    if missing:
        raise DataError(f"join on id failed: {len(missing)} of {len(bundles)} bundles have no likelihood in "
                        f"{path} ({len(set(scores) - ids)} unmatched rows in the CSV); first missing {missing[0]!r}")
    for b in bundles:
        setattr(b, field, scores[b.id])


def cmd_fuse(args) -> int:
    seed = _require_seed(args)
    allowed = [f for f in FusionConfig.__dataclass_fields__]
    cfg = merge(load_config(args.config, allowed),
                {"lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size,
                 "patience": args.patience, "alpha": args.alpha, "mode": args.mode, "seed": seed,
                 "weight_decay": args.weight_decay})
    try:
        fc = FusionConfig.from_dict(cfg)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"fuse: {exc}") from None
    try:
        bundles = load_bundles(args.bundles)
    except OSError as exc:
        raise DataError(f"cannot read {args.bundles}: {exc.strerror}") from None
    if not bundles:
        raise DataError(f"{args.bundles}: no bundles")
    if args.likelihoods is not None:
        _join_likelihoods(bundles, args.likelihoods, LIKELIHOOD_FIELD[fc.mode])
    if args.labels is not None:
        labels = read_column(args.labels, "label")
        missing = [b.id for b in bundles if b.id not in labels]
        if missing:
            raise DataError(f"join on id failed: {len(missing)} of {len(bundles)} bundles have no label")
        for b in bundles:
            b.target = labels[b.id]
    if any(b.target is None for b in bundles):
        raise DataError("every bundle needs a target (in the bundle file or via --labels)")
    rest, test = split_bundles(bundles, args.test_fraction, np.random.SeedSequence(seed).spawn(1)[0])
    result = train_fusion(rest, fc)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = save_fusion(out / "fusion.ckpt", result.head, {"train": fc.to_dict()})
    test_ids = {b.id for b in test}
    preds = predict(result.head, bundles)
    write_csv(out / "predictions.csv", ["id", "prediction"], ([b.id, float(p)] for b, p in zip(bundles, preds)))
    write_csv(out / "train_log.csv", ["epoch", "train_mse", "val_mse", "best_val_mse"],
              ([r["epoch"], r["train_mse"], r["val_mse"], r["best_val_mse"]] for r in result.log))
    rows = []
    for name, group in (("fit", rest), ("test", test)):
        if len(group) >= 2:
            y = np.array([b.target for b in group])
            yhat = np.array([p for b, p in zip(bundles, preds) if (b.id in test_ids) == (name == "test")])
            if np.ptp(y) > 0:
                r = MetricReport.compute(y, yhat)
                rows.append([name, r.n, r.nmse, r.src, r.plcc, r.mae])
    write_csv(out / "metrics.csv", ["split", "n", "nmse", "src", "plcc", "mae"], rows)
    echo_config(out / "config.json", "fuse",
                {**fc.to_dict(), "bundles": str(args.bundles), "bundles_sha256": file_sha256(args.bundles),
                 "likelihoods": args.likelihoods, "labels": args.labels, "test_fraction": args.test_fraction})
    summary = ", ".join(f"{r[0]} nMSE {r[2]:.4f}" for r in rows)
    print(f"fusion ({fc.mode}) checkpoint sha256 {digest[:16]}; {summary}")
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = read_column(args.pred, "prediction")
    labels = read_column(args.labels, "label")
    common = [k for k in preds if k in labels]
    only_p = len(preds) - len(common)
    only_l = len(labels) - len(common)
    if only_p or only_l or len(common) < 2:
        raise DataError(f"join on id: {len(common)} matched, {only_p} predictions without label, "
                        f"{only_l} labels without prediction")
    y = np.array([labels[k] for k in common])
    yhat = np.array([preds[k] for k in common])
    try:
        r = MetricReport.compute(y, yhat)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    rows = [[r.n, r.nmse, r.src, r.plcc, r.mae]]
    if args.out:
        write_csv(args.out, ["n", "nmse", "src", "plcc", "mae"], rows)
    else:
        print("n,nmse,src,plcc,mae")
        print(",".join(_fmt(v) for v in rows[0]))
    return EXIT_OK


def cmd_make_bundles(args) -> int:
    seed = _require_seed(args)
    lik = None
    ids = None
    if args.likelihoods is not None:
        scores = read_column(args.likelihoods, "total")
        ids = list(scores)
        lik = [scores[k] for k in ids]
        count = len(ids)
    else:
        count = args.count
    if count is None or count < 1:
        raise UsageError("make-bundles needs --count or a nonempty --likelihoods CSV")
    bundles = make_synthetic_bundles(count, d=args.d, seed=seed, n_neighbors=args.neighbors,
                                     slope=args.slope, intercept=args.intercept, noise_var=args.noise_var,
                                     likelihoods=lik)
    if ids is not None:
        for b, i in zip(bundles, ids):
            b.id = i
    digest = save_bundles(args.out, bundles)
    write_csv(f"{args.out}.labels.csv", ["id", "label"], ([b.id, b.target] for b in bundles))
    echo_config(f"{args.out}.config.json", "make-bundles",
                {"count": count, "d": args.d, "seed": seed, "neighbors": args.neighbors, "slope": args.slope,
                 "intercept": args.intercept, "noise_var": args.noise_var, "likelihoods": args.likelihoods})
    print(f"wrote {count} bundles to {args.out} (sha256 {digest[:16]})")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mambahawkes", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default: all logical cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="draw a synthetic JSONL dataset")
    s.add_argument("--model", choices=("hawkes", "poisson"), required=True)
    s.add_argument("--mu")
    s.add_argument("--alpha")
    s.add_argument("--beta")
    s.add_argument("--rate", type=float)
    s.add_argument("--num-types", type=int, default=1)
    s.add_argument("--horizon", type=float, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--max-events", type=int)
    s.add_argument("--truncate", type=int)
    s.add_argument("--split", help="train,val,test fractions, e.g. 0.8,0.1,0.1")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="sequences.jsonl")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit an MHP, noHP or classical Hawkes model")
    t.add_argument("--variant", choices=("mhp", "hawkes", "noHP"), default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--truncate", type=int, default=None, help="keep the first k events (default 5)")
    t.add_argument("--no-truncate", action="store_true")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="model.ckpt")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--quad-nodes", dest="quad_nodes", type=int)
    t.add_argument("--loglik-mode", dest="loglik_mode", choices=LOGLIK_MODES)
    t.add_argument("--paper-literal-loglik", dest="loglik_mode", action="store_const", const="paper_literal")
    t.add_argument("--objective", choices=("full", "conditional"))
    t.add_argument("--d-model", dest="d_model", type=int)
    t.add_argument("--d-state", dest="d_state", type=int)
    t.add_argument("--n-blocks", dest="n_blocks", type=int)
    t.add_argument("--d-hidden", dest="d_hidden", type=int)
    t.add_argument("--d-out", dest="d_out", type=int)
    t.add_argument("--first-delta", dest="first_delta", choices=("t1", "zero"))
    t.add_argument("--val-fraction", dest="val_fraction", type=float)
    t.add_argument("--tie-beta", dest="tie_beta", action="store_const", const=True)
    t.add_argument("--max-iter", dest="max_iter", type=int)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("score", help="per-sequence log-likelihood CSV from a checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", default="scores.csv")
    c.add_argument("--truncate", type=int)
    c.add_argument("--no-truncate", action="store_true")
    c.add_argument("--loglik-mode", choices=LOGLIK_MODES)
    c.add_argument("--paper-literal-loglik", dest="loglik_mode", action="store_const", const="paper_literal")
    c.add_argument("--quad-nodes", type=int)
    c.set_defaults(func=cmd_score)

    f = sub.add_parser("fuse", help="train and evaluate the fusion head on a bundle file")
    f.add_argument("--bundles", required=True)
    f.add_argument("--likelihoods", help="score CSV joined on id into the mode's likelihood slot")
    f.add_argument("--labels", help="CSV with columns id,label overriding bundle targets")
    f.add_argument("--mode", choices=MODES)
    f.add_argument("--config")
    f.add_argument("--seed", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--epochs", type=int)
    f.add_argument("--batch-size", type=int)
    f.add_argument("--patience", type=int)
    f.add_argument("--alpha", type=float)
    f.add_argument("--weight-decay", type=float)
    f.add_argument("--test-fraction", type=float, default=0.2)
    f.add_argument("--out-dir", default="fusion_out")
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="MetricReport from prediction and label CSVs")
    e.add_argument("--pred", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("make-bundles", help="write synthetic embedding bundles")
    m.add_argument("--count", type=int)
    m.add_argument("--likelihoods", help="score CSV; one bundle per row, ids and likelihoods taken from it")
    m.add_argument("--d", type=int, default=8)
    m.add_argument("--neighbors", type=int, default=2)
    m.add_argument("--slope", type=float, default=1.0)
    m.add_argument("--intercept", type=float, default=0.0)
    m.add_argument("--noise-var", type=float, default=0.01)
    m.add_argument("--seed", type=int)
    m.add_argument("--out", default="bundles.bin")
    m.set_defaults(func=cmd_make_bundles)
    return p


def _run(args) -> int:
    if args.command == "train" and args.variant is None and args.config is None:
        args.variant = "mhp"
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return args.func(args)
    return args.func(args)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.command is None:
            raise UsageError("a command is required (simulate, train, score, fuse, eval, make-bundles)")
        return _run(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SequenceFormatError, ArchiveError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
