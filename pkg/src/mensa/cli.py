"""``mensa`` command line: simulate, train, predict, evaluate.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
Set ``MENSA_LOG_LEVEL`` to error, info or debug.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_run_config
from .dataset import (
    CATEGORICAL,
    PreprocessState,
    SplitSpec,
    encode_event_free,
    load_csv,
    preprocess_apply,
    preprocess_fit,
    split_stratified,
    write_csv,
)
from .evaluation import evaluate_model
from .model import MensaConfig, MensaModel, init_model, predict_isd, median_from_curve
from .simulation import FAMILIES, INDEPENDENCE, LINEAR, NONLINEAR, CopulaError, GroundTruthDgp, generate_dataset, tau_to_theta
from .training import MULTI, SINGLE, NumericalError, TrainConfig, TrajectorySet, train

log = logging.getLogger("mensa")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    if args.copula == INDEPENDENCE and args.tau != 0.0:
        raise UsageError("the independence copula requires --tau 0")
    try:
        spec = tau_to_theta(args.copula, args.tau)
    except CopulaError as exc:
        raise UsageError(str(exc)) from None
    if args.n < 1 or args.d < 1:
        raise UsageError("--n and --d must be >= 1")
    dgp_seed, data_seed = _seeds(args.seed, 2)
    dgp = GroundTruthDgp.create(
        d=args.d,
        risk=args.dgp,
        copula=spec,
        seed=dgp_seed,
        event_shape=args.event_shape,
        event_scale=args.event_scale,
        censor_shape=args.censor_shape,
        censor_scale=args.censor_scale,
    )
    ds, _ = generate_dataset(dgp, args.n, seed=data_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out / "data.csv")
    dgp.save(out / "truth.json")
    log.info("wrote %d rows to %s (event rate %.3f)", ds.n, out / "data.csv", ds.E.mean())
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_splits(cfg: RunConfig, split_seed: int):
    data = load_csv(cfg.train_path)
    if cfg.valid_path is None:
        fr = cfg.split
        train_ds, valid_ds, test_ds = split_stratified(data, SplitSpec(*fr, seed=split_seed))
        return train_ds, valid_ds, test_ds, True
    categorical = {f.name: CATEGORICAL for f in data.schema if f.kind == CATEGORICAL}
    valid_ds = load_csv(cfg.valid_path, categorical)
    test_ds = load_csv(cfg.test_path, categorical) if cfg.test_path else None
    return data, valid_ds, test_ds, False


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config)
        cfg.check_files()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    split_seed, init_seed, train_seed = _seeds(cfg.seed, 3)
    train_ds, valid_ds, test_ds, was_split = _load_splits(cfg, split_seed)
    if cfg.mode == SINGLE and train_ds.n_events != 1:
        raise UsageError(f"mode = single needs exactly one event, found {train_ds.n_events}")
    if valid_ds.event_names != train_ds.event_names:
        raise UsageError("validation events do not match training events")
    trajectories = TrajectorySet.from_names(cfg.trajectories, train_ds.event_names)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    if was_split:
        write_csv(train_ds, out / "train.csv")
        write_csv(valid_ds, out / "valid.csv")
        write_csv(test_ds, out / "test.csv")

    prep = preprocess_fit(train_ds)
    train_enc = encode_event_free(preprocess_apply(prep, train_ds))
    valid_enc = encode_event_free(preprocess_apply(prep, valid_ds))
    mcfg = MensaConfig(
        n_features=train_enc.X.shape[1],
        n_states=train_enc.n_states,
        n_mixtures=cfg.mixtures,
        hidden=cfg.hidden,
        dropout=cfg.dropout,
        free_shape=cfg.free_shape,
        seed=init_seed,
    )
    tcfg = TrainConfig(
        batch_size=cfg.batch_size,
        lr=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        epochs=cfg.epochs,
        patience=cfg.patience,
        mode=cfg.mode,
        trajectories=list(trajectories) if cfg.mode == MULTI else [],
        trajectory_log=cfg.trajectory_log,
        seed=train_seed,
        log_path=str(out / "training_log.jsonl"),
    )
    model, history = train(init_model(mcfg), train_enc, valid_enc, tcfg)
    metadata = {
        "mode": cfg.mode,
        "event_names": train_ds.event_names,
        "preprocess": prep.to_dict(),
        "train_data": [str(cfg.train_path.resolve())] + ([str(cfg.valid_path.resolve())] if cfg.valid_path else []),
        "trajectories": [list(p) for p in cfg.trajectories],
        "best_epoch": history.best_epoch,
        "epochs_run": len(history.records),
    }
    model.save(out / "model.json", metadata)
    log.info("model written to %s (best epoch %d of %d)", out / "model.json", history.best_epoch, len(history.records))
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict / evaluate


def _load_model_and_data(model_path, data_path):
    try:
        model, meta = MensaModel.load(model_path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read model {model_path}: {exc}") from None
    prep = PreprocessState.from_dict(meta["preprocess"])
    categorical = {name: CATEGORICAL for name in prep.categorical}
    if not Path(data_path).is_file():
        raise UsageError(f"data file not found: {data_path}")
    present = load_csv(data_path).feature_names
    raw = load_csv(data_path, {k: v for k, v in categorical.items() if k in present})
    if raw.feature_names != prep.input_names:
        missing = [c for c in prep.input_names if c not in raw.feature_names]
        extra = [c for c in raw.feature_names if c not in prep.input_names]
        raise UsageError(f"feature mismatch: missing columns {missing}, unexpected columns {extra}")
    if raw.event_names != meta["event_names"]:
        raise UsageError(f"event mismatch: model has {meta['event_names']}, data has {raw.event_names}")
    return model, meta, raw, preprocess_apply(prep, raw)


def cmd_predict(args) -> int:
    model, meta, raw, ds = _load_model_and_data(args.model, args.data)
    grid_max = args.grid_max if args.grid_max is not None else float(ds.T.max())
    if not grid_max > 0 or args.grid_points < 2:
        raise UsageError("--grid-max must be > 0 and --grid-points >= 2")
    grid = np.linspace(0.0, grid_max, args.grid_points)
    isd = predict_isd(model, ds.X, grid)
    states = ["event_free", *meta["event_names"]]
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "state", "median", "median_censored"] + [f"{t:.17g}" for t in grid])
        for i in range(ds.n):
            for p, name in enumerate(states):
                s = isd.surv[i, p]
                med, cens = median_from_curve(grid, s)
                w.writerow([i, name, f"{med:.17g}", int(cens)] + [f"{v:.17g}" for v in s])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, meta, raw, ds = _load_model_and_data(args.model, args.data)
    if str(Path(args.data).resolve()) in meta.get("train_data", []):
        log.warning("evaluation data %s was used for training; metrics will be optimistic", args.data)
    truth = None
    if args.truth:
        try:
            truth = GroundTruthDgp.load(args.truth)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot read ground truth {args.truth}: {exc}") from None
        if truth.d != raw.X.shape[1] or raw.n_events != 1:
            raise UsageError("ground-truth sidecar does not match the dataset schema")
    report = evaluate_model(model, ds, truth, raw.X if truth else None)
    report.save(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mensa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic single-event dataset")
    p.add_argument("--dgp", choices=(LINEAR, NONLINEAR), default=LINEAR)
    p.add_argument("--copula", choices=FAMILIES, default=INDEPENDENCE)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--event-shape", type=float, default=4.0)
    p.add_argument("--event-scale", type=float, default=18.0)
    p.add_argument("--censor-shape", type=float, default=5.0)
    p.add_argument("--censor-scale", type=float, default=17.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write survival curves and median times")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid-max", type=float, default=None)
    p.add_argument("--grid-points", type=int, default=101)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="compute the metric report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("MENSA_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if level not in levels:
        log.warning("unknown MENSA_LOG_LEVEL %r, using info", level)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NumericalError, ArithmeticError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
