"""Command-line entry point: fetch -> build -> train -> eval/ablate -> predict.

Settings resolve as command-line flag > ``--config`` file > built-in default.
The config file is flat ``key = value`` text whose keys are the long flag
names with dashes or underscores (``epochs = 50``, ``cache-dir = raw``).
Every command writes ``run-manifest-<command>.json`` with its effective
settings into ``--out``.

Exit codes: 0 success, 1 usage or data error, 2 partial failure (fetch).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataset import (
    DEFAULT_WINDOW,
    FeatureMode,
    TimestampFeatures,
    build_bundle,
    build_timeline,
    generate_synthetic_timelines,
    load_dataset,
    make_sequences,
    save_dataset,
    timeline_to_csv,
)
from .errors import (
    ApiFailure,
    CacheMiss,
    CFPredictError,
    CodeforcesError,
    NonChronologicalInput,
    NotAParticipant,
    UnknownHandle,
)
from .evaluation import (
    evaluate_model,
    format_table,
    percent_change,
    rating_to_title,
    reports_to_csv,
    run_ablation,
)
from .ingest import DEFAULT_RATE_LIMIT_MS, CodeforcesClient, read_handles
from .models import TABLE_ORDER, ModelCheckpoint, ModelConfig, ModelKind, build_model, load_checkpoint
from .train import TrainConfig, train

logger = logging.getLogger("cfpredict")

MANIFEST_VERSION = 1
PREDICTION_FIELDS = (
    "version",
    "handle",
    "current_rating",
    "predicted_rating",
    "direction",
    "percent_change",
    "title",
    "division",
    "color",
)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config file


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str], used: set[str]) -> None:
    defaults = {}
    for action in parser._actions:
        names = {action.dest} | {o.lstrip("-").replace("-", "_") for o in action.option_strings}
        hits = names & values.keys()
        if hits:
            key = sorted(hits)[0]
            raw = values[key]
            if isinstance(action, argparse._StoreTrueAction):
                low = raw.lower()
                if low not in _TRUE | _FALSE:
                    raise UsageError(f"config: {action.dest} expects a boolean, got {raw!r}")
                defaults[action.dest] = low in _TRUE
            else:
                defaults[action.dest] = raw  # argparse runs `type` on string defaults
            used.update(hits)
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _apply_config(sub, values, used)
    parser.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", dest="n_layers", type=int, default=4, help="recurrent layers (default 4)")
    p.add_argument("--hidden", type=int, default=256, help="units per recurrent layer (default 256)")
    p.add_argument("--dropout", type=float, default=0.5, help="dropout after each recurrent layer")
    p.add_argument("--dense-hidden", type=int, default=100, help="width of the ReLU dense layer")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--max-grad-norm", type=float, default=None, help="optional clipping norm (5.0 is a sane value)")
    p.add_argument(
        "--mimic-paper-checkpointing",
        action="store_true",
        help="select the best epoch on the TEST split (leaks test data; for reproduction only)",
    )


def _add_synthetic_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--synthetic-users", type=int, default=None, help="use N synthetic contestants instead of --handles")
    p.add_argument("--synthetic-length", type=int, default=40, help="contests per synthetic contestant")
    p.add_argument("--practice-effect", type=float, default=5.0, help="rating points per solved practice problem")
    p.add_argument("--mean-ac", type=float, default=4.0)
    p.add_argument("--rating-noise", type=float, default=25.0)
    p.add_argument("--persistence", type=float, default=0.9, help="AR(1) coefficient of practice intensity per contest")
    p.add_argument("--intensity-spread", type=float, default=0.6, help="log-scale spread of practice intensity")
    p.add_argument("--data-seed", type=int, default=None, help="synthetic generator seed (default --seed)")


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=None, help="default: --seed")
    p.add_argument("--by-user", action="store_true", help="keep each contestant on one side of the split")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfpredict", description="Codeforces next-rating prediction toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--cache-dir", default="cache", help="raw API response cache")
    p.add_argument("--offline", action="store_true", help="never touch the network")
    p.add_argument("--rate-limit-ms", type=int, default=DEFAULT_RATE_LIMIT_MS)
    p.add_argument("--seed", type=int, default=0, help="default for every unset seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fetch", help="warm the cache for every handle")
    f.add_argument("handles_file")

    b = sub.add_parser("build", help="build a sequence dataset file")
    b.add_argument("--handles", default=None, help="newline-delimited handle list")
    b.add_argument("--feature-mode", default="with_practice", help="base | with_practice")
    b.add_argument("--dataset-file", default=None, help="default: <out>/dataset-<mode>.bin")
    b.add_argument("--export-timelines", default=None, help="directory for per-contestant timeline CSVs")
    _add_split_flags(b)
    _add_synthetic_flags(b)

    t = sub.add_parser("train", help="train one model on a dataset file")
    t.add_argument("--dataset", required=True)
    t.add_argument("--model", default="lstm", help="lstm | gru | bilstm | lstm-attn")
    t.add_argument("--init-seed", type=int, default=None)
    t.add_argument("--shuffle-seed", type=int, default=None)
    t.add_argument("--checkpoint-file", default=None, help="default: <out>/<model>-<mode>.ckpt")
    _add_model_flags(t)
    _add_train_flags(t)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset's test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)

    a = sub.add_parser("ablate", help="with/without practice features, every model kind")
    a.add_argument("--handles", default=None)
    a.add_argument("--models", default="lstm,lstm-attn,gru,bilstm")
    a.add_argument("--seeds", default=None, help="comma-separated training seeds (default: --seed)")
    _add_split_flags(a)
    _add_synthetic_flags(a)
    _add_model_flags(a)
    _add_train_flags(a)

    pr = sub.add_parser("predict", help="predict a contestant's next rating")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--handle", required=True)
    return p


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            values = read_config_file(known.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from exc
        used: set[str] = set()
        _apply_config(parser, values, used)
        unknown = set(values) - used
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    args = parser.parse_args(argv)
    for name in ("split_seed", "data_seed", "init_seed", "shuffle_seed"):
        if getattr(args, name, 0) is None:
            setattr(args, name, args.seed)
    return args


# ---------------------------------------------------------------------------
# helpers


def _write_manifest(args: argparse.Namespace, extra: dict | None = None) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = {k: v for k, v in sorted(vars(args).items())}
    doc = {"manifest_version": MANIFEST_VERSION, "tool_version": __version__, "command": args.command, "settings": settings}
    if extra:
        doc.update(extra)
    (out / f"run-manifest-{args.command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _client(args: argparse.Namespace, offline: bool | None = None) -> CodeforcesClient:
    return CodeforcesClient(
        args.cache_dir,
        offline=args.offline if offline is None else offline,
        rate_limit_ms=args.rate_limit_ms,
    )


def timeline_from_cache(client: CodeforcesClient, handle: str) -> list[TimestampFeatures]:
    """Build one contestant's timeline from (cached) API data.

    Contests without a standings row for the handle get solve rating 0.
    """
    ratings = client.fetch_rating_history(handle)
    if not ratings:
        return []
    subs = client.fetch_submissions(handle)
    standings = {}
    for rc in ratings:
        try:
            standings[rc.contest_id] = client.fetch_standings_row(rc.contest_id, handle)
        except (NotAParticipant, ApiFailure):
            continue
    return build_timeline(ratings, subs, standings)


def _timelines(args: argparse.Namespace) -> dict[str, list[TimestampFeatures]]:
    if args.synthetic_users:
        tls = generate_synthetic_timelines(
            args.synthetic_users,
            args.synthetic_length,
            args.data_seed,
            args.practice_effect,
            mean_ac=args.mean_ac,
            rating_noise=args.rating_noise,
            persistence=args.persistence,
            intensity_spread=args.intensity_spread,
        )
        return {f"synthetic-{i:04d}": tl for i, tl in enumerate(tls)}
    if not args.handles:
        raise UsageError("pass --handles FILE or --synthetic-users N")
    try:
        handles = read_handles(args.handles)
    except OSError as exc:
        raise UsageError(f"cannot read handles file: {exc}") from exc
    # building never touches the network or writes the cache
    client = _client(args, offline=True)
    out = {}
    for h in handles:
        try:
            out[h] = timeline_from_cache(client, h)
        except CacheMiss as exc:
            raise UsageError(f"{h}: raw data missing from cache ({exc}); run fetch first") from exc
        except UnknownHandle:
            print(f"{h}: unknown handle, skipped")
            out[h] = []
    return out


def _model_config(args, kind: ModelKind, F: int, seq_len: int, init_seed: int) -> ModelConfig:
    return ModelConfig(
        kind=kind,
        input_features=F,
        output_features=F,
        n_layers=args.n_layers,
        hidden=args.hidden,
        dropout=args.dropout,
        dense_hidden=args.dense_hidden,
        seq_len=seq_len,
        init_seed=init_seed,
    )


def _train_config(args, shuffle_seed: int, checkpoint_path=None, history_path=None) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        eps=args.eps,
        shuffle_seed=shuffle_seed,
        val_fraction=args.val_fraction,
        checkpoint_path=checkpoint_path,
        history_path=history_path,
        mimic_paper_checkpointing=args.mimic_paper_checkpointing,
        max_grad_norm=args.max_grad_norm,
    )


def _mode_slug(mode: FeatureMode) -> str:
    return mode.value.lower()


# ---------------------------------------------------------------------------
# commands


def cmd_fetch(args) -> int:
    try:
        handles = read_handles(args.handles_file)
    except OSError as exc:
        print(f"error: cannot read {args.handles_file}: {exc}", file=sys.stderr)
        return 1
    client = _client(args)
    failures = {}
    for h in handles:
        try:
            ratings = client.fetch_rating_history(h)
            subs = client.fetch_submissions(h)
            n_stand = 0
            for rc in ratings:
                try:
                    client.fetch_standings_row(rc.contest_id, h)
                    n_stand += 1
                except (NotAParticipant, ApiFailure):
                    pass
            print(f"{h}: {len(ratings)} rated contests, {len(subs)} submissions, {n_stand} standings rows")
        except (CodeforcesError, ValueError) as exc:
            failures[h] = f"{type(exc).__name__}: {exc}"
    print(f"{len(handles)} handles: {len(handles) - len(failures)} ok, {len(failures)} failed")
    for h, msg in failures.items():
        print(f"  FAILED {h}: {msg}")
    _write_manifest(args, {"failed_handles": sorted(failures)})
    return 2 if failures else 0


def cmd_build(args) -> int:
    mode = FeatureMode.parse(args.feature_mode)
    if args.window < 2:
        raise UsageError("--window must be >= 2")
    timelines = _timelines(args)
    total = 0
    for tag, tl in timelines.items():
        n = len(make_sequences(tl, args.window, mode)) if tl else 0
        total += n
        note = " (below window)" if n == 0 else ""
        print(f"{tag}: {len(tl)} contests -> {n} sequences{note}")
    if args.export_timelines:
        d = Path(args.export_timelines)
        d.mkdir(parents=True, exist_ok=True)
        for tag, tl in timelines.items():
            (d / f"{tag}.csv").write_text(timeline_to_csv(tl))
    if total == 0:
        raise UsageError("no sequences could be built")
    bundle = build_bundle(timelines, mode, window=args.window, ratio=args.split_ratio, split_seed=args.split_seed, by_user=args.by_user)
    path = args.dataset_file or str(Path(args.out) / f"dataset-{_mode_slug(mode)}.bin")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(bundle, path)
    print(f"total {total} sequences: train {len(bundle.train)}, test {len(bundle.test)}, F={bundle.n_features}")
    print(f"wrote {path}")
    _write_manifest(args, {"dataset_file": path, "n_train": len(bundle.train), "n_test": len(bundle.test)})
    return 0


def cmd_train(args) -> int:
    bundle = load_dataset(args.dataset)
    kind = ModelKind.parse(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{kind.value.lower()}-{_mode_slug(bundle.feature_mode)}"
    ckpt_path = args.checkpoint_file or str(out / f"{stem}.ckpt")
    hist_path = str(out / f"{stem}.history.csv")
    cfg = _model_config(args, kind, bundle.n_features, bundle.seq_len, args.init_seed)
    model = build_model(cfg)
    ckpt, history = train(model, bundle, _train_config(args, args.shuffle_seed, ckpt_path, hist_path))
    prov = ckpt.provenance
    print(f"trained {kind.label} for {len(history)} epochs ({prov.adam_steps} steps)")
    print(f"best {prov.selection} MAE {prov.best_val_mae:.3f} at epoch {prov.best_epoch}")
    print(f"wrote {ckpt_path}")
    _write_manifest(args, {"checkpoint_file": ckpt_path, "history_file": hist_path})
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bundle = load_dataset(args.dataset)
    cfg = ckpt.config
    if cfg.input_features != bundle.n_features or cfg.seq_len != bundle.seq_len:
        raise UsageError(
            f"checkpoint expects F={cfg.input_features}, seq_len={cfg.seq_len}; "
            f"dataset has F={bundle.n_features}, seq_len={bundle.seq_len}"
        )
    report = evaluate_model(ckpt.to_model(), bundle, seed=cfg.init_seed)
    print(format_table({cfg.kind: report}, title=f"Test metrics ({bundle.feature_mode.value}, n={report.n_test})"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"eval-{cfg.kind.value.lower()}-{_mode_slug(bundle.feature_mode)}.csv"
    path.write_text(reports_to_csv([report]))
    print(f"wrote {path}")
    _write_manifest(args, {"report_file": str(path)})
    return 0


def cmd_ablate(args) -> int:
    timelines = _timelines(args)
    kinds = [ModelKind.parse(k) for k in args.models.split(",") if k.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    result = run_ablation(
        timelines,
        kinds=kinds,
        seeds=seeds,
        train_cfg=_train_config(args, args.seed),
        window=args.window,
        ratio=args.split_ratio,
        split_seed=args.split_seed,
        by_user=args.by_user,
        n_layers=args.n_layers,
        hidden=args.hidden,
        dropout=args.dropout,
        dense_hidden=args.dense_hidden,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for mode, title in (
        (FeatureMode.BASE, "Without practice features"),
        (FeatureMode.WITH_PRACTICE, "With practice features"),
    ):
        print(format_table(result.tables[mode], title=title))
        print()
        path = out / f"ablation-{_mode_slug(mode)}.csv"
        path.write_text(reports_to_csv(result.runs[mode]))
        files.append(str(path))
        print(f"wrote {path}")
    _write_manifest(args, {"report_files": files})
    return 0


@dataclass(frozen=True)
class PredictionRecord:
    version: int
    handle: str
    current_rating: int
    predicted_rating: int
    direction: str
    percent_change: float
    title: str
    division: str
    color: str


def predict_next(ckpt: ModelCheckpoint, timeline: Sequence[TimestampFeatures], handle: str = "") -> PredictionRecord:
    """Predict the rating after the next contest from the latest window."""
    cfg = ckpt.config
    need = cfg.seq_len
    if len(timeline) < need:
        raise UsageError(f"insufficient history (need {need} contests)")
    mode = FeatureMode.BASE if cfg.input_features == 3 else FeatureMode.WITH_PRACTICE
    if mode.n_features != cfg.input_features:
        raise UsageError(f"checkpoint has unsupported feature count {cfg.input_features}")
    x = np.array([t.vector(mode) for t in timeline[-need:]], dtype=np.float64)
    pred = ckpt.to_model().predict(ckpt.scaler.transform(x)[None])[0]
    rating = float(ckpt.scaler.inverse_column(pred[0], 0))
    current = int(round(timeline[-1].rating))
    predicted = int(round(rating))
    direction = "UP" if predicted > current else "DOWN" if predicted < current else "FLAT"
    title, division, color = rating_to_title(predicted)
    return PredictionRecord(
        version=1,
        handle=handle,
        current_rating=current,
        predicted_rating=predicted,
        direction=direction,
        percent_change=round(percent_change(predicted, current), 4) if current else 0.0,
        title=title,
        division=division,
        color=color,
    )


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    client = _client(args, offline=True)
    try:
        timeline = timeline_from_cache(client, args.handle)
    except CacheMiss as exc:
        raise UsageError(f"{args.handle}: raw data missing from cache; run fetch first") from exc
    rec = predict_next(ckpt, timeline, args.handle)
    sign = "+" if rec.percent_change >= 0 else ""
    print(
        f"{rec.handle}: {rec.current_rating} -> {rec.predicted_rating} ({rec.direction}, "
        f"{sign}{rec.percent_change:.2f}%), {rec.title}, {rec.division}, {rec.color}"
    )
    record = {k: asdict(rec)[k] for k in PREDICTION_FIELDS}
    line = json.dumps(record)
    print(line)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"prediction-{args.handle}.json").write_text(line + "\n")
    _write_manifest(args)
    return 0


COMMANDS = {
    "fetch": cmd_fetch,
    "build": cmd_build,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse usage errors
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, CFPredictError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
