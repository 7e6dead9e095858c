"""``causaltraffic`` command line.

Exit codes: 0 success, 1 runtime failure (one line ``causaltraffic: error
[category]: message`` on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

SUBCOMMANDS = ("extract-events", "build-ckb", "gen-synthetic", "train", "predict", "evaluate",
               "export-attention", "export-features", "ckb-report")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _category(exc: BaseException) -> str:
    from .ckb import CkbFormatError, NoMatchesError, SeparationError
    from .cpn import CheckpointError
    from .data import DataError
    from .events import ExtractionFailed, InvalidRecord
    from .graph import GraphError
    from .numerics import NonFiniteError, ShapeError
    from .training import TrainingDiverged
    table = [
        (CliError, None), (CheckpointError, "checkpoint"), (CkbFormatError, "ckb"),
        (NoMatchesError, "ckb"), (SeparationError, "ckb"), (GraphError, "graph"),
        (InvalidRecord, "events"), (ExtractionFailed, "events"), (TrainingDiverged, "training"),
        (NonFiniteError, "numerics"), (ShapeError, "numerics"), (DataError, "data"),
        (FileNotFoundError, "io"), (OSError, "io"), (json.JSONDecodeError, "config"),
        (ValueError, "invalid"),
    ]
    for cls, name in table:
        if isinstance(exc, cls):
            return exc.category if name is None else name
    return "internal"


# -- helpers --------------------------------------------------------------------

def _config(args):
    from .pipeline import PipelineConfig, bundled_config
    if getattr(args, "config", None):
        cfg = PipelineConfig.load(args.config)
    else:
        cfg = bundled_config(getattr(args, "default_config", "train"))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def _data(args):
    from .pipeline import DataDir
    root = Path(args.data)
    if not root.is_dir():
        raise CliError("io", f"data directory not found: {root}")
    return DataDir(root)


def _write_json(path, obj) -> None:
    p = Path(path)
    if p.parent != Path(""):
        p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg)


def _split_pairs(windows, split: str, limit: int | None, events_only: bool = False):
    pairs = windows.windows[split]
    if events_only:
        pairs = pairs[windows.batch(pairs).event]
    if limit is not None and len(pairs) > limit:
        pairs = pairs[np.linspace(0, len(pairs) - 1, limit).astype(int)]
    if len(pairs) == 0:
        raise CliError("data", f"no usable windows in the {split} split")
    return pairs


def _load_for_inference(args):
    from .pipeline import load_run, make_windows
    state, ckb, cfg = load_run(args.ckpt, getattr(args, "ckb", None))
    data = _data(args)
    series = data.series()
    graph = data.graph([s.segment_id for s in series], getattr(args, "graph", None))
    windows = make_windows(series, data.records(), ckb, graph, cfg)
    if windows.normalizer != state.normalizer:
        # always normalize with the statistics the model was trained with
        windows = replace(windows, normalizer=state.normalizer,
                          normalized=np.nan_to_num(state.normalizer.apply(windows.speeds), nan=0.0))
    return state, ckb, cfg, data, windows


# -- subcommands --------------------------------------------------------------------

def cmd_gen_synthetic(args):
    from .data import SyntheticSpec, generate_synthetic, write_synthetic
    if args.spec:
        spec = SyntheticSpec.load(args.spec)
    else:
        spec = _config(args).synthetic
        if spec is None:
            raise CliError("config", "config has no synthetic section; pass --spec")
    if args.seed is not None:
        spec = replace(spec, random_seed=args.seed)
    ds = generate_synthetic(spec)
    write_synthetic(ds, args.out)
    _say(args, f"wrote {len(ds.series)} segments, {len(ds.records)} events to {args.out}")


def cmd_extract_events(args):
    from .events import (LLMConfig, LLMExtractor, RuleBasedExtractor, extract_all, read_raw_events,
                         write_jsonl)
    raws = read_raw_events(args.input)
    seg_map = json.loads(Path(args.segment_map).read_text(encoding="utf-8")) if args.segment_map else None
    rules = RuleBasedExtractor(segment_map=seg_map)
    if args.llm_endpoint:
        extractor = LLMExtractor(LLMConfig(args.llm_endpoint, prompts_dir=args.prompts,
                                           timeout=args.timeout, retries=args.retries))
        fallback = None if args.no_fallback else rules
    else:
        extractor, fallback = rules, None
    records, failures = extract_all(raws, extractor, fallback, max_workers=max(1, args.threads))
    write_jsonl(args.out, records)
    if failures:
        _write_json(Path(args.out).with_suffix(".failures.json"),
                    [{"event_id": e, "reason": r} for e, r in failures])
    _say(args, f"extracted {len(records)} of {len(raws)} events ({len(failures)} failed)")
    if not records:
        raise CliError("events", "no event could be extracted")


def cmd_build_ckb(args):
    from .ckb.build import build_ckb
    from .data import load_speed_csv
    from .events import read_records
    cfg = _config(args)
    ckb_cfg = cfg.ckb
    if args.min_matches is not None:
        ckb_cfg = replace(ckb_cfg, min_matches=args.min_matches)
    if args.caliper is not None:
        ckb_cfg = replace(ckb_cfg, caliper=args.caliper)
    ckb_cfg = replace(ckb_cfg, seed=cfg.seed)
    if args.data:
        data = _data(args)
        series, records = data.series(), data.records()
    else:
        if not (args.speeds and args.events):
            raise CliError("usage", "give --data DIR or both --speeds and --events")
        series, records = load_speed_csv(args.speeds), read_records(args.events)
    ckb, report = build_ckb(records, series, ckb_cfg)
    ckb.save(args.out)
    if args.report:
        _write_json(args.report, report.to_dict())
    for line in report.lines():
        _say(args, line)
    _say(args, f"wrote {len(ckb.entries)} effect estimates to {args.out}")


def cmd_ckb_report(args):
    from .ckb import CausalKnowledgeBase, render_table
    text = render_table(CausalKnowledgeBase.load(args.ckb), style=args.style)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_export_features(args):
    from .ckb import CausalKnowledgeBase
    from .features import feature_matrix, write_feature_csv
    cfg = _config(args)
    data = _data(args)
    series = data.series()
    s0 = series[0]
    lam = args.lam if args.lam is not None else cfg.lam
    feats = feature_matrix([s.segment_id for s in series], s0.start, s0.interval_min, len(s0),
                           data.records(), CausalKnowledgeBase.load(args.ckb), lam, cfg.periods)
    write_feature_csv(args.out, [s.segment_id for s in series], s0.start, s0.interval_min, feats)
    _say(args, f"wrote features for {len(series)} segments x {len(s0)} steps to {args.out}")


def cmd_train(args):
    from .ckb import CausalKnowledgeBase
    from .pipeline import make_windows, save_run, train_model
    cfg = _config(args)
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if args.beta_loss is not None:
        cfg.train = replace(cfg.train, beta_loss=args.beta_loss)
    if args.gamma is not None:
        cfg.train = replace(cfg.train, gamma=args.gamma)
    data = _data(args)
    ckb = CausalKnowledgeBase.load(args.ckb)
    series = data.series()
    graph = data.graph([s.segment_id for s in series], args.graph)
    windows = make_windows(series, data.records(), ckb, graph, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if args.verbose:
            print(json.dumps(row, sort_keys=True))
    res = train_model(windows, cfg, log_path=out / "train_log.jsonl", on_epoch=progress)
    save_run(out, res, cfg, ckb)
    last = res.log[-1]
    _say(args, f"trained {len(res.log)} epochs (phase {last['phase']}, best val MSE "
               f"{res.best_val_mse:.4f}); checkpoint in {out}")


def cmd_predict(args):
    from .evaluation import predict_windows, write_predictions_csv
    state, _, _, _, windows = _load_for_inference(args)
    pairs = _split_pairs(windows, args.split, args.max_windows)
    preds = predict_windows(state, windows, pairs)
    write_predictions_csv(args.out, windows, pairs, preds)
    _say(args, f"wrote {len(pairs)} predictions to {args.out}")


def cmd_evaluate(args):
    from .evaluation import ablation_compare, sign_agreement, write_predictions_csv
    from .pipeline import ledger_effects
    state, _, _, data, windows = _load_for_inference(args)
    pairs = _split_pairs(windows, args.split, args.max_windows)
    rep, preds = ablation_compare(state, windows, pairs)
    out = {"split": args.split, "windows": int(len(pairs)), "gate": preds.gate, **rep.to_dict(),
           "table_row": rep.causal.triple()}
    eff = ledger_effects(data, windows, pairs)
    if eff is not None:
        share, n = sign_agreement(preds.a_causal, eff, mask=preds.event)
        out["sign_agreement"] = {"share": None if n == 0 else share, "windows": n}
    _write_json(args.out, out)
    if args.predictions:
        write_predictions_csv(args.predictions, windows, pairs, preds)
    _say(args, f"MAE / MSE / RMSE: {rep.causal.triple()} (neutral features: {rep.neutral.triple()})")


def cmd_export_attention(args):
    from .evaluation import export_attention
    state, _, _, _, windows = _load_for_inference(args)
    pairs = _split_pairs(windows, args.split, args.max_windows, args.events_only)
    paths = export_attention(state, windows.batch(pairs), args.out)
    _say(args, f"wrote {', '.join(sorted(p.name for p in paths.values()))} to {args.out}")


# -- parser ---------------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="random seed (overrides the config)")
    p.add_argument("--threads", type=int, default=d(1), help="numeric threads (default 1)")
    p.add_argument("--config", default=d(None), help="pipeline config JSON")
    p.add_argument("--quiet", action="store_true", default=d(False), help="no progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causaltraffic",
        description="Event-aware traffic speed forecasting with a causal knowledge base.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help_, default_config="train"):
        p = sub.add_parser(name, help=help_, description=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func, default_config=default_config)
        return p

    p = add("gen-synthetic", cmd_gen_synthetic, "generate a synthetic dataset with known effects",
            default_config="benchmark")
    p.add_argument("--spec", help="synthetic spec JSON (default: the bundled benchmark)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("extract-events", cmd_extract_events, "turn raw event text into quantified records")
    p.add_argument("--input", required=True, help="raw events JSON Lines")
    p.add_argument("--out", required=True, help="records JSON Lines")
    p.add_argument("--segment-map", help="JSON object mapping location tokens to segment ids")
    p.add_argument("--llm-endpoint", help="HTTP endpoint of a chat-completion style service")
    p.add_argument("--prompts", help="directory with stage1.txt / stage2.txt templates")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--no-fallback", action="store_true", help="do not fall back to the rule extractor")

    p = add("build-ckb", cmd_build_ckb, "estimate effects per event type and time period",
            default_config="benchmark")
    p.add_argument("--data", help="directory with speeds.csv and records.jsonl")
    p.add_argument("--speeds", help="speed CSV (instead of --data)")
    p.add_argument("--events", help="records JSON Lines (instead of --data)")
    p.add_argument("--out", required=True, help="knowledge base JSON")
    p.add_argument("--report", help="write the build report JSON here")
    p.add_argument("--caliper", type=float)
    p.add_argument("--min-matches", type=int)

    p = add("ckb-report", cmd_ckb_report, "render the knowledge base as a table")
    p.add_argument("--ckb", required=True)
    p.add_argument("--style", choices=("text", "latex"), default="text")
    p.add_argument("--out", help="write to a file instead of stdout")

    p = add("export-features", cmd_export_features, "write the causal feature sequences")
    p.add_argument("--data", required=True)
    p.add_argument("--ckb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, help="decay constant in minutes")

    p = add("train", cmd_train, "train the forecaster with the three-phase schedule")
    p.add_argument("--data", required=True)
    p.add_argument("--ckb", required=True)
    p.add_argument("--graph", help="edge list (default: DATA/edges.csv)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--beta-loss", type=float, help="weight of the sign-consistency loss")
    p.add_argument("--gamma", type=float, help="weight of the attention entropy term")
    p.add_argument("--verbose", action="store_true", help="print every log row")

    for name, func, help_ in (("predict", cmd_predict, "write predictions for a split"),
                              ("evaluate", cmd_evaluate, "metrics and causal ablation on a split"),
                              ("export-attention", cmd_export_attention, "attention mean/variance maps")):
        p = add(name, func, help_)
        p.add_argument("--ckpt", required=True, help="checkpoint directory or file")
        p.add_argument("--data", required=True)
        p.add_argument("--ckb", help="knowledge base (default: the one saved with the checkpoint)")
        p.add_argument("--graph", help="edge list (default: DATA/edges.csv)")
        p.add_argument("--out", required=True)
        p.add_argument("--split", choices=("train", "validation", "test"), default="test")
        p.add_argument("--max-windows", type=int)
        if name == "evaluate":
            p.add_argument("--predictions", help="also write per-window predictions CSV")
        if name == "export-attention":
            p.add_argument("--events-only", action="store_true", help="only windows with events")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except KeyboardInterrupt:
        print("causaltraffic: error[interrupted]: stopped by user", file=sys.stderr)
        return 1
    except Exception as exc:   # every failure becomes one machine-readable line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"causaltraffic: error[{_category(exc)}]: {args.command}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
