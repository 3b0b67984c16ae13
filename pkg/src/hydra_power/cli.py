"""``hydra-power``: batch command line over the trace → train → select → predict pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter

import numpy as np

from . import evaluation, hydra, models, selector, stats, trace
from .errors import HydraError, MissingColumnError
from .trace import DEFAULT_PROFILE, TraceFormat

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------

def _int_at_least(lo):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {v}")
        return v
    return parse


def _float_in(lo, hi=float("inf"), lo_open=False):
    def parse(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        ok = (v > lo if lo_open else v >= lo) and v <= hi
        if not ok:
            raise argparse.ArgumentTypeError(f"{v} is out of range")
        return v
    return parse


def _seed(text):
    v = _int_at_least(0)(text)
    if v >= 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _profile(args):
    return trace.load_profile(args.profile) if args.profile else DEFAULT_PROFILE


def _read_trace(path, args):
    return trace.read_trace_file(path, trace.format_for_path(path, default=args.format))


def _emit(text, out=None):
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _nan_to_none(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


def _candidate_ids(loaded):
    """Ids from model kinds; repeats get a numeric suffix."""
    seen = Counter()
    ids = []
    for m in loaded:
        seen[m.kind] += 1
        ids.append(m.kind if seen[m.kind] == 1 else f"{m.kind}{seen[m.kind]}")
    return ids


def _predict(model, tr, profile):
    if isinstance(model, hydra.HydraModel):
        return hydra.run_over_trace(model, tr)
    return hydra.run_single_model(model, tr, profile)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    profile = _profile(args)
    cfg = trace.SyntheticConfig(
        regime=args.regime,
        duration_samples=args.samples,
        noise_sigma_watts=args.noise,
        container_noise=args.container_noise,
        seed=args.seed,
        profile=profile,
        mix_period=args.mix_period,
    )
    tr = trace.generate_synthetic(cfg)
    fmt = trace.format_for_path(args.out, default=args.format)
    trace.write_trace_file(tr, args.out, fmt)
    msg = {"out": args.out, "samples": len(tr), "regime": cfg.regime.value, "seed": args.seed}
    print(json.dumps(msg) if args.json else f"wrote {len(tr)} {cfg.regime.value} samples to {args.out}")
    return EXIT_OK


def cmd_correlate(args):
    tr = _read_trace(args.trace, args)
    report = stats.select_features(tr, args.threshold)
    if args.json:
        doc = {
            "threshold": report.threshold,
            "correlations": _nan_to_none(dict(report.correlations)),
            "selected": list(report.selected),
            "undefined": list(report.undefined),
        }
        _emit(json.dumps(doc) + "\n", args.out)
    else:
        _emit(report.to_csv(), args.out)
    return EXIT_OK


def cmd_train(args):
    tr = _read_trace(args.trace, args)
    profile = _profile(args)
    if not tr.has_power():
        raise MissingColumnError("training needs measured_power_watts on every sample")
    if args.kind == "analytical":
        model = models.AnalyticalModel(args.alpha) if args.alpha is not None else models.fit_alpha(tr, profile)
        err = stats.rmse(model.predict_trace_watts(tr, profile), tr.column("measured_power_watts"))
        hydra.save_model(model, args.out)
        if args.json:
            print(json.dumps({"kind": "analytical", "alpha": model.alpha, "rmse_watts": err, "out": args.out}))
        else:
            print(f"alpha={model.alpha:g} rmse_watts={err:.4f}")
        return EXIT_OK

    norm = stats.fit_normalization([tr])
    X = norm.transform(tr.feature_matrix)
    y = (tr.column("measured_power_watts") - profile.idle_power_watts) / profile.dynamic_range
    cfg = models.TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        validation_fraction=args.validation_fraction,
    )
    result = models.train_mlp_arrays(X, y, cfg, norm)
    hydra.save_model(result.model, args.out)
    val = result.validation_loss
    if args.json:
        print(json.dumps({
            "kind": "mlp",
            "final_train_loss": result.final_loss,
            "final_validation_loss": val,
            "epochs": args.epochs,
            "out": args.out,
        }))
    else:
        vtxt = "n/a" if val is None else f"{val:.6g}"
        print(f"final_train_loss={result.final_loss:.6g} final_validation_loss={vtxt}")
    return EXIT_OK


def cmd_train_selector(args):
    tr = _read_trace(args.trace, args)
    profile = _profile(args)
    loaded = [hydra.load_any_model(p) for p in args.candidates]
    for path, m in zip(args.candidates, loaded):
        if isinstance(m, hydra.HydraModel):
            raise HydraError(f"{path}: a hydra model cannot be a candidate")
    # listed order is overhead order: first = cheapest
    ids = _candidate_ids(loaded)
    cands = tuple((selector.CandidateSpec(cid, rank), m) for rank, (cid, m) in enumerate(zip(ids, loaded)))
    forest_cfg = selector.ForestConfig(
        n_trees=args.trees,
        max_depth=args.max_depth,
        min_samples_split=args.min_samples_split,
        feature_subsample_k=args.features_per_split,
        bootstrap=not args.no_bootstrap,
        seed=args.seed,
    )
    res = hydra.train_hydra(
        tr, cands, profile,
        window=args.window,
        epsilon_rel=args.epsilon,
        forest_config=forest_cfg,
        selection_interval=args.selection_interval,
        holdout_fraction=0.2,
    )
    hydra.save_model(res.model, args.out)
    labels = Counter(ex.label for ex in res.train_examples + res.heldout_examples)
    acc = None if np.isnan(res.heldout_accuracy) else res.heldout_accuracy
    if args.json:
        print(json.dumps({
            "labels": dict(labels),
            "heldout_windows": len(res.heldout_examples),
            "heldout_accuracy": acc,
            "out": args.out,
        }))
    else:
        for cid in ids:
            print(f"label {cid}: {labels.get(cid, 0)} windows")
        acc_txt = "n/a" if acc is None else f"{acc:.3f}"
        print(f"heldout_accuracy={acc_txt} over {len(res.heldout_examples)} windows")
    return EXIT_OK


def cmd_predict(args):
    model = hydra.load_any_model(args.model)
    tr = _read_trace(args.trace, args)
    preds = _predict(model, tr, _profile(args))
    _emit(hydra.predictions_to_csv(preds, tr), args.out)
    return EXIT_OK


def cmd_evaluate(args):
    tr = _read_trace(args.trace, args)
    if args.predictions:
        with open(args.predictions, encoding="utf-8", newline="") as fh:
            preds = hydra.predictions_from_csv(fh.read())
    else:
        preds = _predict(hydra.load_any_model(args.model), tr, _profile(args))
    report = evaluation.evaluate(preds, tr, args.low_max, args.mid_max)
    if args.json:
        print(json.dumps(_nan_to_none(report.to_doc())))
    else:
        print(report.to_table())
    if args.out:
        _emit(report.to_csv(), args.out)
    return EXIT_OK


def _bench_callable(model, profile):
    if isinstance(model, hydra.HydraModel):
        state = hydra.SelectionState()
        return lambda s: hydra.hydra_predict(model, s, state).predicted_watts
    return lambda s: model.predict_watts(s, profile)


def cmd_bench(args):
    profile = _profile(args)
    loaded = [hydra.load_any_model(p) for p in args.models]
    tr = _read_trace(args.trace, args)
    entries = [(cid, _bench_callable(m, profile)) for cid, m in zip(_candidate_ids(loaded), loaded)]
    report = evaluation.latency_bench(entries, list(tr.samples), args.iterations, args.warmup)
    if args.json:
        print(json.dumps(report.to_doc()))
    else:
        print(report.to_table())
    if args.out:
        _emit(report.to_csv(), args.out)
    return EXIT_OK


def cmd_rapl_report(args):
    tr = _read_trace(args.trace, args)
    ratio, r = evaluation.rapl_ratio_report(tr)
    _emit(evaluation.rapl_ratio_csv(tr, ratio), args.out)
    if args.out:
        summary = {"samples": len(tr), "mean_ratio": float(ratio.mean()), "pearson_wall_rapl": r}
        print(json.dumps(summary) if args.json else
              f"mean wall/rapl ratio {summary['mean_ratio']:.4f}, pearson {r:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Subcommands repeat the global flags with suppressed defaults so that a
    # value given before the subcommand is not overwritten.
    def d(value):
        return argparse.SUPPRESS if suppress else value

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=_seed, default=d(0), help="random seed (default 0); echoed to stderr")
    g.add_argument("--format", choices=[f.value for f in TraceFormat], default=d("csv"),
                   help="trace format when the file extension does not say (default csv)")
    g.add_argument("--json", action="store_true", default=d(False), help="print the result as one JSON document")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="hydra-power", description=__doc__, parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, parents=[common])
        sp.set_defaults(func=func)
        return sp

    g = add("generate", cmd_generate, "write a synthetic trace")
    g.add_argument("--regime", choices=[r.value for r in trace.Regime], default="mixed")
    g.add_argument("--samples", type=_int_at_least(1), default=1000, help="number of samples")
    g.add_argument("--noise", type=_float_in(0), default=0.0, help="power noise sigma in watts")
    g.add_argument("--container-noise", type=_float_in(0), default=0.0,
                   help="log-normal jitter sigma on interrupt and cache-miss channels")
    g.add_argument("--mix-period", type=_int_at_least(1), default=120,
                   help="samples per regime block in the mixed regime")
    g.add_argument("--profile", help="server profile JSON (default: built-in synthetic server)")
    g.add_argument("--out", required=True, help="output trace file (.csv or .jsonl)")

    c = add("correlate", cmd_correlate, "per-feature Pearson correlation with measured power")
    c.add_argument("--trace", required=True)
    c.add_argument("--threshold", type=_float_in(0, 1), default=0.7, help="|r| cutoff (default 0.7)")
    c.add_argument("--out", help="write the report here instead of stdout")

    t = add("train", cmd_train, "train an analytical or MLP power model")
    t.add_argument("--kind", choices=["analytical", "mlp"], required=True)
    t.add_argument("--trace", required=True)
    t.add_argument("--profile", help="server profile JSON")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--alpha", type=float, choices=models.ALPHAS,
                   help="analytical only: fix the exponent instead of fitting it")
    t.add_argument("--epochs", type=_int_at_least(0), default=100)
    t.add_argument("--learning-rate", type=_float_in(0, lo_open=True), default=1e-3)
    t.add_argument("--batch-size", type=_int_at_least(1), default=32)
    t.add_argument("--validation-fraction", type=_float_in(0, 0.999), default=0.1)

    s = add("train-selector", cmd_train_selector, "label windows and train the selector forest")
    s.add_argument("--trace", required=True)
    s.add_argument("--candidates", nargs="+", required=True,
                   help="candidate model files, cheapest first")
    s.add_argument("--profile", help="server profile JSON")
    s.add_argument("--out", required=True, help="hydra model file to write")
    s.add_argument("--window", type=_int_at_least(1), default=30)
    s.add_argument("--epsilon", type=_float_in(0), default=0.05,
                   help="relative RMSE slack for the lightest-adequate rule")
    s.add_argument("--trees", type=_int_at_least(1), default=100)
    s.add_argument("--max-depth", type=_int_at_least(1), default=12)
    s.add_argument("--min-samples-split", type=_int_at_least(1), default=2)
    s.add_argument("--features-per-split", type=_int_at_least(1), default=selector.ForestConfig.feature_subsample_k)
    s.add_argument("--no-bootstrap", action="store_true")
    s.add_argument("--selection-interval", type=_int_at_least(1), default=1)

    pr = add("predict", cmd_predict, "predict power for every sample of a trace")
    pr.add_argument("--model", required=True, help="hydra or single model file")
    pr.add_argument("--trace", required=True)
    pr.add_argument("--profile", help="server profile for single models (hydra files carry their own)")
    pr.add_argument("--out", help="prediction CSV (default stdout)")

    e = add("evaluate", cmd_evaluate, "RMSE overall and per utilization bin")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--predictions", help="prediction CSV from 'predict'")
    src.add_argument("--model", help="model file to run over the trace")
    e.add_argument("--trace", required=True)
    e.add_argument("--profile", help="server profile for single models")
    e.add_argument("--low-max", type=_float_in(0, 100), default=33.0)
    e.add_argument("--mid-max", type=_float_in(0, 100), default=66.0)
    e.add_argument("--out", help="also write the report as CSV")

    b = add("bench", cmd_bench, "per-sample inference latency")
    b.add_argument("--models", nargs="+", required=True)
    b.add_argument("--trace", required=True, help="samples cycled as benchmark inputs")
    b.add_argument("--profile", help="server profile for single models")
    b.add_argument("--iterations", type=_int_at_least(evaluation.MIN_BENCH_ITERATIONS), default=10_000)
    b.add_argument("--warmup", type=_int_at_least(0), default=200)
    b.add_argument("--out", help="also write the report as CSV")

    r = add("rapl-report", cmd_rapl_report, "wall power vs. RAPL ratio series")
    r.add_argument("--trace", required=True)
    r.add_argument("--out", help="ratio CSV (default stdout)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and args.low_max >= args.mid_max:
        parser.error("--low-max must be below --mid-max")
    print(f"seed={args.seed}", file=sys.stderr)
    try:
        return args.func(args)
    except (HydraError, OSError) as exc:
        print(f"hydra-power {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
