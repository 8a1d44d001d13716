"""``wavecast`` command-line entry point.

Exit codes: 0 success, 2 usage or data problems, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import RunConfig
from .data import (
    CurtailmentEvent,
    SynthConfig,
    load_csv,
    make_windows,
    kfold_split,
    synthesize_grid,
    write_csv,
)
from .errors import NumericError, WavecastError
from .gradcam import aggregate_variable_importance, gradcam_map
from .metrics import evaluate, run_ablation, train_fold
from .model import VARIANTS, load_checkpoint, save_checkpoint
from .plots import emit_plot

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(WavecastError):
    pass


def _event(text):
    try:
        parts = text.split(":")
        start, end = int(parts[0]), int(parts[1])
        fraction = float(parts[2]) if len(parts) > 2 else 0.8
    except (ValueError, IndexError):
        raise argparse.ArgumentTypeError(f"event must be START:END[:FRACTION], got {text!r}") from None
    return CurtailmentEvent(start, end, fraction)


def _comment(cfg: RunConfig, command: str) -> str:
    return f"wavecast {command}\n" + cfg.dump().rstrip("\n")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.override(getattr(args, "set", None))
    for key in ("seed", "epochs", "data", "mix", "days", "variant"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.set(key, value)
    if getattr(args, "output", None):
        cfg.set("output_dir", str(args.output))
    return cfg


def _records(cfg: RunConfig):
    if cfg["data"]:
        path = Path(cfg["data"])
        if not path.exists():
            raise UsageError(f"data file {path} does not exist")
        return load_csv(path, cfg["mix"] or None)
    if cfg["days"] < 2:
        raise UsageError("--days must be at least 2")
    return synthesize_grid(SynthConfig(seed=cfg["synth_seed"], days=cfg["days"],
                                       penetration=cfg["penetration"], noise=cfg["noise"]))


def _dataset(cfg: RunConfig):
    return make_windows(_records(cfg), cfg["T"], cfg["S"], cfg["stride"], source=cfg["data"] or "synthetic")


def _run_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg["output_dir"]) / f"{command}-{cfg.digest()}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    return out


def _folds(text, k):
    if text is None:
        return list(range(k))
    try:
        folds = sorted({int(f) for f in text.split(",")})
    except ValueError:
        raise UsageError(f"bad fold list {text!r}") from None
    if any(not 0 <= f < k for f in folds):
        raise UsageError(f"folds must lie in 0..{k - 1}")
    return folds


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.days < 2:
        raise UsageError("--days must be at least 2")
    config = SynthConfig(seed=args.seed, days=args.days, penetration=args.penetration, noise=args.noise,
                         events=list(args.event or []))
    records = synthesize_grid(config)
    echo = (f"wavecast synth days={args.days} seed={args.seed} penetration={args.penetration} "
            f"noise={args.noise} events={[(e.start, e.end, e.fraction) for e in config.events]}")
    out = Path(args.output)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(records, out, comment=echo)
    print(f"{len(records)} rows written to {out}")
    return EXIT_OK


def _write_curve(path, curve, comment):
    with open(path, "w", newline="") as fh:
        for line in comment.splitlines():
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, loss in enumerate(curve.train_loss):
            val = curve.val_loss[i] if i < len(curve.val_loss) else float("nan")
            w.writerow([i + 1, repr(loss), repr(val)])


def cmd_train(args) -> int:
    cfg = _config(args)
    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    ds = _dataset(cfg)
    split = kfold_split(len(ds), cfg["folds"], cfg["purge_gap"])
    out = _run_dir(cfg, "train")
    comment = _comment(cfg, "train")
    for fold in _folds(args.folds, split.k):
        model, curve = train_fold(ds, split, fold, model_cfg, train_cfg)
        save_checkpoint(out / f"fold{fold}.wvc", model, {"fold": fold, "run": out.name, "config": cfg.echo()})
        _write_curve(out / f"curve_fold{fold}.csv", curve, comment)
        print(f"fold {fold}: {len(curve.train_loss)} epochs, train loss {curve.train_loss[0]:.4f} -> "
              f"{curve.train_loss[-1]:.4f}, best epoch {curve.best_epoch + 1}, {curve.seconds:.1f}s")
    print(f"checkpoints in {out}")
    return EXIT_OK


def _checkpoints(run: Path, k: int, folds):
    found = {}
    for fold in folds:
        path = run / f"fold{fold}.wvc"
        if not path.exists():
            raise UsageError(f"missing checkpoint {path}")
        found[fold] = path
    return found


def cmd_eval(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"run directory {run} does not exist")
    cfg = _config(args)
    if not args.config and (run / "config.txt").exists():
        cfg = RunConfig.load(run / "config.txt")
        cfg.override(args.set)
        if args.data:
            cfg.set("data", args.data)
    ds = _dataset(cfg)
    split = kfold_split(len(ds), cfg["folds"], cfg["purge_gap"])
    folds = _folds(args.folds, split.k)
    report = evaluate(_checkpoints(run, split.k, folds), ds, split, folds, cfg["variant"], cfg["seed"],
                      dump_path=run / "predictions.csv" if args.dump else None)
    report.to_csv(run / "report.csv", comment=_comment(cfg, "eval"))
    text = report.to_text()
    (run / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg)
    split = kfold_split(len(ds), cfg["folds"], cfg["purge_gap"])
    seeds = [int(s) for s in args.seeds.split(",")]
    folds = _folds(args.folds, split.k)
    result = run_ablation(ds, split, cfg.model_config(), cfg.train_config(), seeds, folds,
                          log=lambda v, s, f, c: print(f"{v} seed {s} fold {f}: {len(c.train_loss)} epochs",
                                                       flush=True))
    out = _run_dir(cfg, "ablate")
    result.to_csv(out / "ablation.csv", comment=_comment(cfg, "ablate") + f"\nseeds={seeds} folds={folds}")
    for variant, reports in result.reports.items():
        for rep in reports:
            rep.to_csv(out / f"report_{variant}_seed{rep.seed}.csv", comment=_comment(cfg, "ablate"))
    text = result.to_text()
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _window(args):
    model = load_checkpoint(args.checkpoint)
    echo = model.extra.get("config", {})
    cfg = RunConfig({k: v for k, v in echo.items() if not isinstance(v, list)})
    if echo.get("wavelets"):
        cfg.set("wavelets", tuple(echo["wavelets"]))
    if args.data:
        cfg.set("data", args.data)
    ds = _dataset(cfg)
    if not 0 <= args.window < len(ds):
        raise UsageError(f"window {args.window} out of range 0..{len(ds) - 1}")
    return model, ds, cfg


def cmd_predict(args) -> int:
    model, ds, cfg = _window(args)
    res = model.predict(ds.X[args.window], window_id=args.window)
    actual = ds.e[args.window] if args.with_actual else None
    out = Path(args.output or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"forecast_w{args.window}"
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        fh.write(f"# window={args.window} checkpoint={args.checkpoint}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "predicted", "actual"])
        for s, p in enumerate(res.prediction):
            w.writerow([s + 1, repr(float(p)), "" if actual is None else repr(float(actual[s]))])
    series = {"predicted": res.prediction}
    if actual is not None:
        series["actual"] = actual
    emit_plot(series, "line", out / f"{stem}.svg", title=f"CIF forecast, window {args.window}",
              config={"window": args.window, "checkpoint": str(args.checkpoint), **cfg.echo()},
              ylabel="g CO2-e/kWh")
    print(f"forecast written to {out / (stem + '.csv')}")
    return EXIT_OK


def cmd_explain(args) -> int:
    model, ds, cfg = _window(args)
    target = args.target if args.target == "sum" else int(args.target)
    sal = gradcam_map(model, ds.X[args.window], layer=args.layer, target=target, upsample=args.upsample)
    out = Path(args.output or Path(args.checkpoint).parent)
    stem = f"saliency_w{args.window}_{args.layer}"
    sal.to_csv(out / f"{stem}.csv", comment=f"window={args.window} checkpoint={args.checkpoint}")
    emit_plot(sal.values, "heatmap", out / f"{stem}.svg", title=f"Grad-CAM ({args.layer}), window {args.window}",
              config={"window": args.window, "layer": args.layer, "target": sal.target, **cfg.echo()},
              row_labels=sal.labels)
    per_var, _ = aggregate_variable_importance(sal)
    for label, v in zip(sal.labels, per_var):
        print(f"{label:>24} {v:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavecast", description="Wavelet-based multivariate CIF forecaster.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic hourly grid CSV")
    s.add_argument("--days", type=int, default=365)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--penetration", type=float, default=0.5)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--event", type=_event, action="append", help="curtailment START:END[:FRACTION] in hours")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    def common(sp, run_dir=False):
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data", help="grid CSV (synthesized when omitted)")
        sp.add_argument("--folds", help="comma-separated fold ids (default: all)")
        if not run_dir:
            sp.add_argument("--mix", help="generation-mix CSV supplying CIF")
            sp.add_argument("--days", type=int, help="days of synthetic data when --data is omitted")
            sp.add_argument("--epochs", type=int)
            sp.add_argument("-o", "--output", help="output directory (run-id subfolders are created)")

    t = sub.add_parser("train", help="train one model per fold")
    common(t)
    t.add_argument("--variant", choices=VARIANTS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score per-fold checkpoints")
    common(e, run_dir=True)
    e.add_argument("--run", required=True, help="directory produced by train")
    e.add_argument("--dump", action="store_true", help="also write per-window predictions")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare complete model against both ablations")
    common(a)
    a.add_argument("--seeds", default="0,1,2")
    a.set_defaults(func=cmd_ablate)

    for name, func, help_text in (("predict", cmd_predict, "forecast one window"),
                                  ("explain", cmd_explain, "Grad-CAM saliency for one window")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", help="grid CSV (default: regenerate the training data)")
        sp.add_argument("--window", type=int, required=True)
        sp.add_argument("-o", "--output", help="output directory (default: next to the checkpoint)")
        sp.set_defaults(func=func)
        if name == "predict":
            sp.add_argument("--no-actual", dest="with_actual", action="store_false",
                            help="plot the forecast only")
        else:
            sp.add_argument("--layer", default="lt")
            sp.add_argument("--target", default="sum", help="'sum' or a 1-based forecast step")
            sp.add_argument("--upsample", choices=("linear", "nearest"), default="linear")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WavecastError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
