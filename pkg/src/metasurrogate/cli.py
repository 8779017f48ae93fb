"""Command-line entry point: ``metasurrogate <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric error.
Set ``METASURROGATE_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import geometry, physics, plots
from . import surrogate as sg
from .errors import DataError, NumericError, SurrogateError, UsageError
from .fileio import atomic_write, write_csv

log = logging.getLogger("metasurrogate")

THREADS_ENV = "METASURROGATE_THREADS"
HISTORY_CSV_FIELDS = (
    "epoch", "train_huber", "train_mse", "train_mae", "train_cs", "val_mse", "val_mae", "val_cs",
)
SWEEP_CSV_FIELDS = ("delta", "val_mse", "val_mae")
DEFAULT_DELTA_GRID = "0.25:3.0:0.25"


# --- argument helpers --------------------------------------------------------


def parse_fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"--split expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--split expects three comma-separated numbers, got {text!r}")
    return parts


def parse_params(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"--params expects comma-separated numbers, got {text!r}") from None


def parse_delta_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma list; every delta must be > 0."""
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            if step <= 0 or stop < start:
                raise UsageError(f"empty delta grid {text!r}")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            grid = [round(start + k * step, 10) for k in range(count)]
        else:
            grid = [float(p) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse delta grid {text!r}") from None
    bad = [d for d in grid if not d > 0]
    if bad:
        raise UsageError(
            f"delta grid contains {bad}: the Huber loss is identically zero at delta = 0 "
            "(and undefined below), so those runs would not train"
        )
    return grid


def load_stack(text: str) -> physics.StackConfig:
    """Stack from a JSON file path or inline JSON.

    Layers may name a library material (``{"material": "fr4", ...}``)
    instead of listing eps_r, tan_de, mu_r and tan_dm.
    """
    raw = text if text.lstrip().startswith("{") else _read_text(text)
    try:
        d = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"stack description is not valid JSON: {exc}") from exc
    library = ds.material_library()
    for layer in d.get("layers", []):
        name = layer.pop("material", None)
        if name is not None:
            if name not in library:
                raise DataError(f"unknown material {name!r}; choose from {', '.join(library)}")
            m = library[name]
            layer.update(eps_r=m.eps_r, tan_de=m.tan_de, mu_r=m.mu_r, tan_dm=m.tan_dm, name=name)
    return physics.StackConfig.from_dict(d)


def _read_text(path) -> str:
    try:
        return Path(path).read_text("utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _dataset_id(directory) -> str:
    data = (Path(directory) / "manifest.json").read_bytes()
    return f"{zlib.crc32(data) & 0xFFFFFFFF:08x}"


def _require_finite(values: dict, where: str) -> None:
    for k, v in values.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise NumericError(f"{where}: {k} is {v}")


# --- reusable command bodies ---------------------------------------------------


def history_rows(history):
    return [[h[k] for k in HISTORY_CSV_FIELDS] for h in history]


def sweep_delta(data: ds.Dataset, grid, epochs: int, seed: int = 0, descriptor=None,
                batch_size: int = 32, learning_rate: float = 1e-4, on_point=None):
    """Train one fresh model per delta on identical data, seeds and init.

    Returns ``(rows, selected_delta)``; the selection is the row with the
    lowest best-checkpoint validation MSE (first one on ties).
    """
    descriptor = descriptor or sg.ArchitectureDescriptor(data.resolution)
    x_va, c_va, t_va = data.subset("val")
    rows = []
    for delta in grid:
        model = sg.build(descriptor, seed)
        cfg = sg.TrainConfig(epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
                             delta=delta, seed=seed)
        sg.train(model, data, cfg)
        val = sg.evaluate(model, x_va, c_va, t_va, delta)
        row = {"delta": delta, "val_mse": val["mse"], "val_mae": val["mae"],
               "best_epoch": model.checkpoint_epoch}
        _require_finite(row, f"sweep at delta={delta}")
        rows.append(row)
        if on_point is not None:
            on_point(row)
    selected = min(rows, key=lambda r: r["val_mse"])["delta"]
    return rows, selected


def time_inference(model: sg.SurrogateModel, images, configs, repeats: int = 1) -> float:
    """Mean wall seconds to predict one sample (batch of one), after a warm-up."""
    model.forward(images[:1], configs[:1])
    t0 = time.perf_counter()
    for _ in range(repeats):
        for i in range(images.shape[0]):
            model.forward(images[i : i + 1], configs[i : i + 1])
    return (time.perf_counter() - t0) / (repeats * images.shape[0])


def time_oracle(records, resolution: int) -> float:
    """Mean wall seconds to rasterize a pattern and solve its spectrum."""
    t0 = time.perf_counter()
    for rec in records:
        physics.reflection_spectrum(rec.stack, geometry.render(rec.pattern, resolution))
    return (time.perf_counter() - t0) / len(records)


def evaluate_report(model: sg.SurrogateModel, data: ds.Dataset, splits, threshold_db=-10.0,
                    timing_samples: int = 20) -> dict:
    """Metrics per split, band comparison and timing for the first split."""
    if data.resolution != model.descriptor.input_resolution:
        raise DataError(
            f"dataset resolution {data.resolution} does not match model "
            f"resolution {model.descriptor.input_resolution}"
        )
    delta = model.train_config.delta if model.train_config else 3.0
    metrics = {}
    for name in splits:
        x, c, t = data.subset(name)
        metrics[name] = sg.evaluate(model, x, c, t, delta)
        _require_finite(metrics[name], f"{name} metrics")
    primary = splits[0]
    idx = np.asarray(data.splits[primary], dtype=np.int64)
    x, c, t = data.images[idx], data.configs[idx], data.targets[idx]
    pred_db = np.clip(ds.denormalize(model.predict_normalized(x, c).astype(np.float64)),
                      physics.DB_FLOOR, physics.DB_CEIL)
    target_db = ds.denormalize(t.astype(np.float64))
    bands = []
    for k, i in enumerate(idx.tolist()):
        p = physics.band_below_threshold(pred_db[k], threshold_db)
        o = physics.band_below_threshold(target_db[k], threshold_db)
        bands.append({"index": i, "predicted": p, "target": o, "agree": physics.bands_match(p, o)})
    agree = sum(b["agree"] for b in bands)

    n_time = max(1, min(timing_samples, idx.size))
    surrogate_s = time_inference(model, x[:n_time], c[:n_time])
    timing = {"samples": n_time, "surrogate_seconds_per_sample": surrogate_s}
    if data.records:
        oracle_s = time_oracle([data.records[i] for i in idx[:n_time]], data.resolution)
        timing.update(oracle_seconds_per_sample=oracle_s, surrogate_to_oracle_ratio=surrogate_s / oracle_s)
    else:
        raise DataError("dataset has no samples.jsonl; oracle timing needs the sample descriptions")
    return {
        "metrics": metrics,
        "band_agreement": {
            "split": primary,
            "threshold_db": threshold_db,
            "tolerance_ghz": 3 * physics.FREQ_STEP_GHZ,
            "agreeing": agree,
            "total": len(bands),
            "fraction": agree / len(bands),
        },
        "bands": bands,
        "timing": timing,
        "_spectra": (pred_db, target_db),
    }


# --- commands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    fractions = parse_fractions(args.split)
    ds.split_sizes(args.n, fractions)  # fail fast before generating
    data = ds.generate(args.n, args.res, args.seed, workers=args.workers)
    split_seed = args.seed if args.split_seed is None else args.split_seed
    splits = ds.split(data, fractions, split_seed)
    ds.save(data, args.out)
    print(
        f"gen: samples={args.n} resolution={args.res} seed={args.seed} split_seed={split_seed} "
        f"train={len(splits['train'])} val={len(splits['val'])} test={len(splits['test'])} "
        f"library={ds.LIBRARY_ID} out={args.out}"
    )
    return 0


def cmd_train(args) -> int:
    data = ds.load(args.data)
    cfg = sg.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr, beta1=args.beta1,
        beta2=args.beta2, delta=args.delta, seed=args.seed, deterministic=args.deterministic,
        target_val_cs=args.target_cs, target_val_mse=args.target_mse, max_seconds=args.max_seconds,
    )
    print(
        f"train: lr={cfg.learning_rate:g} beta1={cfg.beta1:g} beta2={cfg.beta2:g} "
        f"delta={cfg.delta:g} batch={cfg.batch_size} epochs={cfg.epochs} seed={cfg.seed} "
        f"deterministic={cfg.deterministic} resolution={data.resolution} data={args.data}"
    )
    model = sg.build(sg.ArchitectureDescriptor(data.resolution), args.seed)
    out = Path(args.out)

    def on_epoch(row):
        if args.progress:
            print(f"epoch {row['epoch']}: val_mse={row['val_mse']:.6f} val_cs={row['val_cs']:.6f}")

    try:
        sg.train(model, data, cfg, on_epoch)
    finally:
        # keep whatever history exists, including after a numeric abort
        if model.history:
            write_csv(out / "history.csv", HISTORY_CSV_FIELDS, history_rows(model.history))
    sg.save_model(model, out, include_optimizer=args.save_optimizer)
    if args.figures:
        plots.history_figure(model.history, out / "history.png")
    last = model.history[-1]
    print(
        f"train: epochs_run={len(model.history)} best_epoch={model.checkpoint_epoch} "
        f"best_val_mse={model.checkpoint_val_mse:.6f} last_val_cs={last['val_cs']:.6f} "
        f"seconds={last['seconds']:.1f} out={out}"
    )
    return 0


def cmd_sweep_delta(args) -> int:
    grid = parse_delta_grid(args.grid)
    data = ds.load(args.data)
    out = Path(args.out)
    print(f"sweep-delta: grid={grid} epochs={args.epochs} seed={args.seed} data={args.data}")

    def on_point(row):
        print(f"delta={row['delta']:g}: val_mse={row['val_mse']:.6f} val_mae={row['val_mae']:.6f}")

    rows, selected = sweep_delta(
        data, grid, args.epochs, args.seed, batch_size=args.batch, learning_rate=args.lr,
        on_point=on_point,
    )
    write_csv(out / "sweep.csv", SWEEP_CSV_FIELDS, [[r[k] for k in SWEEP_CSV_FIELDS] for r in rows])
    report = {
        "command": args.argv,
        "seed": args.seed,
        "epochs": args.epochs,
        "dataset": {"path": str(args.data), "id": _dataset_id(args.data)},
        "sweep": rows,
        "selected_delta": selected,
    }
    atomic_write(out / "sweep.json", (json.dumps(report, indent=2) + "\n").encode())
    if args.figures:
        plots.sweep_figure(rows, out / "sweep.png", selected)
    print(f"sweep-delta: selected delta={selected:g} out={out}")
    return 0


def cmd_eval(args) -> int:
    data = ds.load(args.data)
    model = sg.load_model(args.model, expect_resolution=data.resolution)
    splits = [s.strip() for s in args.split.split(",") if s.strip()]
    if not splits:
        raise UsageError("--split needs at least one split name")
    result = evaluate_report(model, data, splits, args.threshold, args.timing_samples)
    pred_db, target_db = result.pop("_spectra")
    report = {
        "command": args.argv,
        "seeds": {
            "dataset_master_seed": data.master_seed,
            "train_seed": model.train_config.seed if model.train_config else None,
        },
        "dataset": {"path": str(args.data), "id": _dataset_id(args.data),
                    "sample_count": len(data), "resolution": data.resolution},
        "model": {"path": str(args.model), "parameter_count": model.parameter_count,
                  "checkpoint_epoch": model.checkpoint_epoch},
        **result,
        "sweep": None,
    }
    report_path = Path(args.report)
    atomic_write(report_path, (json.dumps(report, indent=2) + "\n").encode())
    if args.figures:
        fig_path = report_path.with_suffix(".png")
        plots.eval_figure(physics.frequency_grid(), pred_db, target_db, fig_path)
    for name, m in result["metrics"].items():
        print(f"eval[{name}]: mse={m['mse']:.6f} mae={m['mae']:.6f} cs={m['cs']:.6f}")
    ba, tm = result["band_agreement"], result["timing"]
    print(
        f"eval: band_agreement={ba['agreeing']}/{ba['total']} ({ba['fraction']:.3f}) "
        f"surrogate_ms={1e3 * tm['surrogate_seconds_per_sample']:.2f} "
        f"oracle_ms={1e3 * tm['oracle_seconds_per_sample']:.2f} "
        f"ratio={tm['surrogate_to_oracle_ratio']:.3f} report={report_path}"
    )
    return 0


def cmd_predict(args) -> int:
    model = sg.load_model(args.model)
    res = model.descriptor.input_resolution
    pattern = geometry.PatternSpec(geometry.parse_class(args.pattern_class), parse_params(args.params))
    stack = load_stack(args.stack_json)
    grid = geometry.render(pattern, res)
    pred = sg.predict(model, grid, ds.encode_config(stack), args.threshold)
    oracle = physics.reflection_spectrum(stack, grid)
    freqs = physics.frequency_grid()
    rows = zip(freqs, pred.s11_db, oracle, pred.absorption)
    out = args.out
    write_csv(f"{out}.csv", ("freq_ghz", "s11_db_pred", "s11_db_oracle", "absorption_pred"), rows)
    svg = plots.spectrum_svg(freqs, pred.s11_db, oracle, args.threshold,
                             title=f"{pattern.pattern_class.value} {list(pattern.params)}")
    atomic_write(f"{out}.svg", svg.encode("utf-8"))
    fmt = lambda bands: ", ".join(f"{a:.2f}-{b:.2f}" for a, b in bands) or "none"
    print(f"predict: bands_pred=[{fmt(pred.bands)}] "
          f"bands_oracle=[{fmt(physics.band_below_threshold(oracle, args.threshold))}] "
          f"out={out}.csv,{out}.svg")
    return 0


def cmd_dump_pgm(args) -> int:
    if args.data is not None:
        data = ds.load(args.data)
        if not 0 <= args.index < len(data):
            raise UsageError(f"--index must be in [0, {len(data) - 1}]")
        grid = data.images[args.index]
    elif args.pattern_class is not None and args.params is not None:
        pattern = geometry.PatternSpec(geometry.parse_class(args.pattern_class), parse_params(args.params))
        grid = geometry.render(pattern, args.res)
    else:
        raise UsageError("dump-pgm needs either --data/--index or --class/--params")
    atomic_write(args.out, geometry.to_pgm(grid))
    print(f"dump-pgm: {grid.shape[0]}x{grid.shape[1]} out={args.out}")
    return 0


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metasurrogate", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--res", type=int, default=geometry.DEFAULT_RESOLUTION)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="0.9,0.05,0.05", help="train,val,test fractions")
    g.add_argument("--split-seed", type=int, default=None, help="defaults to --seed")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    figures = argparse.ArgumentParser(add_help=False)
    figures.add_argument("--no-figures", dest="figures", action="store_false",
                         help="skip the matplotlib PNG figures")

    t = sub.add_parser("train", parents=[figures], help="train a surrogate model")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=1000)
    t.add_argument("--delta", type=float, default=3.0)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--beta1", type=float, default=0.5)
    t.add_argument("--beta2", type=float, default=0.999)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--target-cs", type=float, default=None, help="stop once val CS reaches this")
    t.add_argument("--target-mse", type=float, default=None, help="and val MSE is at most this")
    t.add_argument("--max-seconds", type=float, default=None, help="wall-clock budget")
    t.add_argument("--save-optimizer", action="store_true")
    t.add_argument("--progress", action="store_true", help="print one line per epoch")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep-delta", parents=[figures], help="sweep the Huber delta")
    s.add_argument("--data", required=True)
    s.add_argument("--grid", default=DEFAULT_DELTA_GRID, help="start:stop:step or a comma list")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_delta)

    e = sub.add_parser("eval", parents=[figures], help="evaluate a model, write a report")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", help="split name(s), comma-separated")
    e.add_argument("--report", required=True)
    e.add_argument("--threshold", type=float, default=-10.0)
    e.add_argument("--timing-samples", type=int, default=20)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="predict one structure and compare with the oracle")
    pr.add_argument("--model", required=True)
    pr.add_argument("--class", dest="pattern_class", required=True)
    pr.add_argument("--params", required=True, help="comma-separated, each in [0, 1]")
    pr.add_argument("--stack-json", required=True, help="JSON file path or inline JSON")
    pr.add_argument("--threshold", type=float, default=-10.0)
    pr.add_argument("--out", required=True, help="output prefix for .csv and .svg")
    pr.set_defaults(func=cmd_predict)

    d = sub.add_parser("dump-pgm", help="write a pattern raster as a binary PGM")
    d.add_argument("--data")
    d.add_argument("--index", type=int, default=0)
    d.add_argument("--class", dest="pattern_class")
    d.add_argument("--params")
    d.add_argument("--res", type=int, default=geometry.DEFAULT_RESOLUTION)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_pgm)
    return p


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = ["metasurrogate", *argv]
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except SurrogateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
