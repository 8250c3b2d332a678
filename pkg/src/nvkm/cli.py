"""Command-line interface: ``nvkm {train,predict,evaluate,validate,sample-prior}``.

Runs are described by one JSON document::

    {
      "data": {"source": "synthetic", "n": 1200, "split": {"fraction": 0.333}},
      "model": {"order": 2, "vk_range": 2.0},
      "training": {"epochs_phase1": 500},
      "io_mode": false,
      "output_dir": "runs/demo",
      "seed": 0,
      "range_search": {"count": 0, "bounds": [0.5, 4.0], "candidates": null}
    }

Only ``data.source`` is required; relative paths are taken from the
working directory. ``train`` writes the checkpoint, the
ELBO trace, the train/test CSVs and ``config.json``, a fully resolved
echo of the run that reproduces it when passed back in.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import jax
import numpy as np

from nvkm import errors
from nvkm.checkpoint import checkpoint_load, checkpoint_save
from nvkm.data import (
    CsvSchema,
    SplitSpec,
    Standardization,
    TimeSeriesDataset,
    destandardize,
    destandardize_sd,
    gen_synthetic,
    load_csv,
    nlpd,
    nmse,
    rmse,
    split,
    standardize,
    write_csv,
)
from nvkm.inference import TrainingConfig, predict, sample_input, sample_vk_diagonal, train
from nvkm.model import ModelConfig, VolterraModel, init_model

log = logging.getLogger("nvkm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_ERRORS = (
    FileNotFoundError,
    errors.ParseError,
    errors.EmptySeries,
    errors.IncompatibleCheckpoint,
)
NUMERIC_ERRORS = (
    errors.IllConditionedGram,
    errors.NumericInconsistency,
    errors.NonFiniteGradient,
    errors.TrainingAborted,
    errors.UndefinedMetric,
)

RUN_DEFAULTS = {
    "model": {},
    "training": {},
    "io_mode": False,
    "output_dir": "nvkm-run",
    "seed": 0,
    "range_search": {"count": 0, "bounds": [0.5, 4.0], "candidates": None},
}
DATA_DEFAULTS = {
    "synthetic": {"n": 1200, "t_range": [-20.0, 20.0], "noise": 0.05},
    "csv": {"schema": {}},
}


class UsageError(errors.NVKMError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


def resolve_config(raw: dict) -> dict:
    """Fill defaults; the result is plain JSON and stable under re-resolution."""
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - set(RUN_DEFAULTS) - {"data"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg = copy.deepcopy(RUN_DEFAULTS)
    for k, v in raw.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = copy.deepcopy(v)
    data = cfg.get("data")
    if not isinstance(data, dict) or "source" not in data:
        raise UsageError("config needs data.source ('synthetic' or 'csv')")
    source = data["source"]
    if source not in DATA_DEFAULTS:
        raise UsageError(f"unknown data source {source!r}")
    if source == "csv" and "path" not in data:
        raise UsageError("csv data needs data.path")
    seed = int(cfg["seed"])
    data = {**copy.deepcopy(DATA_DEFAULTS[source]), "standardize": True, **data}
    if source == "synthetic":
        data.setdefault("seed", seed)
    else:
        try:
            data["schema"] = CsvSchema.from_dict(data["schema"]).to_dict()
        except TypeError as exc:
            raise UsageError(f"invalid csv schema: {exc}") from exc
    try:
        data["split"] = SplitSpec.from_dict({"seed": seed, **data.get("split", {})}).to_dict()
        cfg["training"] = TrainingConfig.from_dict(
            {"seed": seed, **cfg["training"], "io_mode": bool(cfg["io_mode"])}
        ).to_dict()
        model = {"seed": seed, **cfg["model"], "io_mode": bool(cfg["io_mode"])}
        ModelConfig.from_dict(model)
    except (errors.InvalidArgument, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    cfg["data"] = data
    cfg["model"] = model
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    return resolve_config(raw)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_dataset(data_cfg: dict, base: Path = Path(".")) -> TimeSeriesDataset:
    if data_cfg["source"] == "synthetic":
        return gen_synthetic(
            int(data_cfg["n"]),
            tuple(data_cfg["t_range"]),
            seed=int(data_cfg["seed"]),
            noise=float(data_cfg["noise"]),
            **({"amplitude": float(data_cfg["amplitude"])} if "amplitude" in data_cfg else {}),
        )
    path = Path(data_cfg["path"])
    if not path.is_absolute():
        path = base / path
    return load_csv(path, CsvSchema.from_dict(data_cfg["schema"]))


def model_config_for(model_block: dict, train: TimeSeriesDataset) -> ModelConfig:
    """Model config with the time span and data count filled from ``train``."""
    lo, hi = train.time_span()
    counts = [len(t) for t in train.t] + ([len(train.tx)] if train.has_input else [])
    auto = {"t_min": lo, "t_max": hi, "n_data": max(counts), "n_outputs": train.n_outputs}
    return ModelConfig.from_dict({**auto, **model_block})


# ---------------------------------------------------------------------------
# train


def _training_nlpd(model: VolterraModel, ds: TimeSeriesDataset, samples: int, seed: int) -> float:
    """Summed per-point NLPD on (standardized) training outputs and input."""
    key = jax.random.PRNGKey(seed)
    pred = predict(model, list(ds.t), samples, key)
    total = sum(nlpd(pred.samples[d], pred.noise[d], ds.y[d]) for d in range(ds.n_outputs) if len(ds.y[d]))
    if model.io_mode and ds.has_input:
        f = sample_input(model, ds.tx, samples, key)
        total += nlpd(f, float(model.noise("x")), ds.x)
    return float(total)


def _range_candidates(cfg: dict, order: int) -> list:
    search = cfg["range_search"]
    if search.get("candidates"):
        return [c if isinstance(c, list) else [float(c)] * order for c in search["candidates"]][
            : int(search["count"]) or None
        ]
    lo, hi = search["bounds"]
    rng = np.random.default_rng([int(cfg["seed"]), 5])
    return [[float(r) for r in rng.uniform(lo, hi, order)] for _ in range(int(search["count"]))]


def run_train(cfg: dict, base: Path = Path("."), out=sys.stdout) -> Path:
    out_dir = Path(cfg["output_dir"])
    if not out_dir.is_absolute():
        out_dir = base / out_dir
    ds = load_dataset(cfg["data"], base)
    if cfg["io_mode"] and not ds.has_input:
        raise errors.InvalidArgument("io_mode requires an observed input series (schema.input)")
    train_ds, test_ds = split(ds, SplitSpec.from_dict(cfg["data"]["split"]))
    if cfg["data"]["standardize"]:
        train_std, stdz = standardize(train_ds)
    else:
        train_std, stdz = train_ds, Standardization.identity(ds.n_outputs)
    tcfg = TrainingConfig.from_dict(cfg["training"])
    mcfg = model_config_for(cfg["model"], train_std)

    search_rows = []
    if int(cfg["range_search"]["count"]) > 0:
        best = None
        for i, ranges in enumerate(_range_candidates(cfg, mcfg.order)):
            candidate = replace(mcfg, vk_range=ranges)
            model, _ = train(init_model(candidate), train_std, tcfg)
            score = _training_nlpd(model, train_std, tcfg.eval_samples, tcfg.seed)
            search_rows.append((i, ranges, score))
            print(f"range candidate {i}: {ranges} training NLPD {score:.4f}", file=out)
            if best is None or score < best[1]:
                best = (ranges, score)
        mcfg = replace(mcfg, vk_range=best[0])

    model, trace = train(init_model(mcfg), train_std, tcfg)
    model.metadata = {
        "standardization": stdz.to_dict(),
        "output_names": list(ds.names),
        "input_name": ds.input_name,
        "seed": int(cfg["seed"]),
        "training": tcfg.to_dict(),
    }

    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_save(model, out_dir / "model.ckpt")
    (out_dir / "trace.csv").write_text(trace.to_csv(), encoding="utf-8")
    write_csv(train_ds, out_dir / "train.csv")
    write_csv(test_ds, out_dir / "test.csv")
    resolved = copy.deepcopy(cfg)
    resolved["model"] = mcfg.to_dict()
    resolved["range_search"] = {**cfg["range_search"], "count": 0}
    (out_dir / "config.json").write_text(_dump(resolved), encoding="utf-8")
    if search_rows:
        lines = ["candidate,ranges,training_nlpd"]
        lines += [f"{i},{' '.join(repr(r) for r in rs)},{s!r}" for i, rs, s in search_rows]
        (out_dir / "range_search.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"trained C={mcfg.order} D={mcfg.n_outputs} for {len(trace)} steps; wrote {out_dir}", file=out)
    return out_dir


# ---------------------------------------------------------------------------
# predict / evaluate


def _standardization(model: VolterraModel) -> Standardization:
    meta = model.metadata.get("standardization")
    return Standardization.from_dict(meta) if meta else Standardization.identity(model.n_outputs)


def parse_times(spec: str) -> np.ndarray:
    """``start:stop:num`` (inclusive linspace) or a comma list of times."""
    try:
        if ":" in spec:
            start, stop, num = spec.split(":")
            return np.linspace(float(start), float(stop), int(num))
        return np.asarray([float(v) for v in spec.split(",") if v.strip()])
    except ValueError as exc:
        raise UsageError(f"cannot parse times {spec!r}: {exc}") from exc


def prediction_csv(model: VolterraModel, times: list, samples: int, seed: int) -> str:
    """CSV with columns output,t,mean,sd,lower,upper in original units; band is mean +- 2 sd."""
    stdz = _standardization(model)
    pred = predict(model, times, samples, jax.random.PRNGKey(seed))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["output", "t", "mean", "sd", "lower", "upper"])
    for d in range(model.n_outputs):
        mean = destandardize(pred.mean[d], stdz, d)
        sd = destandardize_sd(pred.sd[d], stdz, d)
        for ti, m, s in zip(pred.times[d], mean, sd):
            w.writerow([d, repr(float(ti)), repr(float(m)), repr(float(s)), repr(float(m - 2 * s)), repr(float(m + 2 * s))])
    return buf.getvalue()


def evaluate_model(model: VolterraModel, ds: TimeSeriesDataset, samples: int, seed: int) -> list[dict]:
    """Per-output NMSE/RMSE/NLPD in original units plus an ``all`` row (means over outputs)."""
    if ds.n_outputs != model.n_outputs:
        raise errors.InvalidArgument(f"test data has {ds.n_outputs} outputs, model {model.n_outputs}")
    stdz = _standardization(model)
    pred = predict(model, list(ds.t), samples, jax.random.PRNGKey(seed))
    rows = []
    for d in range(ds.n_outputs):
        if len(ds.y[d]) == 0:
            continue
        mean = destandardize(pred.mean[d], stdz, d)
        f = destandardize(pred.samples[d], stdz, d)
        noise = pred.noise[d] * stdz.scale[d]
        try:
            metrics = {
                "nmse": nmse(mean, ds.y[d]),
                "rmse": rmse(mean, ds.y[d]),
                "nlpd": nlpd(f, noise, ds.y[d]),
            }
        except errors.UndefinedMetric as exc:
            raise errors.UndefinedMetric(f"output {ds.names[d]!r}: {exc}") from exc
        rows.append({"output": ds.names[d], "n": len(ds.y[d]), **metrics})
    if not rows:
        raise errors.EmptySeries("test data has no observations")
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("nmse", "rmse", "nlpd")}
    rows.append({"output": "all", "n": sum(r["n"] for r in rows), **agg})
    for r in rows:
        r.update(samples=samples, seed=seed)
    return rows


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["output", "n", "nmse", "rmse", "nlpd", "samples", "seed"]
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] if c in ("output", "n", "samples", "seed") else repr(float(r[c])) for c in cols])
    return buf.getvalue()


def metrics_summary(rows: list[dict]) -> str:
    lines = [f"{'output':>12} {'n':>6} {'NMSE':>10} {'RMSE':>10} {'NLPD':>10}"]
    for r in rows:
        lines.append(f"{r['output']:>12} {r['n']:>6} {r['nmse']:>10.4f} {r['rmse']:>10.4f} {r['nlpd']:>10.4f}")
    lines.append(f"(S={rows[0]['samples']}, seed={rows[0]['seed']})")
    return "\n".join(lines)


def schema_for(model: VolterraModel, text: str | None = None) -> CsvSchema:
    """Schema from JSON text or file, else the checkpoint's output names."""
    if text:
        if Path(text).exists():
            text = Path(text).read_text(encoding="utf-8")
        try:
            return CsvSchema.from_dict(json.loads(text))
        except (json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"bad --schema: {exc}") from exc
    names = model.metadata.get("output_names") or [f"y{d}" for d in range(model.n_outputs)]
    return CsvSchema("t", list(names), None, ",")


# ---------------------------------------------------------------------------
# sample-prior


def prior_samples_csv(cfg: dict, n_draws: int, points: int = 200) -> str:
    """Long CSV ``kind,output,order,draw,t,value`` of prior draws.

    ``kind`` is ``input`` (u), ``vk_diagonal`` (G_{d,c}(s, ..., s) on
    ``[-r, r]``, with ``t`` holding ``s``) or ``output`` (f_d).
    """
    mcfg = ModelConfig.from_dict(cfg["model"])
    model = init_model(mcfg).set_prior_posteriors()
    key = jax.random.PRNGKey(int(cfg["seed"]))
    t = np.linspace(mcfg.t_min, mcfg.t_max, points)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "output", "order", "draw", "t", "value"])

    def emit(kind, d, c, grid, values):
        for s, row in enumerate(values):
            for ti, v in zip(grid, row):
                w.writerow([kind, d, c, s, repr(float(ti)), repr(float(v))])

    emit("input", "", "", t, sample_input(model, t, n_draws, key))
    for d in range(model.n_outputs):
        for c, r in enumerate(mcfg.ranges(), start=1):
            s_grid = np.linspace(-r, r, points)
            emit("vk_diagonal", d, c, s_grid, sample_vk_diagonal(model, d, c, s_grid, n_draws, key))
    pred = predict(model, t, n_draws, key)
    for d in range(model.n_outputs):
        emit("output", d, "", t, pred.samples[d])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nvkm", description="Volterra series of Gaussian processes for time series")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tr = sub.add_parser("train", help="train a model from a JSON run config")
    tr.add_argument("config")
    tr.add_argument("--output-dir", help="override output_dir")
    tr.add_argument("--range-search", type=int, metavar="K", help="try K VK range settings, keep the best")

    pr = sub.add_parser("predict", help="write predictive mean, sd and 2-sigma band")
    pr.add_argument("checkpoint")
    g = pr.add_mutually_exclusive_group()
    g.add_argument("--times", help="start:stop:num or comma-separated times")
    g.add_argument("--times-from", help="CSV whose output times are used")
    pr.add_argument("--samples", type=int, default=50)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--output", "-o", help="CSV path (default stdout)")

    ev = sub.add_parser("evaluate", help="NMSE/RMSE/NLPD on held-out data")
    ev.add_argument("checkpoint")
    ev.add_argument("--data", required=True, help="test CSV")
    ev.add_argument("--schema", help="CSV schema as JSON text or file")
    ev.add_argument("--samples", type=int, default=50)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--output", "-o", help="metrics CSV path")

    va = sub.add_parser("validate", help="run the oracle suites")
    va.add_argument("--level", choices=["quick", "full"], default="quick")
    va.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("sample-prior", help="draws of u, VK diagonals and outputs under the prior")
    sp.add_argument("config", help="JSON run config (only the model block and seed are used)")
    sp.add_argument("--draws", type=int, default=10)
    sp.add_argument("--points", type=int, default=200)
    sp.add_argument("--output", "-o", help="CSV path (default stdout)")
    return p


def _write(text: str, path: str | None):
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _dispatch(args) -> int:
    if args.command == "train":
        cfg = load_config(args.config)
        if args.output_dir:
            cfg["output_dir"] = args.output_dir
        if args.range_search is not None:
            cfg["range_search"]["count"] = args.range_search
        run_train(cfg)
        return EXIT_OK

    if args.command == "predict":
        model = checkpoint_load(args.checkpoint)
        if args.times_from:
            ds = load_csv(args.times_from, schema_for(model))
            times = list(ds.t)
        else:
            spec = args.times or f"{model.config.t_min}:{model.config.t_max}:500"
            times = [parse_times(spec)] * model.n_outputs
        if args.samples < 1:
            raise UsageError("--samples must be >= 1")
        _write(prediction_csv(model, times, args.samples, args.seed), args.output)
        return EXIT_OK

    if args.command == "evaluate":
        model = checkpoint_load(args.checkpoint)
        ds = load_csv(args.data, schema_for(model, args.schema))
        rows = evaluate_model(model, ds, args.samples, args.seed)
        if args.output:
            Path(args.output).write_text(metrics_csv(rows), encoding="utf-8")
        else:
            sys.stdout.write(metrics_csv(rows))
        print(metrics_summary(rows), file=sys.stderr if not args.output else sys.stdout)
        return EXIT_OK

    if args.command == "validate":
        from nvkm.validation import run_suite

        report = run_suite(args.level, args.seed, log=print)
        print(report.lines()[-1])
        return EXIT_OK if report.passed else EXIT_NUMERIC

    if args.command == "sample-prior":
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        cfg = {"seed": int(raw.get("seed", 0))}
        cfg["model"] = {"seed": cfg["seed"], **raw.get("model", {})}
        _write(prior_samples_csv(cfg, args.draws, args.points), args.output)
        return EXIT_OK
    raise UsageError(f"unknown command {args.command!r}")


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except DATA_ERRORS as exc:
        return _fail("data", exc, EXIT_DATA)
    except NUMERIC_ERRORS as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except (errors.InvalidArgument, errors.UnsupportedOrder) as exc:
        return _fail("data", exc, EXIT_DATA)
    except json.JSONDecodeError as exc:
        return _fail("usage", exc, EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
