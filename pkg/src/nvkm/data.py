"""Datasets, splits, standardization and evaluation metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from nvkm.errors import EmptySeries, InvalidArgument, ParseError, UndefinedMetric


@dataclass
class Standardization:
    shift: np.ndarray
    scale: np.ndarray
    x_shift: float = 0.0
    x_scale: float = 1.0

    def to_dict(self) -> dict:
        return {
            "shift": [float(v) for v in self.shift],
            "scale": [float(v) for v in self.scale],
            "x_shift": float(self.x_shift),
            "x_scale": float(self.x_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.asarray(d["shift"], float), np.asarray(d["scale"], float), d["x_shift"], d["x_scale"])

    @classmethod
    def identity(cls, n_outputs: int) -> "Standardization":
        return cls(np.zeros(n_outputs), np.ones(n_outputs))


@dataclass
class TimeSeriesDataset:
    """Per-output series ``(t[d], y[d])`` and an optional observed input ``(tx, x)``."""

    t: list
    y: list
    tx: np.ndarray | None = None
    x: np.ndarray | None = None
    names: list = field(default_factory=list)
    input_name: str | None = None

    def __post_init__(self):
        self.t = [np.asarray(a, dtype=float).reshape(-1) for a in self.t]
        self.y = [np.asarray(a, dtype=float).reshape(-1) for a in self.y]
        if len(self.t) != len(self.y):
            raise InvalidArgument("need one time array per output")
        for d, (t, y) in enumerate(zip(self.t, self.y)):
            if t.shape != y.shape:
                raise InvalidArgument(f"output {d}: {len(t)} times but {len(y)} values")
            if not np.all(np.isfinite(t)):
                raise InvalidArgument(f"output {d}: non-finite times")
        if (self.tx is None) != (self.x is None):
            raise InvalidArgument("input times and values must be given together")
        if self.tx is not None:
            self.tx = np.asarray(self.tx, dtype=float).reshape(-1)
            self.x = np.asarray(self.x, dtype=float).reshape(-1)
            if self.tx.shape != self.x.shape:
                raise InvalidArgument("input times and values differ in length")
        if not self.names:
            self.names = [f"y{d}" for d in range(len(self.t))]

    @property
    def n_outputs(self) -> int:
        return len(self.t)

    @property
    def has_input(self) -> bool:
        return self.tx is not None

    @property
    def n_total(self) -> int:
        return int(sum(len(t) for t in self.t))

    def flat(self):
        """Concatenated ``(t, y, output index)`` over all outputs."""
        if self.n_total == 0:
            return np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int32)
        d = np.concatenate([np.full(len(t), i, dtype=np.int32) for i, t in enumerate(self.t)])
        return np.concatenate(self.t), np.concatenate(self.y), d

    def time_span(self) -> tuple[float, float]:
        pieces = [t for t in self.t if len(t)]
        if self.has_input and len(self.tx):
            pieces.append(self.tx)
        allt = np.concatenate(pieces)
        return float(allt.min()), float(allt.max())


# ---------------------------------------------------------------------------
# synthetic data

def _synthetic_filters():
    return [
        lambda s: np.sin(6 * s),
        lambda s: np.sin(5 * s) ** 2,
        lambda s: np.cos(4 * s),
    ]


SYNTHETIC_AMPLITUDE = 3.0


def synthetic_clean(t, seed: int = 0, lengthscale: float = 2.0, amplitude: float = SYNTHETIC_AMPLITUDE, n_basis: int = 4096, grid_points: int = 4096, grid_half_width: float = 6.0):
    """Noise-free synthetic target and the three filtered signals.

    ``g`` is an SE-GP prior path in random Fourier form; each
    ``f_i(t) = int exp(-2 s**2) h_i(s) g(t - s) ds`` is a dense trapezoid sum
    over ``s``. Expanding ``cos(theta (t - s) + beta)`` makes every
    convolution a sum over basis functions of two trapezoid moments.
    """
    t = np.asarray(t, dtype=float)
    rng = np.random.default_rng(seed)
    precision = 1.0 / (2.0 * lengthscale**2)
    theta = np.sqrt(2.0 * precision) * rng.standard_normal(n_basis)
    beta = rng.uniform(0.0, 2.0 * np.pi, n_basis)
    w = rng.standard_normal(n_basis)
    amp = amplitude * np.sqrt(2.0 / n_basis)

    s = np.linspace(-grid_half_width, grid_half_width, grid_points)
    ws = np.full(grid_points, s[1] - s[0])
    ws[[0, -1]] *= 0.5
    phase_t = np.outer(t, theta) + beta
    fs = []
    for h in _synthetic_filters():
        weight = ws * np.exp(-2.0 * s**2) * h(s)
        cos_m = np.cos(np.outer(theta, s)) @ weight
        sin_m = np.sin(np.outer(theta, s)) @ weight
        fs.append(amp * (np.cos(phase_t) @ (w * cos_m) + np.sin(phase_t) @ (w * sin_m)))
    f1, f2, f3 = fs
    return np.minimum(5.0 * f1 * f2 + 5.0 * f3**3, 1.0), fs


def gen_synthetic(n: int = 1200, t_range=(-20.0, 20.0), seed: int = 0, noise: float = 0.05, **kwargs) -> TimeSeriesDataset:
    """``n`` equispaced points of the clipped synthetic benchmark plus Gaussian noise."""
    if n < 2:
        raise InvalidArgument("need n >= 2")
    t = np.linspace(t_range[0], t_range[1], n)
    clean, _ = synthetic_clean(t, seed=seed, **kwargs)
    eps = np.random.default_rng([seed, 1]).normal(0.0, noise, n)
    return TimeSeriesDataset([t], [clean + eps], names=["y"])


# ---------------------------------------------------------------------------
# CSV

@dataclass
class CsvSchema:
    time: str = "t"
    outputs: list = field(default_factory=lambda: ["y"])
    input: str | None = None
    delimiter: str = ","

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        return cls(**d)

    def to_dict(self) -> dict:
        return {"time": self.time, "outputs": list(self.outputs), "input": self.input, "delimiter": self.delimiter}


def _parse_cell(text: str, lineno: int, column: str):
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na", "null"):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {lineno}: cannot parse {text!r} in column {column!r}") from None


def load_csv(path, schema: CsvSchema | None = None) -> TimeSeriesDataset:
    """Read a header-row CSV; rows are sorted by time and empty cells dropped per series."""
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        wanted = [schema.time, *schema.outputs] + ([schema.input] if schema.input else [])
        missing = [c for c in wanted if c not in header]
        if missing:
            raise ParseError(f"{path}: missing columns {missing}")
        col = {name: header.index(name) for name in wanted}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            t = _parse_cell(row[col[schema.time]], lineno, schema.time)
            if math.isnan(t):
                raise ParseError(f"{path}: line {lineno}: missing time value")
            rows.append([t] + [_parse_cell(row[col[c]], lineno, c) for c in wanted[1:]])
    data = np.asarray(rows, dtype=float).reshape(-1, len(wanted))
    data = data[np.argsort(data[:, 0], kind="stable")]
    ts, ys = [], []
    for j, name in enumerate(schema.outputs, start=1):
        keep = ~np.isnan(data[:, j])
        if not keep.any():
            raise EmptySeries(f"{path}: output column {name!r} has no values")
        ts.append(data[keep, 0])
        ys.append(data[keep, j])
    tx = x = None
    if schema.input:
        keep = ~np.isnan(data[:, -1])
        if not keep.any():
            raise EmptySeries(f"{path}: input column {schema.input!r} has no values")
        tx, x = data[keep, 0], data[keep, -1]
    return TimeSeriesDataset(ts, ys, tx, x, names=list(schema.outputs), input_name=schema.input)


def dataset_to_csv(ds: TimeSeriesDataset, delimiter: str = ",") -> str:
    """Serialize with the :func:`load_csv` schema; absent cells are left empty."""
    cols = list(ds.names) + ([ds.input_name or "x"] if ds.has_input else [])
    table: dict[float, dict] = {}
    for name, t, y in zip(ds.names, ds.t, ds.y):
        for ti, yi in zip(t, y):
            table.setdefault(float(ti), {})[name] = yi
    if ds.has_input:
        for ti, xi in zip(ds.tx, ds.x):
            table.setdefault(float(ti), {})[cols[-1]] = xi
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["t", *cols])
    for ti in sorted(table):
        row = table[ti]
        w.writerow([repr(ti)] + [repr(float(row[c])) if c in row else "" for c in cols])
    return buf.getvalue()


def write_csv(ds: TimeSeriesDataset, path, delimiter: str = ",") -> CsvSchema:
    Path(path).write_text(dataset_to_csv(ds, delimiter), encoding="utf-8")
    return CsvSchema("t", list(ds.names), (ds.input_name or "x") if ds.has_input else None, delimiter)


# ---------------------------------------------------------------------------
# splitting

@dataclass
class SplitSpec:
    """``mode="random"`` keeps ``fraction`` of each output for training.

    ``mode="contiguous"`` removes ``blocks[d] = (start, length)`` from the
    listed outputs; a ``start`` of ``None`` centers the block.
    """

    mode: str = "random"
    fraction: float = 1.0 / 3.0
    blocks: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = {int(k): tuple(v) for k, v in d["blocks"].items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "fraction": self.fraction,
            "blocks": {str(k): list(v) for k, v in self.blocks.items()},
            "seed": self.seed,
        }


def split(ds: TimeSeriesDataset, spec: SplitSpec) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    """Partition every output series into train and test; inputs stay in train."""
    rng = np.random.default_rng(spec.seed)
    tr_t, tr_y, te_t, te_y = [], [], [], []
    for d, (t, y) in enumerate(zip(ds.t, ds.y)):
        n = len(t)
        mask = np.zeros(n, dtype=bool)  # True = test
        if spec.mode == "random":
            if not 0 <= spec.fraction <= 1:
                raise InvalidArgument("fraction must lie in [0, 1]")
            n_train = int(round(spec.fraction * n))
            train_idx = rng.choice(n, size=n_train, replace=False)
            mask[:] = True
            mask[train_idx] = False
        elif spec.mode == "contiguous":
            if d in spec.blocks:
                start, length = spec.blocks[d]
                if start is None:
                    start = (n - length) // 2
                if start < 0 or length < 0 or start + length > n:
                    raise InvalidArgument(f"block ({start}, {length}) out of range for output {d} of length {n}")
                mask[start : start + length] = True
        else:
            raise InvalidArgument(f"unknown split mode {spec.mode!r}")
        tr_t.append(t[~mask])
        tr_y.append(y[~mask])
        te_t.append(t[mask])
        te_y.append(y[mask])
    if spec.mode == "contiguous":
        bad = [d for d in spec.blocks if not 0 <= d < ds.n_outputs]
        if bad:
            raise InvalidArgument(f"blocks refer to missing outputs {bad}")
    train = TimeSeriesDataset(tr_t, tr_y, ds.tx, ds.x, list(ds.names), ds.input_name)
    test = TimeSeriesDataset(te_t, te_y, None, None, list(ds.names))
    return train, test


# ---------------------------------------------------------------------------
# standardization

def standardize(ds: TimeSeriesDataset, params: Standardization | None = None):
    """Zero-mean, unit-variance outputs (and input); returns ``(dataset, params)``.

    With ``params`` given, applies them instead of fitting new ones.
    """
    if params is None:
        shift, scale = [], []
        for d, y in enumerate(ds.y):
            if len(y) == 0:
                raise EmptySeries(f"output {d} is empty")
            sd = float(np.std(y))
            if sd == 0:
                raise InvalidArgument(f"output {d} has zero variance")
            shift.append(float(np.mean(y)))
            scale.append(sd)
        x_shift, x_scale = 0.0, 1.0
        if ds.has_input:
            x_scale = float(np.std(ds.x))
            if x_scale == 0:
                raise InvalidArgument("input has zero variance")
            x_shift = float(np.mean(ds.x))
        params = Standardization(np.asarray(shift), np.asarray(scale), x_shift, x_scale)
    ys = [(y - params.shift[d]) / params.scale[d] for d, y in enumerate(ds.y)]
    x = None if ds.x is None else (ds.x - params.x_shift) / params.x_scale
    return replace(ds, y=ys, x=x), params


def destandardize(values, params: Standardization, d: int):
    return np.asarray(values) * params.scale[d] + params.shift[d]


def destandardize_sd(sd, params: Standardization, d: int):
    return np.asarray(sd) * params.scale[d]


# ---------------------------------------------------------------------------
# metrics

def _pair(pred, y):
    pred = np.asarray(pred, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if pred.shape != y.shape or len(y) == 0:
        raise InvalidArgument("predictions and targets must be non-empty and equal length")
    return pred, y


def rmse(pred, y) -> float:
    pred, y = _pair(pred, y)
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def nmse(pred, y) -> float:
    """Mean squared error divided by the variance of the targets."""
    pred, y = _pair(pred, y)
    var = float(np.var(y))
    if var == 0:
        raise UndefinedMetric("targets have zero variance")
    return float(np.mean((pred - y) ** 2) / var)


def nlpd(samples, noise: float, y) -> float:
    """Average negative log density of ``y`` under the S-sample Gaussian mixture.

    ``samples`` has shape (S, n); each component is ``Normal(f_s, noise**2)``.
    """
    f = np.atleast_2d(np.asarray(samples, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if f.shape[1] != len(y) or len(y) == 0:
        raise InvalidArgument("samples must have shape (S, n) matching targets")
    with np.errstate(over="ignore"):
        logp = -0.5 * math.log(2 * math.pi) - math.log(noise) - 0.5 * ((y - f) / noise) ** 2
    per_point = logsumexp(logp, axis=0) - math.log(f.shape[0])
    out = -float(np.mean(per_point))
    if not math.isfinite(out):
        raise UndefinedMetric("non-finite predictive density")
    return out


def gaussian_nlpd(mean, sd, y) -> float:
    mean, y = _pair(mean, y)
    sd = np.broadcast_to(np.asarray(sd, dtype=float), y.shape)
    return float(np.mean(0.5 * np.log(2 * np.pi * sd**2) + 0.5 * ((y - mean) / sd) ** 2))
