"""Command-line front end.

    jackfilter simulate -c run.cfg
    jackfilter filter   -c run.cfg -i meas.csv -o estimates.csv [--truth truth.csv]
    jackfilter oracle   -n 8 -r 6 --seed 7 -o oracle.csv
    jackfilter evaluate -e estimates.csv -t truth.csv -o summary.csv

Configs are flat ``key = value`` files with dotted section prefixes, e.g.::

    model = logistic
    sim.x0 = 1, 0.225, 500
    sim.Q.diag = 15, 0.001, 10
    filter.r = 45

Exit codes: 0 success, 2 configuration error, 3 parse/input error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import jackknife as jk
from .errors import ConfigError, GridMismatch, JackfilterError, ParseError
from .filtering import FilterConfig, StepRecord, run_adaptive
from .model import MeasurementLog, ThetaVector, get_model, simulate
from .numkit import RngHandle, is_psd, upper_triangle
from .oracle import enumerate_jackknife, linear_dataset, proportional_fit

log = logging.getLogger(__name__)

SUMMARY_WINDOW = 50


# --- config ------------------------------------------------------------------

@dataclass
class SimConfig:
    times: Optional[np.ndarray] = None
    t0: float = 0.0
    t1: float = 80.0
    count: int = 200
    spacing: str = "uniform"
    x0: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    seed: int = 0

    def schedule(self) -> np.ndarray:
        if self.times is not None:
            return self.times
        if self.spacing == "uniform":
            return np.linspace(self.t0, self.t1, self.count)
        # uniformly random times, sorted; duplicates are vanishingly unlikely
        gen = RngHandle(self.seed, "times").generator()
        return np.sort(gen.uniform(self.t0, self.t1, self.count))


@dataclass
class RunConfig:
    model: str = "logistic"
    sim: SimConfig = field(default_factory=SimConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    truth_path: str = "truth.csv"
    meas_path: str = "meas.csv"


def _floats(key: str, text: str) -> np.ndarray:
    text = text.strip()
    if not text:
        return np.zeros(0)
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


def _scalar(key: str, text: str, kind):
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def _covariance(key: str, text: str, diag: bool) -> np.ndarray:
    vals = _floats(key, text)
    if diag:
        return np.diag(vals)
    dim = math.isqrt(vals.size)
    if dim * dim != vals.size or dim == 0:
        raise ConfigError(f"{key}: {vals.size} entries do not form a square matrix")
    return vals.reshape(dim, dim)


_FILTER_KINDS = {"mu": int, "workers": int}


def _filter_field(cfg: FilterConfig, key: str, name: str, text: str) -> None:
    if name not in {f.name for f in dataclasses.fields(FilterConfig)}:
        raise ConfigError(f"{key}: unknown filter setting")
    if name == "init":
        setattr(cfg, name, _floats(key, text))
        return
    current = getattr(cfg, name)
    kind = _FILTER_KINDS.get(name, type(current))
    if text.strip().lower() in ("none", "") and name in _FILTER_KINDS:
        setattr(cfg, name, None)
        return
    setattr(cfg, name, _scalar(key, text, kind))


def parse_config(text: str) -> RunConfig:
    """Read a flat ``key = value`` config. Errors name the offending key."""
    cfg = RunConfig()
    sim = cfg.sim
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "model":
            cfg.model = value
        elif key in ("out.truth", "out.meas"):
            setattr(cfg, key[4:] + "_path", value)
        elif key in ("sim.Q", "sim.Q.diag", "sim.R", "sim.R.diag"):
            setattr(sim, key[4], _covariance(key, value, key.endswith(".diag")))
        elif key == "sim.times":
            sim.times = _floats(key, value)
        elif key == "sim.x0":
            sim.x0 = _floats(key, value)
        elif key in ("sim.t0", "sim.t1"):
            setattr(sim, key[4:], _scalar(key, value, float))
        elif key in ("sim.count", "sim.seed"):
            setattr(sim, key[4:], _scalar(key, value, int))
        elif key == "sim.spacing":
            sim.spacing = value
        elif key.startswith("filter."):
            _filter_field(cfg.filter, key, key[7:], value)
        else:
            raise ConfigError(f"{key}: unknown key")
    _check_config(cfg)
    return cfg


def _check_config(cfg: RunConfig) -> None:
    try:
        model = get_model(cfg.model)
    except KeyError:
        raise ConfigError(f"model: unknown model {cfg.model!r}") from None
    sim = cfg.sim
    if sim.spacing not in ("uniform", "random"):
        raise ConfigError(f"sim.spacing: expected uniform or random, got {sim.spacing!r}")
    if sim.times is not None:
        if sim.times.size == 0:
            raise ConfigError("sim.times: empty measurement schedule")
        if np.any(np.diff(sim.times) <= 0):
            raise ConfigError("sim.times: times must be strictly increasing")
    elif sim.count < 1:
        raise ConfigError("sim.count: empty measurement schedule")
    elif sim.t1 <= sim.t0 and sim.count > 1:
        raise ConfigError("sim.t1: must exceed sim.t0")
    if sim.x0 is not None and sim.x0.size != model.dim:
        raise ConfigError(f"sim.x0: model {model.name} needs {model.dim} values")
    for name, dim in (("Q", model.dim), ("R", model.output_dim)):
        mat = getattr(sim, name)
        if mat is None:
            continue
        if mat.shape != (dim, dim):
            raise ConfigError(f"sim.{name}: expected a {dim}x{dim} matrix")
        if not np.allclose(mat, mat.T) or not is_psd(mat):
            raise ConfigError(f"sim.{name}: covariance must be symmetric PSD")
    f = cfg.filter
    if f.init is not None and f.init.size != model.dim:
        raise ConfigError(f"filter.init: model {model.name} needs {model.dim} values")
    try:
        f.validate()
    except (JackfilterError, ValueError) as exc:
        raise ConfigError(f"filter: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


# --- CSV ---------------------------------------------------------------------

def fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_atomic(path, text: str) -> None:
    """Write ``text`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _render(header: list, rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def read_table(path) -> tuple:
    """Header and rows of a CSV, skipping blank and ``#`` lines.

    Returns ``(header, rows, linenos)``. Raises ParseError on a missing
    header or ragged rows.
    """
    try:
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    header, rows, linenos = None, [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cells = [c.strip() for c in next(csv.reader([line]))]
        if header is None:
            header = cells
            continue
        if len(cells) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(cells)}")
        rows.append(cells)
        linenos.append(lineno)
    if header is None:
        raise ParseError(f"{path}: missing header row")
    return header, rows, linenos


def _number(path, lineno: int, cell: str) -> float:
    if cell == "":
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: not a number: {cell!r}") from None


def read_series(path, prefix: str) -> tuple:
    """``(t, values)`` from a file with header ``t,<prefix>1..``.

    Raises ParseError naming the line when t does not strictly increase.
    """
    header, rows, linenos = read_table(path)
    cols = [f"{prefix}{i}" for i in range(1, len(header))]
    if not header or header[0] != "t" or header[1:] != cols or not cols:
        raise ParseError(f"{path}:1: expected header t,{prefix}1..; got {','.join(header)}")
    data = np.array([[_number(path, ln, c) for c in row] for row, ln in zip(rows, linenos)],
                    dtype=float).reshape(len(rows), len(header))
    if not np.all(np.isfinite(data)):
        bad = int(np.argmax(~np.all(np.isfinite(data), axis=1)))
        raise ParseError(f"{path}:{linenos[bad]}: missing or non-finite value")
    for i in range(1, len(rows)):
        if data[i, 0] <= data[i - 1, 0]:
            raise ParseError(f"{path}:{linenos[i]}: time {rows[i][0]} does not increase "
                             f"(row {i + 1})")
    return data[:, 0], data[:, 1:]


def write_series(path, prefix: str, times, values) -> None:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    header = ["t"] + [f"{prefix}{i}" for i in range(1, values.shape[1] + 1)]
    rows = [[fmt(t)] + [fmt(v) for v in row] for t, row in zip(times, values)]
    write_atomic(path, _render(header, rows))


def estimates_header(k: int, m: int) -> list:
    q = [f"Qhat_{i}{j}" for i in range(1, k + 1) for j in range(i, k + 1)]
    r = [f"Rhat_{i}{j}" for i in range(1, m + 1) for j in range(i, m + 1)]
    return (["n", "t", "mode"] + [f"x{i}" for i in range(1, k + 1)] + ["err"] + q + r
            + [f"bias_{i}" for i in range(1, m + 1)] + ["clipQ", "clipR"])


def estimates_rows(records: list) -> list:
    rows = []
    for rec in records:
        err = "" if rec.err is None else fmt(rec.err)
        rows.append([str(rec.n), fmt(rec.t), rec.mode]
                    + [fmt(v) for v in rec.state] + [err]
                    + [fmt(v) for v in upper_triangle(rec.Q)]
                    + [fmt(v) for v in upper_triangle(rec.R)]
                    + [fmt(v) for v in np.atleast_1d(rec.bias)]
                    + [str(int(rec.clip_q)), str(int(rec.clip_r))])
    return rows


def read_estimates(path) -> dict:
    header, rows, linenos = read_table(path)
    if header[:3] != ["n", "t", "mode"] or "err" not in header:
        raise ParseError(f"{path}:1: not an estimates file")
    k = header.index("err") - 3
    out = {"n": [], "t": [], "mode": [], "x": [], "cols": {}}
    for row, ln in zip(rows, linenos):
        out["n"].append(int(_number(path, ln, row[0])))
        out["t"].append(_number(path, ln, row[1]))
        out["mode"].append(row[2])
        out["x"].append([_number(path, ln, c) for c in row[3:3 + k]])
        for name, cell in zip(header[3 + k:], row[3 + k:]):
            out["cols"].setdefault(name, []).append(_number(path, ln, cell))
    out["t"] = np.array(out["t"])
    out["x"] = np.array(out["x"], dtype=float).reshape(len(rows), k)
    out["header"] = header
    return out


# --- commands ----------------------------------------------------------------

def _truth_start(cfg: RunConfig, model) -> np.ndarray:
    if cfg.sim.x0 is not None:
        return cfg.sim.x0
    if model.name == "logistic":
        return np.array([1.0, 0.225, 500.0])
    raise ConfigError("sim.x0: required for this model")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    model = get_model(cfg.model)
    times = cfg.sim.schedule()
    Q = cfg.sim.Q if cfg.sim.Q is not None else np.zeros((model.dim, model.dim))
    R = cfg.sim.R if cfg.sim.R is not None else np.eye(model.output_dim)
    x0 = _truth_start(cfg, model)
    truth, meas = simulate(model, ThetaVector(float(times[0]), x0), times, Q, R,
                           RngHandle(cfg.sim.seed, "simulate"))
    outdir = Path(args.outdir)
    write_series(outdir / cfg.truth_path, "x", times, truth)
    write_series(outdir / cfg.meas_path, "y", meas.times, meas.ys)
    log.info("wrote %d measurements", len(meas))
    return 0


def _aligned_truth(truth_path, times) -> np.ndarray:
    t_true, x_true = read_series(truth_path, "x")
    if t_true.shape != times.shape or np.any(t_true != times):
        raise GridMismatch(f"{truth_path}: time grid differs from the measurements")
    return x_true


def cmd_filter(args) -> int:
    cfg = load_config(args.config)
    model = get_model(cfg.model)
    times, ys = read_series(args.input, "y")
    if ys.shape[1] != model.output_dim:
        raise ParseError(f"{args.input}:1: model {model.name} expects {model.output_dim} outputs")
    truth = None
    if args.truth:
        truth = _aligned_truth(args.truth, times)
        if truth.shape[1] != model.dim:
            raise GridMismatch(f"{args.truth}: expected {model.dim} state columns")
    records = run_adaptive(model, MeasurementLog(times, ys), cfg.filter, truth)
    rows = estimates_rows(records)
    write_atomic(args.output, _render(estimates_header(model.dim, model.output_dim), rows))
    return 0


def oracle_table(n: int, r: int, seed: int) -> list:
    """Rows ``(quantity, m, value)`` comparing enumeration with sampling."""
    t, y = linear_dataset(n, seed)
    ref = enumerate_jackknife(t, y, r)
    rows = [("theta_n", "", ref["theta_n"]), ("theta_hat", "", ref["theta_hat"]),
            ("v_n", "", ref["v_n"]), ("vtilde_n", "", ref["vtilde_n"]),
            ("subsets", "", ref["subsets"])]

    def estimator(subset):
        idx = np.asarray(subset) - 1
        return proportional_fit(t[idx], y[idx])

    for m in (ref["subsets"], n, 2 * n):
        subsets = jk.sample_subsets(n, r, m, rng=RngHandle(seed, "oracle-sample").child(m))
        batch = jk.build_batch(subsets, estimator, n, r, workers=1)
        rows.append(("vtilde_sampled", m, float(jk.batch_jsve(batch).var[0, 0])))
    return rows


def cmd_oracle(args) -> int:
    rows = oracle_table(args.n, args.r, args.seed)
    body = [[name, str(m), fmt(v)] for name, m, v in rows]
    write_atomic(args.output, _render(["quantity", "m", "value"], body))
    return 0


def evaluate(est: dict, t_true, x_true) -> tuple:
    """Per-step errors and a summary dict of estimates against truth rows."""
    index = {t: i for i, t in enumerate(t_true)}
    missing = [t for t in est["t"] if t not in index]
    if missing:
        raise GridMismatch(f"estimate time {fmt(missing[0])} has no truth row")
    if est["x"].shape[1] != x_true.shape[1]:
        raise GridMismatch(f"estimates carry {est['x'].shape[1]} state columns, "
                           f"truth has {x_true.shape[1]}")
    rows = [index[t] for t in est["t"]]
    errors = np.linalg.norm(est["x"] - x_true[rows], axis=1)
    w = min(SUMMARY_WINDOW, errors.size)
    summary = {"steps": errors.size}
    if errors.size:
        first, last = float(np.median(errors[:w])), float(np.median(errors[-w:]))
        summary.update(median_first=first, median_last=last, decreasing=int(last < first),
                       final_error=float(errors[-1]))
        handoff = [n for n, mode in zip(est["n"], est["mode"]) if mode == "enkf"]
        summary["handoff_step"] = handoff[0] if handoff else ""
        for name, vals in est["cols"].items():
            if name.startswith(("Qhat_", "Rhat_")):
                summary[f"final_{name}"] = vals[-1]
    return errors, summary


def cmd_evaluate(args) -> int:
    est = read_estimates(args.estimates)
    t_true, x_true = read_series(args.truth, "x")
    errors, summary = evaluate(est, t_true, x_true)
    body = [[k, v if isinstance(v, str) else fmt(v) if isinstance(v, float) else str(v)]
            for k, v in summary.items()]
    write_atomic(args.output, _render(["key", "value"], body))
    plot_path = args.plot_data or str(Path(args.output).with_name(
        Path(args.output).stem + "_plot.csv"))
    k = est["x"].shape[1]
    index = {t: i for i, t in enumerate(t_true)}
    header = (["n", "t", "mode", "err"] + [f"x{i}_est" for i in range(1, k + 1)]
              + [f"x{i}_true" for i in range(1, k + 1)])
    plot_rows = []
    for i, t in enumerate(est["t"]):
        truth_row = x_true[index[t]]
        plot_rows.append([str(est["n"][i]), fmt(t), est["mode"][i], fmt(errors[i])]
                         + [fmt(v) for v in est["x"][i]] + [fmt(v) for v in truth_row])
    write_atomic(plot_path, _render(header, plot_rows))
    return 0


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jackfilter", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate truth and measurements from a config")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-d", "--outdir", default=".", help="directory for truth.csv and meas.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("filter", help="run the adaptive jackknife filter")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-i", "--input", required=True, help="measurement CSV")
    p.add_argument("-o", "--output", required=True, help="estimates CSV to write")
    p.add_argument("--truth", help="truth CSV; fills the err column")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("oracle", help="brute-force jackknife on a synthetic linear data set")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("-r", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("evaluate", help="error norms of estimates against truth")
    p.add_argument("-e", "--estimates", required=True)
    p.add_argument("-t", "--truth", required=True)
    p.add_argument("-o", "--output", required=True, help="summary CSV to write")
    p.add_argument("--plot-data", help="per-step plot data CSV (default: <output>_plot.csv)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except JackfilterError as exc:
        print(f"jackfilter: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"jackfilter: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
