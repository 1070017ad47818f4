"""
File formats: price/return CSV ingestion, model fixtures, moment tables,
policy/value exports and run summaries.

CSV inputs have a header row (``date`` followed by asset labels), ISO-8601
dates in the first column and decimal values elsewhere. Floats are written
with 17 significant digits so exported files round-trip exactly.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .econometrics import MomentSummary, PriceSeries, ReturnSeries, RegionClassification
from .errors import InputError
from .mixture import GaussianComponent, MixtureModel
from .reachability import PolicyMap, StateGrid, ValueFunction

__all__ = [
    "read_price_csv",
    "read_return_csv",
    "write_return_csv",
    "save_model",
    "load_model",
    "model_to_dict",
    "model_from_dict",
    "write_moments_csv",
    "read_moments_csv",
    "write_policy",
    "read_policy",
    "write_frontier_csv",
    "write_histogram_csv",
    "write_json",
    "read_json",
    "fmt",
]


def fmt(x) -> str:
    """Shortest exact text for a float; integers and strings pass through."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if np.isnan(x):
            return "nan"
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _read_table(path) -> tuple[list[str], list[str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: file not found")
    try:
        text = path.read_text(encoding="utf-8-sig")
    except UnicodeDecodeError as exc:
        raise InputError(f"{path}: not UTF-8 ({exc})") from exc
    rows = [(i + 1, r) for i, r in enumerate(csv.reader(text.splitlines())) if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path}: empty file")
    line, header = rows[0]
    header = [h.strip() for h in header]
    if len(header) < 2:
        raise InputError(f"{path}:{line}: header needs a date column and at least one asset label")
    labels = header[1:]
    if any(not h for h in labels) or len(set(labels)) != len(labels):
        raise InputError(f"{path}:{line}: asset labels must be non-empty and unique")
    dates, values = [], []
    for line, row in rows[1:]:
        if len(row) != len(header):
            raise InputError(f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
        d = row[0].strip()
        try:
            _dt.date.fromisoformat(d)
        except ValueError:
            raise InputError(f"{path}:{line}: '{d}' is not an ISO-8601 date (YYYY-MM-DD)") from None
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError:
            bad = next(c for c in row[1:] if not _is_float(c))
            raise InputError(f"{path}:{line}: '{bad.strip()}' is not a decimal number") from None
        if not all(np.isfinite(vals)):
            raise InputError(f"{path}:{line}: non-finite value")
        dates.append(d)
        values.append(vals)
    if not values:
        raise InputError(f"{path}: no data rows")
    return labels, dates, np.array(values)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_price_csv(path, periods_per_year: int = 52) -> PriceSeries:
    labels, dates, values = _read_table(path)
    bad = np.argwhere(values <= 0)
    if len(bad):
        r, c = bad[0]
        raise InputError(f"{path}:{r + 2}: non-positive price {values[r, c]} for '{labels[c]}'")
    if len(values) < 2:
        raise InputError(f"{path}: at least two price rows are required")
    return PriceSeries(values, labels=labels, periods_per_year=periods_per_year, dates=dates)


def read_return_csv(path, periods_per_year: int = 52) -> ReturnSeries:
    labels, dates, values = _read_table(path)
    bad = np.argwhere(values <= -1)
    if len(bad):
        r, c = bad[0]
        raise InputError(f"{path}:{r + 2}: return {values[r, c]} <= -1 for '{labels[c]}'")
    return ReturnSeries(values, labels=labels, periods_per_year=periods_per_year, dates=dates)


def write_return_csv(path, r: ReturnSeries, start: str = "2000-01-07") -> None:
    """Write returns with the given dates, or weekly dates from ``start``."""
    dates = r.dates
    if dates is None:
        d0 = _dt.date.fromisoformat(start)
        step = _dt.timedelta(days=max(1, round(365 / r.periods_per_year)))
        dates = [(d0 + i * step).isoformat() for i in range(r.n_obs)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *r.labels])
        for d, row in zip(dates, r.returns):
            w.writerow([d, *map(fmt, row)])


# ---------------------------------------------------------------------------
# Model fixtures
# ---------------------------------------------------------------------------

def model_to_dict(mm: MixtureModel, periods_per_year: Optional[int] = None) -> dict:
    out = {"labels": list(mm.labels), "weights": mm.weights.tolist(),
           "components": [{"mean": c.mean.tolist(), "cov": c.cov.tolist()} for c in mm.components]}
    if periods_per_year:
        out["periods_per_year"] = int(periods_per_year)
    return out


def model_from_dict(d: dict, source: str = "model") -> MixtureModel:
    try:
        comps = []
        for i, c in enumerate(d["components"]):
            if "cov" in c:
                comps.append(GaussianComponent(c["mean"], c["cov"]))
            elif "sd" in c and ("corr" in c or "corr" in d):
                comps.append(GaussianComponent.from_sd_corr(c["mean"], c["sd"], c.get("corr", d.get("corr"))))
            else:
                raise InputError(f"{source}: component {i} needs 'cov' or 'sd' with 'corr'")
        return MixtureModel(np.asarray(d["weights"], dtype=float), tuple(comps), d.get("labels", ()))
    except KeyError as exc:
        raise InputError(f"{source}: missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"{source}: {exc}") from None


def save_model(path, mm: MixtureModel, periods_per_year: Optional[int] = None) -> None:
    write_json(path, model_to_dict(mm, periods_per_year))


def load_model(path) -> MixtureModel:
    return model_from_dict(read_json(path), str(path))


# ---------------------------------------------------------------------------
# Moment tables
# ---------------------------------------------------------------------------

def write_moments_csv(path, ms: MomentSummary, annual: Optional[MomentSummary] = None,
                      regions: Optional[Sequence[RegionClassification]] = None,
                      jb: Optional[Sequence[float]] = None) -> None:
    header = ["label", "er", "sd", "sk", "ku"]
    if annual is not None:
        header += ["er_ann", "sd_ann", "periods_per_year"]
    if jb is not None:
        header += ["jb"]
    if regions is not None:
        header += ["region", "region_name", "lambda_sk", "lambda_ku"]
    header += [f"corr_{lab}" for lab in ms.labels]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, lab in enumerate(ms.labels):
            row = [lab, ms.er[i], ms.sd[i], ms.sk[i], ms.ku[i]]
            if annual is not None:
                row += [annual.er[i], annual.sd[i], annual.periods_per_year]
            if jb is not None:
                row += [jb[i]]
            if regions is not None:
                rc = regions[i]
                row += ["" if rc is None else rc.region, "" if rc is None else rc.description,
                        "" if rc is None else rc.lambda_sk, "" if rc is None else rc.lambda_ku]
            row += list(ms.corr[i])
            w.writerow([fmt(v) for v in row])


def read_moments_csv(path, annualized: bool = False) -> MomentSummary:
    """Moment table as written by :func:`write_moments_csv`.

    With ``annualized`` the ``er_ann``/``sd_ann`` columns are used. The
    covariance is rebuilt from SD and the correlation columns.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8-sig") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InputError(f"{path}: empty moment table")
    labels = [r["label"] for r in rows]
    er_key, sd_key = ("er_ann", "sd_ann") if annualized else ("er", "sd")
    try:
        er = [float(r[er_key]) for r in rows]
        sd = [float(r[sd_key]) for r in rows]
        sk = [float(r["sk"]) for r in rows]
        ku = [float(r["ku"]) for r in rows]
        corr = [[float(r[f"corr_{lab}"]) for lab in labels] for r in rows]
        ppy = int(float(rows[0]["periods_per_year"])) if rows[0].get("periods_per_year") else None
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: malformed moment table ({exc})") from None
    return MomentSummary.from_table(er, sd, sk, ku, corr, labels=labels, periods_per_year=ppy,
                                    annualized=annualized)


# ---------------------------------------------------------------------------
# Solver exports
# ---------------------------------------------------------------------------

def write_policy(out_dir, policy: PolicyMap, values: Sequence[ValueFunction]) -> list[Path]:
    """One CSV per stage: node value, one weight column per asset, and ``J``.

    Stage ``N`` (terminal) only has a value file.
    """
    out_dir = Path(out_dir)
    pdir, vdir = out_dir / "policy", out_dir / "values"
    pdir.mkdir(parents=True, exist_ok=True)
    vdir.mkdir(parents=True, exist_ok=True)
    nodes = policy.grid.nodes
    labels = list(policy.labels) or [f"asset{i + 1}" for i in range(policy.m)]
    written = []
    width = len(str(policy.horizon))
    for k in range(policy.horizon):
        path = pdir / f"stage_{k:0{width}d}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", *[f"w_{lab}" for lab in labels], "J"])
            for i, x in enumerate(nodes):
                w.writerow([fmt(x), *map(fmt, policy.allocations[k, i]), fmt(values[k].values[i])])
        written.append(path)
    for k, vf in enumerate(values):
        path = vdir / f"stage_{k:0{width}d}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "J"])
            for x, v in zip(nodes, vf.values):
                w.writerow([fmt(x), fmt(v)])
        written.append(path)
    return written


def read_policy(out_dir, grid: StateGrid, horizon: int) -> PolicyMap:
    """Rebuild a :class:`PolicyMap` from :func:`write_policy` output."""
    pdir = Path(out_dir) / "policy"
    width = len(str(horizon))
    allocs, labels = [], None
    nodes = grid.nodes
    for k in range(horizon):
        path = pdir / f"stage_{k:0{width}d}.csv"
        if not path.is_file():
            raise InputError(f"{path}: missing policy file (run 'solve' first)")
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        head = rows[0]
        labels = [h[2:] for h in head[1:-1]]
        data = np.array([[float(c) for c in r] for r in rows[1:]])
        if data.shape[0] != grid.size or not np.allclose(data[:, 0], nodes, rtol=1e-13, atol=0):
            raise InputError(f"{path}: grid nodes do not match the summary grid")
        allocs.append(data[:, 1:-1])
    return PolicyMap(grid=grid, allocations=np.array(allocs), labels=labels)


def write_frontier_csv(path, frontier, labels: Sequence[str], probabilities=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["target_return", "variance", "sd", *[f"w_{lab}" for lab in labels]]
        if probabilities is not None:
            head.append("success_probability")
        w.writerow(head)
        for i, p in enumerate(frontier):
            row = [p.target_return, p.variance, p.sd, *p.allocation]
            if probabilities is not None:
                row.append(probabilities[i])
            w.writerow([fmt(v) for v in row])


def write_histogram_csv(path, hist) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lower", "upper", "count"])
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow([fmt(lo), fmt(hi), int(c)])


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return None if not np.isfinite(x) else x
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: file not found")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
