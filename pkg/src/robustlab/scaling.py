"""Best-run envelopes over FLOP bins and log-log power-law fits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PowerLawFit:
    """metric = C * flops ** alpha, fitted in log10 space."""

    C: float
    alpha: float
    r2: float
    n_points: int
    x_range: tuple[float, float]

    def __call__(self, x):
        return self.C * np.power(x, self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["x_range"] = list(self.x_range)
        return d


@dataclass(frozen=True)
class EnvelopePoint:
    bin: int
    flops: float
    metric: float
    run_id: str


@dataclass(frozen=True)
class Extrapolation:
    value: float
    extrapolated: bool


def bin_edges(x_min: float, x_max: float, bins: int = 19, log: bool = True) -> np.ndarray:
    if log:
        return np.logspace(math.log10(x_min), math.log10(x_max), bins + 1)
    return np.linspace(x_min, x_max, bins + 1)


def assign_bins(x: np.ndarray, bins: int = 19, log: bool = True) -> np.ndarray:
    """Bin index per point; equal-width bins over [min, max] (log10 axis by default).

    The right-most edge belongs to the last bin.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.log10(x) if log else x
    lo, hi = u.min(), u.max()
    if hi == lo:
        raise ValueError("all runs have identical FLOPs; cannot bin")
    idx = np.floor((u - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def envelope(runs, metric: str = "robust_acc_final", bins: int = 19, direction: str = "max", log_bins: bool = True, flops_key: str = "train_flops") -> list[EnvelopePoint]:
    """Best run per nonempty FLOP bin.

    ``runs`` are mappings (or objects) with ``run_id``, ``flops_key`` and
    ``metric``; entries flagged ``failed`` are skipped. Ties go to lower
    FLOPs, then the lexicographically smaller run_id.
    """
    if direction not in ("max", "min"):
        raise ValueError("direction must be 'max' or 'min'")
    rows = [r if isinstance(r, dict) else r.to_dict() for r in runs]
    rows = [r for r in rows if not r.get("failed", False)]
    if len(rows) < 2:
        raise ValueError("envelope needs at least 2 successful runs")
    x = np.array([float(r[flops_key]) for r in rows])
    if np.any(x <= 0):
        raise ValueError("FLOPs must be positive")
    idx = assign_bins(x, bins, log_bins)
    sign = 1.0 if direction == "max" else -1.0
    best: dict[int, dict] = {}
    for r, b in zip(rows, idx):
        key = (-sign * float(r[metric]), float(r[flops_key]), str(r["run_id"]))
        if b not in best or key < best[b][0]:
            best[b] = (key, r)
    return [
        EnvelopePoint(int(b), float(r[flops_key]), float(r[metric]), str(r["run_id"]))
        for b, (_, r) in sorted(best.items())
    ]


def fit_power_law(x, y) -> PowerLawFit:
    """Ordinary least squares of log10 y on log10 x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    bad = [(float(a), float(b)) for a, b in zip(x, y) if not (a > 0 and b > 0)]
    if bad:
        raise ValueError(f"power-law fit needs positive values; offending points: {bad[:10]}")
    if np.unique(x).size < 2:
        raise ValueError("power-law fit needs at least 2 distinct x values")
    u, v = np.log10(x), np.log10(y)
    um, vm = u.mean(), v.mean()
    du = u - um
    slope = float(np.dot(du, v - vm) / np.dot(du, du))
    intercept = float(vm - slope * um)
    resid = v - (intercept + slope * u)
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.dot(v - vm, v - vm))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return PowerLawFit(10.0**intercept, slope, r2, int(x.size), (float(x.min()), float(x.max())))


def extrapolate(fit: PowerLawFit, flops: float | None = None, metric: float | None = None) -> Extrapolation:
    """Forward (flops -> metric) or inverse (metric -> flops) query.

    ``extrapolated`` is set when the FLOPs involved fall outside the fit's
    x_range.
    """
    if (flops is None) == (metric is None):
        raise ValueError("give exactly one of flops or metric")
    lo, hi = fit.x_range
    if flops is not None:
        if flops <= 0:
            raise ValueError("flops must be positive")
        return Extrapolation(float(fit.C * flops**fit.alpha), not lo <= flops <= hi)
    if metric <= 0:
        raise ValueError("target metric must be positive")
    if fit.alpha == 0:
        raise ValueError("alpha is 0: the metric does not depend on compute")
    x = (metric / fit.C) ** (1.0 / fit.alpha)
    return Extrapolation(float(x), not lo <= x <= hi)


def write_fit_json(path, fit: PowerLawFit, metric: str, bins: int) -> dict:
    doc = {
        "metric": metric,
        "C": fit.C,
        "alpha": fit.alpha,
        "r2": fit.r2,
        "n_points": fit.n_points,
        "bins": bins,
        "x_min": fit.x_range[0],
        "x_max": fit.x_range[1],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def write_envelope_csv(path, points: list[EnvelopePoint]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["flops", "metric", "run_id"])
        for p in points:
            w.writerow([repr(p.flops), repr(p.metric), p.run_id])
