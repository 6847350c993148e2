"""Evaluation statistics for parameter predictions.

Inputs are ``(M, d)`` arrays (a 1-D array is treated as ``d = 1``).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConstantTruth, EmptyInput, InvalidK, ZeroTruthValue
from .stochastic import RngStream, substream_id


def _pair(truth, pred):
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    if p.ndim == 1:
        p = p[:, None]
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {p.shape}")
    if t.shape[0] == 0:
        raise EmptyInput("no samples")
    return t, p


def mse_decompose(truth, pred):
    """Per-coordinate ``(mse, squared_bias, c_mse)`` with mse = bias**2 + c_mse."""
    t, p = _pair(truth, pred)
    mse = np.mean((t - p) ** 2, axis=0)
    sq_bias = (t.mean(axis=0) - p.mean(axis=0)) ** 2
    c_mse = np.mean(((t - t.mean(axis=0)) - (p - p.mean(axis=0))) ** 2, axis=0)
    return mse, sq_bias, c_mse


def ape_values(truth, pred, exclude_zero: bool = False):
    """Absolute percentage errors of all (sample, coordinate) pairs.

    Returns ``(apes, n_excluded)``.
    """
    t, p = _pair(truth, pred)
    t = t.ravel()
    p = p.ravel()
    zero = t == 0
    if zero.any() and not exclude_zero:
        raise ZeroTruthValue(f"{int(zero.sum())} truth values are exactly zero")
    keep = ~zero
    return np.abs(t[keep] - p[keep]) / np.abs(t[keep]), int(zero.sum())


def median_ape(truth, pred, exclude_zero: bool = False) -> float:
    """Median APE pooled over samples and coordinates."""
    apes, _ = ape_values(truth, pred, exclude_zero)
    if apes.size == 0:
        raise EmptyInput("no nonzero truth values")
    return float(np.median(apes))


def r_squared(truth, pred):
    """``(per_coordinate, pooled)`` coefficients of determination."""
    t, p = _pair(truth, pred)
    if t.shape[0] < 2:
        raise EmptyInput("R^2 needs at least two samples")
    ss_res = np.sum((t - p) ** 2, axis=0)
    ss_tot = np.sum((t - t.mean(axis=0)) ** 2, axis=0)
    if np.any(ss_tot == 0):
        raise ConstantTruth("truth is constant in some coordinate")
    return 1.0 - ss_res / ss_tot, float(1.0 - ss_res.sum() / ss_tot.sum())


@dataclass
class CoordinateReport:
    mse: float
    squared_bias: float
    c_mse: float
    median_ape: float
    r2: float


@dataclass
class EvalReport:
    """Aggregate values average the per-coordinate MSE terms, pool Median-APE and R^2."""
    mse: float
    squared_bias: float
    c_mse: float
    median_ape: float
    r2: float
    n_samples: int
    n_ape_excluded: int
    per_coordinate: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        names = ["mse", "squared_bias", "c_mse", "median_ape", "r2", "n_samples", "n_ape_excluded"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            w.writerow([repr(getattr(self, n)) for n in names])


def evaluate(truth, pred, provenance: dict | None = None) -> EvalReport:
    t, p = _pair(truth, pred)
    mse, bias, cmse = mse_decompose(t, p)
    r2_coord, r2_pool = r_squared(t, p)
    apes, n_excl = ape_values(t, p, exclude_zero=True)
    coords = []
    for j in range(t.shape[1]):
        a, _ = ape_values(t[:, j], p[:, j], exclude_zero=True)
        coords.append(CoordinateReport(float(mse[j]), float(bias[j]), float(cmse[j]),
                                       float(np.median(a)) if a.size else float("nan"),
                                       float(r2_coord[j])))
    return EvalReport(float(mse.mean()), float(bias.mean()), float(cmse.mean()),
                      float(np.median(apes)), r2_pool, int(t.shape[0]), n_excl, coords,
                      dict(provenance or {}))


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: np.ndarray

    def folds(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == f) for f in range(self.k)]

    def split(self, fold: int):
        """``(train_idx, test_idx)`` holding out ``fold``."""
        return np.flatnonzero(self.assignment != fold), np.flatnonzero(self.assignment == fold)


def kfold(n: int, k: int, seed: int = 0) -> FoldPlan:
    """Random permutation chunked into k folds whose sizes differ by at most one."""
    if not (2 <= k <= n):
        raise InvalidK(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = RngStream(seed, substream_id(0, tag=4)).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(perm, k)):
        assignment[chunk] = f
    return FoldPlan(k, assignment)


def fold_summary(values) -> tuple[float, float]:
    """Mean and (population) standard deviation of per-fold scores."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())
