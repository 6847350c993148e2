"""FitzHugh-Nagumo forward model.

The right-hand side is

    du/dt = gamma * (u - u**3/3 + v + zeta)
    dv/dt = -(u - theta0 + theta1 * v) / gamma

and is integrated with an adaptive Bogacki-Shampine 3(2) pair. The membrane
potential is sampled on the uniform grid ``t_i = i * dt_out`` (``i = 1..N_t``)
with the cubic Hermite interpolant that the pair provides between accepted
steps.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np

from .errors import NonFiniteState, StepSizeUnderflow

DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-12
MIN_STEP = 1e-10
SPIKE_THRESHOLD = 1.5

_OK = 0
_UNDERFLOW = 1
_NONFINITE = 2


class ThetaPair(NamedTuple):
    theta0: float
    theta1: float


class State(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class SimConstants:
    gamma: float = 3.0
    zeta: float = -0.4
    u0: float = 0.0
    v0: float = 0.0
    t_end: float = 200.0
    dt_out: float = 0.2

    def __post_init__(self):
        if self.gamma == 0:
            raise ValueError("gamma must be nonzero")
        if not (self.t_end > 0 and self.dt_out > 0):
            raise ValueError("t_end and dt_out must be positive")
        ratio = self.t_end / self.dt_out
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ValueError(f"t_end / dt_out = {ratio} is not a positive integer")

    @property
    def n_t(self) -> int:
        return int(round(self.t_end / self.dt_out))

    def times(self) -> np.ndarray:
        return self.dt_out * np.arange(1, self.n_t + 1, dtype=np.float64)


@dataclass(frozen=True)
class TimeSeries:
    dt: float
    values: np.ndarray

    def __len__(self):
        return len(self.values)

    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, len(self.values) + 1, dtype=np.float64)


@dataclass(frozen=True)
class SpikeStats:
    rate: float
    mean_duration: float
    count: int


def fhn_rhs(state: State, theta: ThetaPair, consts: SimConstants) -> State:
    u, v = state
    g = consts.gamma
    return State(
        g * (u - u**3 / 3.0 + v + consts.zeta),
        -(u - theta[0] + theta[1] * v) / g,
    )


@numba.njit(cache=True)
def _rhs(u, v, th0, th1, gamma, zeta):
    return (gamma * (u - u * u * u / 3.0 + v + zeta),
            -(u - th0 + th1 * v) / gamma)


@numba.njit(cache=True)
def _rms_err(eu, ev, u, v, un, vn, rtol, atol):
    su = atol + max(abs(u), abs(un)) * rtol
    sv = atol + max(abs(v), abs(vn)) * rtol
    return math.sqrt(0.5 * ((eu / su) ** 2 + (ev / sv) ** 2))


@numba.njit(cache=True)
def _rk23(th0, th1, gamma, zeta, u0, v0, t_end, dt_out, n_out, rtol, atol, h_min):
    out = np.empty(n_out)
    u = u0
    v = v0
    t = 0.0
    fu, fv = _rhs(u, v, th0, th1, gamma, zeta)

    # initial step heuristic (Hairer, Norsett & Wanner, II.4)
    su = atol + abs(u) * rtol
    sv = atol + abs(v) * rtol
    d0 = math.sqrt(0.5 * ((u / su) ** 2 + (v / sv) ** 2))
    d1 = math.sqrt(0.5 * ((fu / su) ** 2 + (fv / sv) ** 2))
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    gu, gv = _rhs(u + h0 * fu, v + h0 * fv, th0, th1, gamma, zeta)
    d2 = math.sqrt(0.5 * (((gu - fu) / su) ** 2 + ((gv - fv) / sv) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 3.0)
    h = min(100.0 * h0, h1, t_end)

    i = 0
    rejected = False
    while i < n_out:
        last = False
        if h >= t_end - t:
            h = t_end - t
            last = True
        if h < h_min:
            return out, _UNDERFLOW

        k2u, k2v = _rhs(u + 0.5 * h * fu, v + 0.5 * h * fv, th0, th1, gamma, zeta)
        k3u, k3v = _rhs(u + 0.75 * h * k2u, v + 0.75 * h * k2v, th0, th1, gamma, zeta)
        un = u + h * (2.0 / 9.0 * fu + 1.0 / 3.0 * k2u + 4.0 / 9.0 * k3u)
        vn = v + h * (2.0 / 9.0 * fv + 1.0 / 3.0 * k2v + 4.0 / 9.0 * k3v)
        if not (math.isfinite(un) and math.isfinite(vn)):
            return out, _NONFINITE
        k4u, k4v = _rhs(un, vn, th0, th1, gamma, zeta)
        eu = h * (-5.0 / 72.0 * fu + 1.0 / 12.0 * k2u + 1.0 / 9.0 * k3u - 0.125 * k4u)
        ev = h * (-5.0 / 72.0 * fv + 1.0 / 12.0 * k2v + 1.0 / 9.0 * k3v - 0.125 * k4v)
        err = _rms_err(eu, ev, u, v, un, vn, rtol, atol)

        if err >= 1.0:
            h *= max(0.2, 0.9 * err ** (-1.0 / 3.0))
            rejected = True
            continue

        t_new = t_end if last else t + h
        while i < n_out:
            tg = (i + 1) * dt_out
            if tg > t_new and not last:
                break
            s = (tg - t) / h
            if s > 1.0:
                s = 1.0
            s2 = s * s
            s3 = s2 * s
            out[i] = ((2.0 * s3 - 3.0 * s2 + 1.0) * u
                      + (s3 - 2.0 * s2 + s) * h * fu
                      + (3.0 * s2 - 2.0 * s3) * un
                      + (s3 - s2) * h * k4u)
            i += 1

        t = t_new
        u = un
        v = vn
        fu = k4u
        fv = k4v
        if err == 0.0:
            factor = 10.0
        else:
            factor = min(10.0, 0.9 * err ** (-1.0 / 3.0))
        if rejected:
            factor = min(1.0, factor)
        rejected = False
        h *= factor
    return out, _OK


def integrate(theta, consts: SimConstants = SimConstants(),
              rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
              h_min: float = MIN_STEP) -> TimeSeries:
    """Solve the ODE and return the membrane potential on the output grid.

    Raises StepSizeUnderflow or NonFiniteState for pathological parameters.
    """
    th0, th1 = float(theta[0]), float(theta[1])
    out, status = _rk23(th0, th1, float(consts.gamma), float(consts.zeta),
                        float(consts.u0), float(consts.v0), float(consts.t_end),
                        float(consts.dt_out), consts.n_t, float(rtol), float(atol),
                        float(h_min))
    if status == _UNDERFLOW:
        raise StepSizeUnderflow(f"step size below {h_min} for theta={theta}")
    if status == _NONFINITE:
        raise NonFiniteState(f"non-finite state for theta={theta}")
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"non-finite output for theta={theta}")
    return TimeSeries(consts.dt_out, out)


def spike_stats(series: TimeSeries, threshold: float = SPIKE_THRESHOLD) -> SpikeStats:
    """Count threshold up-crossings and their mean super-threshold duration.

    A series starting above threshold counts its first run as a spike. A
    spike still open at the end contributes its truncated duration.
    """
    x = np.asarray(series.values)
    if x.size == 0:
        raise ValueError("empty series")
    above = x >= threshold
    edges = np.diff(above.astype(np.int8), prepend=np.int8(0), append=np.int8(0))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    count = len(starts)
    total_time = x.size * series.dt
    if count == 0:
        return SpikeStats(0.0, 0.0, 0)
    durations = (ends - starts) * series.dt
    return SpikeStats(count / total_time, float(durations.mean()), count)


def _grid_cell(args):
    th0, th1, consts, threshold, rtol, atol = args
    try:
        return spike_stats(integrate((th0, th1), consts, rtol, atol), threshold)
    except (StepSizeUnderflow, NonFiniteState):
        return None


def spike_grid(theta0_range, theta1_range, resolution, consts: SimConstants = SimConstants(),
               threshold: float = SPIKE_THRESHOLD, rtol: float = DEFAULT_RTOL,
               atol: float = DEFAULT_ATOL):
    """Evaluate spike statistics on a Cartesian theta grid.

    ``resolution`` is an int or a (n0, n1) pair. Returns ``(theta0_axis,
    theta1_axis, cells)`` with ``cells[i][j]`` the SpikeStats at
    ``(theta0_axis[i], theta1_axis[j])`` or None where integration failed.
    """
    n0, n1 = (resolution, resolution) if np.isscalar(resolution) else resolution
    if n0 < 2 or n1 < 2:
        raise ValueError("resolution must be at least 2 per axis")
    ax0 = np.linspace(theta0_range[0], theta0_range[1], n0)
    ax1 = np.linspace(theta1_range[0], theta1_range[1], n1)
    cells = [[_grid_cell((a, b, consts, threshold, rtol, atol)) for b in ax1] for a in ax0]
    return ax0, ax1, cells


def write_series_csv(path, series: TimeSeries, extra: dict | None = None) -> None:
    """Write ``t,u`` rows (plus optional extra columns) with round-trip precision."""
    cols = {"t": series.times(), "u": series.values}
    if extra:
        cols.update(extra)
    names = list(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*(cols[n] for n in names)):
            w.writerow([repr(float(x)) for x in row])


def write_grid_csv(path, ax0, ax1, cells) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta0", "theta1", "rate", "mean_duration", "count"])
        for i, a in enumerate(ax0):
            for j, b in enumerate(ax1):
                c = cells[i][j]
                if c is None:
                    w.writerow([repr(float(a)), repr(float(b)), "nan", "nan", ""])
                else:
                    w.writerow([repr(float(a)), repr(float(b)), repr(c.rate),
                                repr(c.mean_duration), c.count])
