"""Two-sided Wiener paths, the shift flow and the stationary OU process.

Times are stored as integer multiples of a fixed step so that shifts and
window lookups never interpolate. A :class:`WienerPath` keeps a reference
to the raw sampled array; shifting only moves the reference index, which
makes the flow identity ``shift(shift(w, a), b) == shift(w, a + b)`` hold
bitwise.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ConfigurationError, InsufficientPathError
from .kernels import recur_forward

DEFAULT_TRUNCATION = 40.0
_ALIGN_RTOL = 1e-9


def _steps(t, step, what="time"):
    """Convert ``t`` to an integer number of steps or raise AlignmentError."""
    q = t / step
    k = int(round(q))
    if abs(q - k) > _ALIGN_RTOL * max(1.0, abs(q)):
        raise AlignmentError(f"{what} {t!r} is not a multiple of step {step!r}")
    return k


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_min = i_min*step, ..., t_max = i_max*step`` containing 0."""

    i_min: int
    i_max: int
    step: float

    def __post_init__(self):
        if not (self.step > 0 and math.isfinite(self.step)):
            raise ConfigurationError(f"grid step must be positive, got {self.step!r}")
        if self.i_min > 0 or self.i_max < 0:
            raise ConfigurationError("grid must contain t = 0")

    @classmethod
    def from_bounds(cls, t_min, t_max, step):
        if not step > 0:
            raise ConfigurationError(f"grid step must be positive, got {step!r}")
        if t_min > 0 or t_max < 0:
            raise ConfigurationError("grid must satisfy t_min <= 0 <= t_max")
        try:
            i_min = _steps(t_min, step, "t_min")
            i_max = _steps(t_max, step, "t_max")
        except AlignmentError as exc:
            raise ConfigurationError(str(exc)) from None
        return cls(i_min, i_max, float(step))

    @property
    def t_min(self):
        return self.i_min * self.step

    @property
    def t_max(self):
        return self.i_max * self.step

    @property
    def size(self):
        return self.i_max - self.i_min + 1

    @property
    def times(self):
        return np.arange(self.i_min, self.i_max + 1) * self.step

    @property
    def zero_index(self):
        return -self.i_min

    def index(self, t):
        """Array index of grid time ``t``."""
        k = _steps(t, self.step)
        if not self.i_min <= k <= self.i_max:
            raise InsufficientPathError(
                f"time {t!r} outside grid [{self.t_min}, {self.t_max}]"
            )
        return k - self.i_min

    def covers(self, t_lo, t_hi):
        tol = _ALIGN_RTOL * self.step
        return self.t_min <= t_lo + tol and t_hi - tol <= self.t_max

    def shifted(self, k):
        """Grid re-anchored at step ``k`` (which becomes the new origin)."""
        return TimeGrid(self.i_min - k, self.i_max - k, self.step)


@dataclass(frozen=True, eq=False)
class WienerPath:
    """Sampled two-sided path, possibly a shifted view of a raw sample.

    ``values`` has shape (size, channels). ``ref`` is the raw index whose
    value is subtracted (None for a root path, which is stored verbatim).
    """

    grid: TimeGrid
    raw: np.ndarray
    offset: int = 0
    ref: int | None = None
    seed: int | None = None

    @property
    def channels(self):
        return self.raw.shape[1]

    @property
    def values(self):
        v = self.raw[self.offset:self.offset + self.grid.size]
        if self.ref is None:
            return v
        return v - self.raw[self.ref]

    def at(self, t):
        return self.values[self.grid.index(t)]

    def channel(self, j):
        return self.values[:, j]

    def to_csv(self, fname):
        write_columns_csv(
            fname,
            ["t"] + [f"channel_{j}" for j in range(self.channels)],
            np.column_stack([self.grid.times, self.values]),
        )


def write_columns_csv(fname, header, rows, comment=None):
    with open(fname, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) for x in row])


def sample_wiener(grid, channels=1, seed=0):
    """Sample a two-sided Wiener path pinned at ``omega(0) = 0``.

    Each channel draws its forward and backward increments from separate
    substreams keyed on ``(channel, side)``, so the values at a given time
    do not depend on the grid extent or the number of channels.
    """
    if not isinstance(grid, TimeGrid):
        raise ConfigurationError("grid must be a TimeGrid")
    if channels < 1:
        raise ConfigurationError("channels must be >= 1")
    sd = math.sqrt(grid.step)
    n_fwd, n_bwd = grid.i_max, -grid.i_min
    raw = np.empty((grid.size, channels))
    z0 = grid.zero_index
    for j in range(channels):
        fwd = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j, 0)))
        bwd = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j, 1)))
        raw[z0, j] = 0.0
        raw[z0 + 1:, j] = np.cumsum(fwd.normal(0.0, sd, n_fwd))
        raw[:z0, j] = np.cumsum(bwd.normal(0.0, sd, n_bwd))[::-1]
    return WienerPath(grid, raw, seed=seed)


def path_from_function(grid, func, channels=1):
    """Deterministic path ``omega(t_i) = func(t_i)`` (not forced to 0 at 0)."""
    t = grid.times
    vals = np.asarray(func(t), dtype=float)
    raw = np.broadcast_to(vals.reshape(grid.size, -1), (grid.size, channels)).copy()
    return WienerPath(grid, raw)


def subsample(path, factor):
    """Coarsen a path by keeping every ``factor``-th grid point."""
    g = path.grid
    if g.i_min % factor or g.i_max % factor:
        raise AlignmentError("grid extent is not divisible by the subsampling factor")
    vals = path.values
    keep = np.arange(0, g.size, factor)
    coarse = TimeGrid(g.i_min // factor, g.i_max // factor, g.step * factor)
    return WienerPath(coarse, np.ascontiguousarray(vals[keep]), seed=path.seed)


def shift(path, t, window=None):
    """Return ``theta_t omega = omega(. + t) - omega(t)``.

    ``window`` is an optional ``(s_lo, s_hi)`` pair that the shifted path
    must still cover.
    """
    g = path.grid
    k = _steps(t, g.step, "shift")
    if not g.i_min <= k <= g.i_max:
        raise InsufficientPathError(f"shift {t!r} leaves the path window")
    new_grid = g.shifted(k)
    if window is not None and not new_grid.covers(*window):
        raise InsufficientPathError(
            f"shifted path covers [{new_grid.t_min}, {new_grid.t_max}], "
            f"requested {window}"
        )
    origin = path.offset + g.zero_index
    return WienerPath(new_grid, path.raw, offset=path.offset, ref=origin + k, seed=path.seed)


def ou_value(path, truncation=DEFAULT_TRUNCATION, channel=0, return_bound=False):
    """Truncated ``z(omega) = -int_{-S}^0 e^tau omega(tau) dtau`` by trapezoid.

    With ``return_bound`` a pair ``(z, bound)`` is returned where ``bound`` is
    the truncation estimate ``e^{-S} (S + 1) max_{tau <= -S} |omega(tau)/tau|``.
    """
    g = path.grid
    if not truncation > 0:
        raise ConfigurationError("truncation horizon must be positive")
    if not g.covers(-truncation, 0.0):
        raise InsufficientPathError(
            f"path covers [{g.t_min}, {g.t_max}], OU value needs [{-truncation}, 0]"
        )
    i0 = g.zero_index
    m = _steps(truncation, g.step, "truncation")
    w = path.values[i0 - m:i0 + 1, channel]
    tau = np.arange(-m, 1) * g.step
    f = np.exp(tau) * w
    z = -g.step * (f.sum() - 0.5 * (f[0] + f[-1]))
    if not return_bound:
        return float(z)
    return float(z), _truncation_bound(path.values[:i0 - m + 1, channel], g, m, truncation)


def _truncation_bound(w_tail, g, m, truncation):
    tau = (np.arange(len(w_tail)) - (len(w_tail) - 1) - m) * g.step
    growth = np.max(np.abs(w_tail) / np.abs(tau))
    return float(math.exp(-truncation) * (truncation + 1.0) * growth)


@dataclass(frozen=True, eq=False)
class OUSample:
    """Stationary OU values ``z(theta_{t_i} omega)`` on ``grid``."""

    grid: TimeGrid
    values: np.ndarray
    truncation_horizon: float = DEFAULT_TRUNCATION
    quadrature_error_bound: float = 0.0
    truncation_bound: float = 0.0
    meta: dict = field(default_factory=dict)

    def at(self, t):
        return float(self.values[self.grid.index(t)])

    def window(self, t0, n, direction=1):
        """``n + 1`` consecutive values starting at ``t0`` (backwards if -1)."""
        i = self.grid.index(t0)
        j = i + direction * n
        if not 0 <= j < self.grid.size:
            raise InsufficientPathError(
                f"OU sample on [{self.grid.t_min}, {self.grid.t_max}] does not "
                f"cover {n} steps from {t0} in direction {direction}"
            )
        if direction > 0:
            return self.values[i:j + 1]
        return self.values[j:i + 1]

    def to_csv(self, fname):
        write_columns_csv(fname, ["t", "z"], np.column_stack([self.grid.times, self.values]))


def zero_ou(grid):
    """Degenerate OU sample ``z = 0`` (deterministic or additive runs)."""
    return OUSample(grid, np.zeros(grid.size), truncation_horizon=math.inf)


def ou_trajectory(path, out_grid, truncation=DEFAULT_TRUNCATION, channel=0):
    """OU values on ``out_grid`` in one sweep.

    The first value is ``ou_value`` of the shifted path; afterwards
    ``z_{i+1} = e^{-h} z_i + (1 - e^{-h})/h * (omega_{i+1} - omega_i)``,
    which integrates the kernel exactly against the piecewise-linear path.
    """
    g = path.grid
    h = g.step
    if abs(out_grid.step - h) > _ALIGN_RTOL * h:
        raise AlignmentError("output grid step must equal the path step")
    if not g.covers(out_grid.t_min - truncation, out_grid.t_max):
        raise InsufficientPathError(
            f"path covers [{g.t_min}, {g.t_max}], OU trajectory needs "
            f"[{out_grid.t_min - truncation}, {out_grid.t_max}]"
        )
    i_lo = g.index(out_grid.t_min)
    i_hi = g.index(out_grid.t_max)
    w = path.values[:, channel]
    z0, tbound = ou_value(shift(path, out_grid.t_min), truncation, channel, return_bound=True)

    n = out_grid.size - 1
    decay = math.exp(-h)
    weight = -math.expm1(-h) / h
    dw = np.diff(w[i_lo:i_hi + 1])
    z = recur_forward(np.full((n, 1), decay), (weight * dw)[:, None], [z0])[:, 0]

    # Trapezoid error of the first value, propagated bound for later values.
    m = _steps(truncation, h, "truncation")
    lo = i_lo - m
    absw = np.abs(w[lo:i_hi + 1])
    absdw = np.abs(np.diff(w[lo:i_hi + 1], prepend=w[lo]))
    run = recur_forward(
        np.full((len(absw) - 1, 1), decay),
        (h * absw[1:] + 2.0 * absdw[1:])[:, None],
        [0.0],
    )[:, 0][m:]
    quad = (h * h / 12.0) * (run + np.abs(w[i_lo:i_hi + 1]))
    qbound = float(quad.max()) + tbound

    return OUSample(
        out_grid,
        z,
        truncation_horizon=float(truncation),
        quadrature_error_bound=qbound,
        truncation_bound=tbound,
        meta={"seed": path.seed},
    )


def cumulative_integral(values, step):
    """Trapezoid running integral with ``out[0] = 0``."""
    v = np.asarray(values, dtype=float)
    out = np.zeros(v.shape)
    out[1:] = np.cumsum(0.5 * step * (v[1:] + v[:-1]), axis=0)
    return out


def ou_residual(ou, path, channel=0):
    """Pointwise defect of ``z(theta_t w) - z(w) + int_0^t z - w(t)``."""
    g = ou.grid
    i0 = g.zero_index
    Z = cumulative_integral(ou.values, g.step)
    Z = Z - Z[i0]
    if not path.grid.covers(g.t_min, g.t_max):
        raise InsufficientPathError("path does not cover the OU sample grid")
    lo = path.grid.index(g.t_min)
    wv = path.values[lo:lo + g.size, channel] - path.at(0.0)[channel]
    return ou.values - ou.values[i0] + Z - wv


def birkhoff_average(ou, T):
    """Time average ``(1/T) int_0^T z(theta_s w) ds`` by trapezoid."""
    g = ou.grid
    k = _steps(T, g.step, "averaging horizon")
    if k <= 0:
        raise ConfigurationError("averaging horizon must be positive")
    seg = ou.window(0.0, k)
    return float(g.step * (seg.sum() - 0.5 * (seg[0] + seg[-1])) / T)
