"""Dense numerical kernels: SVD, least squares, finite differences, splines,
RK4 and seeded randomness.

Matrices are plain 2-D ``float64`` numpy arrays; rows are samples unless a
function says otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DivergedTrajectory, InvalidInput, NumericalFailure, OutOfRange


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    count: int

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidInput(f"dt must be positive, got {self.dt}")
        if self.count < 2:
            raise InvalidInput(f"a time grid needs at least 2 samples, got {self.count}")

    @property
    def t_end(self):
        return self.t0 + (self.count - 1) * self.dt

    def times(self):
        return self.t0 + self.dt * np.arange(self.count)

    @classmethod
    def span(cls, t0, t_end, dt):
        """Grid from ``t0`` to ``t_end`` with step ``dt`` (end rounded to the nearest step)."""
        steps = int(round((t_end - t0) / dt))
        return cls(float(t0), float(dt), steps + 1)

    def to_dict(self):
        return {"t0": self.t0, "dt": self.dt, "count": self.count}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["t0"]), float(d["dt"]), int(d["count"]))


class Rng:
    """Seeded random stream.

    Backed by numpy's PCG64 (a permuted LCG) so a seed gives the same stream
    on every platform. Child streams from :meth:`spawn` are independent and
    depend only on the parent seed and the child index.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def spawn(self, count):
        return [Rng(int(s.generate_state(1, np.uint64)[0]) & 0x7FFFFFFFFFFFFFFF)
                for s in self._seq.spawn(count)]


def thin_svd(a):
    """Economy SVD ``a = u @ diag(s) @ vt`` (LAPACK gesdd via numpy)."""
    a = as_matrix(a, "svd input")
    if min(a.shape) < 1:
        raise InvalidInput("svd input must have at least one row and column")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    return u, s, vt


def least_squares(a, b, ridge=0.0):
    """Solve ``argmin ||a x - b||_F^2 + ridge ||x||_F^2``.

    With ``ridge = 0`` and a rank-deficient ``a`` the minimum-norm solution is
    returned (singular values below ``max(m, n) * eps * s_max`` are dropped).
    """
    a = as_matrix(a, "a")
    b_in = np.asarray(b, dtype=np.float64)
    b = as_matrix(b_in, "b")
    if a.shape[0] != b.shape[0]:
        raise InvalidInput(f"row mismatch: a has {a.shape[0]} rows, b has {b.shape[0]}")
    if ridge < 0:
        raise InvalidInput("ridge must be nonnegative")
    u, s, vt = thin_svd(a)
    if ridge > 0:
        filt = s / (s * s + ridge)
    else:
        cutoff = max(a.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        filt = np.zeros_like(s)
        keep = s > cutoff
        filt[keep] = 1.0 / s[keep]
    x = vt.T @ (filt[:, None] * (u.T @ b))
    return x[:, 0] if b_in.ndim == 1 else x


def central_diff(x, dt):
    """Second-order time derivative along axis 0.

    Interior rows use central differences, the first and last rows use
    one-sided three-point stencils.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 3:
        raise InvalidInput("central_diff needs at least 3 time samples")
    if not dt > 0:
        raise InvalidInput("dt must be positive")
    d = np.empty_like(x)
    d[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
    d[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt)
    d[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) / (2.0 * dt)
    return d


class SplineSet:
    """Natural cubic splines through every column of ``y`` on a uniform grid."""

    def __init__(self, grid: TimeGrid, y):
        y = as_matrix(y, "spline values")
        if grid.count < 3:
            raise InvalidInput("natural spline needs at least 3 knots")
        if y.shape[0] != grid.count:
            raise InvalidInput(f"{y.shape[0]} rows for a grid of {grid.count} knots")
        self.grid = grid
        self.knots = grid.times()
        self.values = y
        self._cs = CubicSpline(self.knots, y, bc_type="natural", axis=0)

    def __call__(self, t, nu=0):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        lo, hi = self.knots[0], self.knots[-1]
        slack = 1e-12 * max(hi - lo, 1.0)
        if np.any(t < lo - slack) or np.any(t > hi + slack):
            raise OutOfRange(f"spline evaluated outside [{lo}, {hi}]")
        t = np.clip(t, lo, hi)
        out = self._cs(t, nu)
        if nu == 0:
            # exact knot hits return the stored value bit-for-bit
            idx = np.searchsorted(self.knots, t)
            idx = np.minimum(idx, len(self.knots) - 1)
            hit = self.knots[idx] == t
            out[hit] = self.values[idx[hit]]
        return out


def natural_cubic_spline(grid, y):
    return SplineSet(grid, y)


def eval_spline(s: SplineSet, t):
    """Evaluate at a scalar time (returns a vector) or an array of times (rows)."""
    out = s(t)
    return out[0] if np.ndim(t) == 0 else out


def rk4_step(f, t, y, h, param):
    k1 = f(t, y, param)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1, param)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2, param)
    k4 = f(t + h, y + h * k3, param)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(f, y0, grid: TimeGrid, param=None):
    """Classical RK4 on ``grid``; row ``i`` of the result is the state at sample ``i``."""
    y = np.array(y0, dtype=np.float64).ravel()
    if not np.all(np.isfinite(y)):
        raise InvalidInput("initial state is not finite")
    out = np.empty((grid.count, y.size))
    out[0] = y
    h = grid.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, grid.count):
            y = rk4_step(f, grid.t0 + (i - 1) * h, y, h, param)
            if not np.all(np.isfinite(y)):
                raise DivergedTrajectory(
                    f"non-finite state at step {i}", last_valid=i - 1, partial=out[:i].copy()
                )
            out[i] = y
    return out


def random_orthogonal(rows, cols, rng: Rng):
    """``rows x cols`` matrix with orthonormal columns (Gaussian fill, then QR)."""
    if cols > rows:
        raise InvalidInput(f"cols ({cols}) must not exceed rows ({rows})")
    if cols < 1:
        raise InvalidInput("cols must be at least 1")
    g = rng.normal((rows, cols))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs
