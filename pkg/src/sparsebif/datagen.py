"""Synthetic full-order datasets with known pitchfork and Hopf bifurcations.

A low-dimensional normal form (plus fast, linearly decaying transverse
coordinates) is integrated with RK4 and embedded into ``N_h`` degrees of
freedom by a :class:`LiftMap`.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import parallel
from .errors import DivergedTrajectory, InvalidInput
from .numkit import Rng, TimeGrid, random_orthogonal, rk4_integrate, rk4_step

KINDS = ("pitchfork", "hopf", "lorenz")
CORE_DIMS = {"pitchfork": 1, "hopf": 2, "lorenz": 3}
LORENZ_SIGMA = 10.0
LORENZ_BETA = 8.0 / 3.0


@dataclass(frozen=True)
class FomSystem:
    """Normal-form surrogate.

    For ``lorenz`` the parameter ``mu`` plays the role of rho (sigma=10,
    beta=8/3 fixed).
    """

    kind: str = "pitchfork"
    mu_star: float = 0.96
    omega: float = 1.0
    transverse_dims: int = 3
    transverse_rate: float = 10.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown system kind {self.kind!r}; expected one of {KINDS}")
        if not self.transverse_rate > 0:
            raise InvalidInput("transverse_rate must be positive")
        if self.transverse_dims < 0:
            raise InvalidInput("transverse_dims must be nonnegative")
        if self.kind == "hopf" and not self.omega > 0:
            raise InvalidInput("omega must be positive for the Hopf system")

    @property
    def core_dim(self):
        return CORE_DIMS[self.kind]

    @property
    def dim(self):
        return self.core_dim + self.transverse_dims

    def to_dict(self):
        return {
            "kind": self.kind,
            "mu_star": self.mu_star,
            "omega": self.omega,
            "transverse_dims": self.transverse_dims,
            "transverse_rate": self.transverse_rate,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            mu_star=float(d["mu_star"]),
            omega=float(d["omega"]),
            transverse_dims=int(d["transverse_dims"]),
            transverse_rate=float(d["transverse_rate"]),
        )


def latent_rhs(system: FomSystem, t, y, mu):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (system.dim,):
        raise InvalidInput(f"state has shape {y.shape}, system expects ({system.dim},)")
    if not (np.all(np.isfinite(y)) and np.isfinite(mu)):
        raise InvalidInput("non-finite state or parameter")
    return _rhs(system, t, y, mu)


def _rhs(system, t, y, mu):
    # unchecked version used inside the integrators
    out = np.empty_like(y)
    k = system.core_dim
    if system.kind == "pitchfork":
        y1 = y[0]
        out[0] = (system.mu_star - mu) * y1 - y1 * y1 * y1
    elif system.kind == "hopf":
        y1, y2 = y[0], y[1]
        alpha = mu - system.mu_star
        r2 = y1 * y1 + y2 * y2
        out[0] = alpha * y1 - system.omega * y2 - y1 * r2
        out[1] = system.omega * y1 + alpha * y2 - y2 * r2
    else:
        a, b, c = y[0], y[1], y[2]
        out[0] = LORENZ_SIGMA * (b - a)
        out[1] = a * (mu - c) - b
        out[2] = a * b - LORENZ_BETA * c
    out[k:] = -system.transverse_rate * y[k:]
    return out


def simulate_fom(system: FomSystem, mu, grid: TimeGrid, y0, stop_tol=None):
    """Integrate the latent surrogate with RK4.

    Returns ``(trajectory, stop_index)``. With ``stop_tol`` set, integration
    ends at the first step where ``|y[n+1] - y[n]| / |y[n]| < stop_tol``; the
    trajectory then has ``stop_index + 1`` rows. ``stop_index`` is ``None``
    when the whole grid was integrated.
    """
    y0 = np.asarray(y0, dtype=np.float64).ravel()
    if y0.shape != (system.dim,):
        raise InvalidInput(f"y0 has {y0.size} entries, system expects {system.dim}")
    f = lambda t, y, p: _rhs(system, t, y, p)
    if stop_tol is None:
        return rk4_integrate(f, y0, grid, mu), None
    out = np.empty((grid.count, system.dim))
    out[0] = y0
    y = y0
    h = grid.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(grid.count - 1):
            y_next = rk4_step(f, grid.t0 + n * h, y, h, mu)
            if not np.all(np.isfinite(y_next)):
                raise DivergedTrajectory(
                    f"non-finite state at step {n + 1}", last_valid=n, partial=out[: n + 1].copy()
                )
            out[n + 1] = y_next
            norm = np.linalg.norm(y)
            if norm > 0 and np.linalg.norm(y_next - y) / norm < stop_tol:
                return out[: n + 2].copy(), n + 1
            y = y_next
    return out, None


@dataclass
class LiftMap:
    """``x = offset + q y + nonlinear_gain * q2 (y * y)``.

    ``q`` and ``q2`` are jointly orthonormal blocks, so with zero gain and
    zero offset the lift is an isometry.
    """

    q: np.ndarray
    nonlinear_gain: float = 0.0
    q2: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        n_h, d = self.q.shape
        if n_h < d:
            raise InvalidInput("lift needs N_h >= latent dimension")
        if not np.allclose(self.q.T @ self.q, np.eye(d), atol=1e-10):
            raise InvalidInput("lift basis q must have orthonormal columns")
        if self.nonlinear_gain < 0:
            raise InvalidInput("nonlinear_gain must be nonnegative")
        if self.nonlinear_gain > 0 and self.q2 is None:
            raise InvalidInput("nonlinear_gain > 0 needs a second block q2")
        if self.q2 is not None:
            self.q2 = np.asarray(self.q2, dtype=np.float64)
            if self.q2.shape != self.q.shape:
                raise InvalidInput("q2 must have the same shape as q")
        if self.offset is not None:
            self.offset = np.asarray(self.offset, dtype=np.float64)
            if self.offset.shape != (n_h,):
                raise InvalidInput("offset must have N_h entries")

    @property
    def n_h(self):
        return self.q.shape[0]

    @property
    def latent_dim(self):
        return self.q.shape[1]


def make_lift(n_h, latent_dim, rng: Rng, nonlinear_gain=0.0, offset_norm=0.0):
    """Random lift; the offset (if any) is orthogonal to both blocks."""
    want = 2 * latent_dim + (1 if offset_norm > 0 else 0)
    if want > n_h:
        raise InvalidInput(f"N_h={n_h} too small for a lift of latent dimension {latent_dim}")
    basis = random_orthogonal(n_h, want, rng)
    q = basis[:, :latent_dim]
    q2 = basis[:, latent_dim : 2 * latent_dim]
    offset = offset_norm * basis[:, -1] if offset_norm > 0 else None
    return LiftMap(q=q, nonlinear_gain=float(nonlinear_gain), q2=q2, offset=offset)


def lift(latent_traj, lift_map: LiftMap):
    y = np.asarray(latent_traj, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[1] != lift_map.latent_dim:
        raise InvalidInput(
            f"latent width {y.shape[1]} does not match lift dimension {lift_map.latent_dim}"
        )
    x = y @ lift_map.q.T
    if lift_map.nonlinear_gain > 0:
        x += lift_map.nonlinear_gain * ((y * y) @ lift_map.q2.T)
    if lift_map.offset is not None:
        x += lift_map.offset
    return x


def unlift(x, lift_map: LiftMap):
    """Exact inverse of :func:`lift` on its range (``q`` is orthogonal to ``q2`` and the offset)."""
    x = np.asarray(x, dtype=np.float64)
    if lift_map.offset is not None:
        x = x - lift_map.offset
    return x @ lift_map.q


def pad_to_final(traj, grid: TimeGrid, target_count):
    traj = np.asarray(traj, dtype=np.float64)
    rows = traj.shape[0]
    if target_count < rows:
        raise InvalidInput(f"cannot pad {rows} rows down to {target_count}")
    if target_count > grid.count:
        raise InvalidInput("target_count exceeds the grid length")
    if rows == target_count:
        return traj.copy()
    out = np.empty((target_count, traj.shape[1]))
    out[:rows] = traj
    out[rows:] = traj[-1]
    return out


def default_layout(n_h):
    """Three field slices mimicking (u1, u2, p) with a 2:2:1 split."""
    a = (2 * n_h) // 5
    b = (4 * n_h) // 5
    return {"u1": (0, a), "u2": (a, b), "p": (b, n_h)}


@dataclass
class SnapshotSet:
    params: list
    grid: TimeGrid
    trajectories: list
    field_layout: dict
    metadata: dict = field(default_factory=dict)
    stop_indices: list | None = None

    def __post_init__(self):
        if not self.trajectories:
            raise InvalidInput("a snapshot set needs at least one trajectory")
        if len(self.params) != len(self.trajectories):
            raise InvalidInput("params and trajectories differ in length")
        p = np.asarray(self.params, dtype=np.float64)
        if np.any(np.diff(p) <= 0):
            raise InvalidInput("params must be strictly increasing")
        n_h = self.trajectories[0].shape[1]
        for tr in self.trajectories:
            if tr.shape != (self.grid.count, n_h):
                raise InvalidInput(
                    f"trajectory shape {tr.shape} inconsistent with ({self.grid.count}, {n_h})"
                )
        check_layout(self.field_layout, n_h)
        if self.stop_indices is None:
            self.stop_indices = [None] * len(self.params)

    @property
    def n_h(self):
        return self.trajectories[0].shape[1]

    def last_valid_index(self, m):
        """Index of the last non-padded sample of trajectory ``m``."""
        s = self.stop_indices[m]
        return self.grid.count - 1 if s is None else int(s)

    def digest(self):
        h = hashlib.sha256()
        h.update(np.asarray(self.params, dtype="<f8").tobytes())
        for tr in self.trajectories:
            h.update(np.ascontiguousarray(tr, dtype="<f8").tobytes())
        return h.hexdigest()


def check_layout(layout, n_h):
    spans = sorted((int(a), int(b)) for a, b in layout.values())
    pos = 0
    for a, b in spans:
        if a != pos or b <= a:
            raise InvalidInput(f"field layout does not partition [0, {n_h})")
        pos = b
    if pos != n_h:
        raise InvalidInput(f"field layout does not partition [0, {n_h})")


def initial_states(system: FomSystem, n, rng: Rng, amplitude=0.01, transverse_scale=0.1):
    """Seeded initial latent state, shared by all ``n`` parameters.

    Like a solver sweep that starts every run from the same initial guess:
    one seeded branch sign (pitchfork) or phase (Hopf) and one seeded
    transverse vector per dataset.
    """
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    phase = rng.uniform(0.0, 2.0 * np.pi)
    y0 = np.zeros(system.dim)
    if system.kind == "pitchfork":
        y0[0] = sign * amplitude
    elif system.kind == "hopf":
        y0[0] = amplitude * np.cos(phase)
        y0[1] = amplitude * np.sin(phase)
    else:
        y0[:3] = np.array([-8.0, 8.0, 27.0])
    if system.transverse_dims:
        y0[system.core_dim:] = transverse_scale * rng.normal(system.transverse_dims)
    return [y0.copy() for _ in range(n)]


def generate_dataset(system: FomSystem, params, grid: TimeGrid, lift_map: LiftMap, rng: Rng,
                     stop_tol=None, amplitude=0.01, transverse_scale=0.1, layout=None):
    """Simulate, pad and lift one trajectory per parameter value."""
    params = [float(p) for p in params]
    if not params:
        raise InvalidInput("params must be nonempty")
    if lift_map.latent_dim != system.dim:
        raise InvalidInput(
            f"lift latent dimension {lift_map.latent_dim} != system dimension {system.dim}"
        )
    y0s = initial_states(system, len(params), rng, amplitude, transverse_scale)

    def run(i):
        traj, stop = simulate_fom(system, params[i], grid, y0s[i], stop_tol)
        return lift(pad_to_final(traj, grid, grid.count), lift_map), stop

    with ThreadPoolExecutor(max_workers=parallel.workers()) as ex:
        results = list(ex.map(run, range(len(params))))
    layout = layout or default_layout(lift_map.n_h)
    return SnapshotSet(
        params=params,
        grid=grid,
        trajectories=[r[0] for r in results],
        field_layout=dict(layout),
        metadata={"system": system.to_dict(), "seed": rng.seed, "stop_tol": stop_tol,
                  "amplitude": amplitude, "nonlinear_gain": lift_map.nonlinear_gain},
        stop_indices=[r[1] for r in results],
    )


def full_order_rhs(system: FomSystem, lift_map: LiftMap):
    """Vector field of the lifted system on all ``N_h`` degrees of freedom.

    On the lift manifold it reproduces the latent dynamics exactly; off it,
    the residual ``x - lift(unlift(x))`` relaxes at ``transverse_rate``.
    """
    q, q2, g = lift_map.q, lift_map.q2, lift_map.nonlinear_gain
    c = lift_map.offset if lift_map.offset is not None else 0.0
    kappa = system.transverse_rate

    def f(t, x, mu):
        y = q.T @ (x - c)
        fy = _rhs(system, t, y, mu)
        on = c + q @ y
        dx = q @ fy
        if g > 0:
            on = on + g * (q2 @ (y * y))
            dx = dx + 2.0 * g * (q2 @ (y * fy))
        return dx - kappa * (x - on)

    return f


def simulate_full_order(system: FomSystem, lift_map: LiftMap, mu, grid: TimeGrid, x0):
    """RK4 on the full ``N_h``-dimensional lifted system (reference cost for the ROM)."""
    return rk4_integrate(full_order_rhs(system, lift_map), x0, grid, mu)
