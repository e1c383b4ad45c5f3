"""Bifurcation diagnostics: energies, amplitudes, quantities of interest,
bifurcation diagrams, spectra, delay embeddings and steady-state detection."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import parallel
from .errors import DivergedTrajectory, InvalidInput


def _slice_of(layout, name):
    if name not in layout:
        raise InvalidInput(f"unknown field {name!r}; layout has {sorted(layout)}")
    a, b = layout[name]
    return int(a), int(b)


def _rows(traj):
    x = np.asarray(traj, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InvalidInput("trajectory must be a (time x dof) matrix")
    return x


def kinetic_energy(traj, velocity_slices, weights=None):
    """``E(t_i) = 1/2 sum_j w_j u_j(t_i)^2`` over the given velocity slices.

    ``velocity_slices`` is a list of ``(start, stop)`` pairs; ``weights``
    (optional) has one entry per state component.
    """
    x = _rows(traj)
    n_h = x.shape[1]
    idx = []
    for a, b in velocity_slices:
        if not 0 <= a < b <= n_h:
            raise InvalidInput(f"slice ({a}, {b}) outside state of width {n_h}")
        idx.extend(range(a, b))
    idx = np.asarray(idx, dtype=int)
    u = x[:, idx]
    if weights is None:
        return 0.5 * np.einsum("ij,ij->i", u, u)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_h,):
        raise InvalidInput(f"weights must have {n_h} entries")
    return 0.5 * (u * u) @ w[idx]


def amplitude(e, window=None):
    """``max - min`` of a series; ``window`` is a slice or a trailing fraction."""
    e = np.asarray(e, dtype=np.float64).ravel()
    if e.size == 0:
        raise InvalidInput("amplitude of an empty series")
    if isinstance(window, float):
        if not 0.0 < window <= 1.0:
            raise InvalidInput("trailing fraction must lie in (0, 1]")
        e = e[e.size - max(1, int(round(window * e.size))):]
    elif window is not None:
        e = e[window]
    return float(e.max() - e.min())


@dataclass(frozen=True)
class QoiSpec:
    """``kind`` is ``point_value``, ``field_l2norm`` or ``kinetic_energy``.

    Kinetic energy sums over ``velocity_fields``; by default every layout
    field whose name starts with ``u``.
    """

    kind: str
    field: str | None = None
    index: int = 0
    weights: tuple | None = None
    velocity_fields: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("point_value", "field_l2norm", "kinetic_energy"):
            raise InvalidInput(f"unknown QoI kind {self.kind!r}")
        if self.kind != "kinetic_energy" and self.field is None:
            raise InvalidInput(f"{self.kind} needs a field name")

    @classmethod
    def parse(cls, text):
        """``point_value:u2:5``, ``field_l2norm:u2`` or ``kinetic_energy``."""
        parts = text.split(":")
        try:
            if parts[0] == "point_value" and len(parts) == 3:
                return cls("point_value", parts[1], int(parts[2]))
            if parts[0] == "field_l2norm" and len(parts) == 2:
                return cls("field_l2norm", parts[1])
            if parts[0] == "kinetic_energy" and len(parts) == 1:
                return cls("kinetic_energy")
        except ValueError:
            pass
        raise InvalidInput(f"cannot parse QoI {text!r}")

    def to_dict(self):
        return {"kind": self.kind, "field": self.field, "index": self.index,
                "weights": list(self.weights) if self.weights is not None else None,
                "velocity_fields": None if self.velocity_fields is None
                else list(self.velocity_fields)}


def qoi(traj, spec: QoiSpec, layout):
    """Scalar series, one value per time sample."""
    x = _rows(traj)
    w = None if spec.weights is None else np.asarray(spec.weights, dtype=np.float64)
    if w is not None and w.shape != (x.shape[1],):
        raise InvalidInput(f"QoI weights must have {x.shape[1]} entries")
    if spec.kind == "kinetic_energy":
        names = spec.velocity_fields
        if names is None:
            names = [f for f in layout if f.startswith("u")]
            if not names:
                raise InvalidInput("layout has no velocity field (names starting with 'u')")
        slices = [_slice_of(layout, f) for f in names]
        return kinetic_energy(x, slices, w)
    a, b = _slice_of(layout, spec.field)
    if b > x.shape[1]:
        raise InvalidInput("layout does not fit the trajectory width")
    if spec.kind == "point_value":
        if not 0 <= spec.index < b - a:
            raise InvalidInput(f"index {spec.index} outside field {spec.field!r} of width {b - a}")
        return x[:, a + spec.index].copy()
    u = x[:, a:b]
    if w is None:
        return np.sqrt(np.einsum("ij,ij->i", u, u))
    return np.sqrt((u * u) @ w[a:b])


@dataclass
class Diagram:
    params: np.ndarray
    values: np.ndarray
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.params.shape != self.values.shape:
            raise InvalidInput("diagram params and values differ in length")
        if not self.labels:
            self.labels = ["ok"] * self.params.size

    def to_csv(self, path=None):
        return write_csv(path, ["mu", "value", "label"], [self.params, self.values, self.labels])

    def to_json(self):
        return json.dumps({"params": self.params.tolist(), "values": self.values.tolist(),
                           "labels": list(self.labels)})


def _reduce(series, mode, amp_window):
    if mode == "final_value":
        return float(series[-1])
    if mode == "amplitude":
        return amplitude(series, amp_window)
    raise InvalidInput(f"unknown diagram mode {mode!r}")


def bifurcation_diagram(source, spec: QoiSpec, mode="final_value", params=None, x0=None,
                        t0=0.0, t_end=None, dt=None, amp_window=0.25, layout=None):
    """Diagram from a SnapshotSet, or from a RomModel over ``params``.

    For a model, ``x0`` is one full-order state, a list (one per parameter)
    or a callable ``mu -> state``. Diverged runs are kept with value NaN and
    label ``diverged``.
    """
    if hasattr(source, "trajectories"):
        layout = layout or source.field_layout
        vals = []
        for m, tr in enumerate(source.trajectories):
            last = source.last_valid_index(m)
            vals.append(_reduce(qoi(tr[: last + 1], spec, layout), mode, amp_window))
        return Diagram(np.asarray(source.params, dtype=np.float64), np.asarray(vals))

    from .rom import online_predict

    model = source
    if params is None or len(params) == 0:
        raise InvalidInput("a model diagram needs a nonempty parameter grid")
    if t_end is None or dt is None or x0 is None:
        raise InvalidInput("a model diagram needs x0, t_end and dt")
    layout = layout or model.field_layout
    params = [float(p) for p in params]

    def start(i, mu):
        if callable(x0):
            return x0(mu)
        arr = np.asarray(x0, dtype=np.float64)
        return arr if arr.ndim == 1 else arr[i]

    def run(i):
        mu = params[i]
        try:
            traj = online_predict(model, start(i, mu), mu, t0, t_end, dt)
        except DivergedTrajectory:
            return float("nan"), "diverged"
        return _reduce(qoi(traj, spec, layout), mode, amp_window), "ok"

    with ThreadPoolExecutor(max_workers=parallel.workers()) as ex:
        out = list(ex.map(run, range(len(params))))
    return Diagram(np.asarray(params), np.asarray([o[0] for o in out]), [o[1] for o in out])


def locate_onset(diagram: Diagram, floor=1e-6):
    """First parameter (in increasing order) whose value exceeds ``floor``, or None."""
    order = np.argsort(diagram.params)
    for i in order:
        v = diagram.values[i]
        if np.isfinite(v) and v > floor:
            return float(diagram.params[i])
    return None


@dataclass
class BranchFit:
    slope: float
    intercept: float
    r2: float

    @property
    def root(self):
        """Parameter where the fitted ``value^2`` line crosses zero."""
        return -self.intercept / self.slope


def fit_branch_law(mu, values):
    """Least-squares line ``value^2 = intercept + slope * mu`` with its R^2."""
    mu = np.asarray(mu, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64) ** 2
    if mu.size < 3:
        raise InvalidInput("branch fit needs at least 3 points")
    a = np.column_stack([np.ones_like(mu), mu])
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    res = y - a @ coef
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(res * res) / ss_tot if ss_tot > 0 else 1.0
    return BranchFit(float(coef[1]), float(coef[0]), float(r2))


@dataclass
class Spectrum:
    frequencies: np.ndarray
    power: np.ndarray
    dt: float
    n: int

    def peak(self, skip_dc=True):
        p = self.power[1:] if skip_dc else self.power
        k = int(np.argmax(p)) + (1 if skip_dc else 0)
        return float(self.frequencies[k]), float(self.power[k])

    def to_csv(self, path=None):
        return write_csv(path, ["frequency", "power"], [self.frequencies, self.power])


def psd(signal, dt, detrend=False):
    """One-sided power spectrum ``|X_k|^2 / N``, interior bins doubled.

    With this normalization ``sum(power) == sum(signal**2)``. numpy's FFT
    handles every length in O(N log N).
    """
    s = np.asarray(signal, dtype=np.float64).ravel()
    n = s.size
    if n < 4:
        raise InvalidInput("psd needs at least 4 samples")
    if not dt > 0:
        raise InvalidInput("dt must be positive")
    if detrend:
        s = s - s.mean()
    x = np.fft.rfft(s)
    p = (x.real ** 2 + x.imag ** 2) / n
    last = p.size - 1 if n % 2 == 0 else p.size
    p[1:last] *= 2.0
    return Spectrum(np.arange(p.size) / (n * dt), p, float(dt), n)


def delay_embed(signal, lag, dim):
    """Row ``i`` is ``[s(i), s(i+lag), ..., s(i+(dim-1) lag)]``."""
    s = np.asarray(signal, dtype=np.float64).ravel()
    if lag < 1 or dim < 1:
        raise InvalidInput("lag and dimension must be positive")
    span = (dim - 1) * lag
    if s.size <= span:
        raise InvalidInput(f"series of length {s.size} too short for lag {lag}, dimension {dim}")
    rows = s.size - span
    return np.column_stack([s[k * lag: k * lag + rows] for k in range(dim)])


def steady_state_time(traj, tol):
    """First ``n`` with ``|x[n+1] - x[n]| / |x[n]| < tol``; rows with zero norm are skipped."""
    x = _rows(traj)
    if x.shape[0] < 2:
        raise InvalidInput("steady_state_time needs at least 2 rows")
    step = np.linalg.norm(np.diff(x, axis=0), axis=1)
    base = np.linalg.norm(x[:-1], axis=1)
    ok = base > 0
    hit = np.zeros(step.size, dtype=bool)
    hit[ok] = step[ok] < tol * base[ok]
    idx = np.flatnonzero(hit)
    return int(idx[0]) if idx.size else None


def write_csv(path, header, columns):
    """CSV with a header row; floats use ``%.17g`` so they read back exactly."""
    n = len(columns[0])
    lines = [",".join(header)]
    for i in range(n):
        cells = []
        for col in columns:
            v = col[i]
            cells.append(v if isinstance(v, str) else "%.17g" % float(v))
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="ascii", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path):
    """Inverse of :func:`write_csv`; returns ``(header, columns)`` with numeric
    columns as float arrays and any other column as a list of strings."""
    with open(path, encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    cols = []
    for k in range(len(header)):
        cells = [r[k] for r in rows]
        try:
            cols.append(np.array([float(c) for c in cells], dtype=np.float64))
        except ValueError:
            cols.append(cells)
    return header, cols
