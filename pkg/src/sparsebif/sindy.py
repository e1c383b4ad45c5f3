"""Polynomial candidate libraries, sequentially thresholded least squares
(plain and ensembled), simulation of identified models and equation printing.
"""
from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import comb, isfinite

import numpy as np

from . import parallel
from .errors import DivergedTrajectory, InvalidInput
from .numkit import Rng, TimeGrid, as_matrix, least_squares


class SparsityWarning(UserWarning):
    """A regression column lost every term to thresholding."""


def _monomial_exponents(n, degree):
    """Exponent tuples of total degree <= ``degree``, graded, then lexicographically
    descending within a degree (``z0^2, z0 z1, z1^2``)."""
    out = []
    for d in range(degree + 1):
        level = [e for e in itertools.product(range(d, -1, -1), repeat=n) if sum(e) == d]
        level.sort(reverse=True)
        out.extend(level)
    return out


@dataclass(frozen=True)
class LibrarySpec:
    """Monomials in the state times powers of the (scalar) parameter.

    Column order: state monomials in graded lexicographic order, and for each
    monomial the parameter powers ``mu^0 .. mu^param_degree``. Without
    ``include_bias`` the single constant column is dropped.
    """

    state_dim: int
    param_dim: int = 1
    state_degree: int = 2
    param_degree: int = 0
    include_bias: bool = True

    def __post_init__(self):
        if self.state_dim < 1:
            raise InvalidInput("state_dim must be at least 1")
        if self.state_degree < 0 or self.param_degree < 0:
            raise InvalidInput("library degrees must be nonnegative")
        if self.param_dim not in (0, 1):
            raise InvalidInput("only scalar parameters are supported (param_dim 0 or 1)")
        if self.param_dim == 0 and self.param_degree > 0:
            raise InvalidInput("param_degree > 0 needs param_dim = 1")

    def terms(self):
        """List of (state exponent tuple, parameter power) in column order."""
        out = []
        for e in _monomial_exponents(self.state_dim, self.state_degree):
            for k in range(self.param_degree + 1):
                if not self.include_bias and sum(e) == 0 and k == 0:
                    continue
                out.append((e, k))
        return out

    @property
    def n_terms(self):
        r = comb(self.state_dim + self.state_degree, self.state_degree) * (self.param_degree + 1)
        return r if self.include_bias else r - 1

    def exponents(self):
        t = self.terms()
        e = np.array([a for a, _ in t], dtype=np.int64).reshape(len(t), self.state_dim)
        k = np.array([b for _, b in t], dtype=np.int64)
        return e, k

    def term_names(self, var="z", param="mu"):
        names = []
        for e, k in self.terms():
            parts = []
            for j, p in enumerate(e):
                if p == 1:
                    parts.append(f"{var}{j}")
                elif p > 1:
                    parts.append(f"{var}{j}^{p}")
            if k == 1:
                parts.append(param)
            elif k > 1:
                parts.append(f"{param}^{k}")
            names.append(" ".join(parts) if parts else "1")
        return names

    def to_dict(self):
        return {"state_dim": self.state_dim, "param_dim": self.param_dim,
                "state_degree": self.state_degree, "param_degree": self.param_degree,
                "include_bias": self.include_bias}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["state_dim"]), int(d["param_dim"]), int(d["state_degree"]),
                   int(d["param_degree"]), bool(d["include_bias"]))


class Library:
    """Evaluator for a :class:`LibrarySpec` with cached exponent tables."""

    def __init__(self, spec: LibrarySpec):
        self.spec = spec
        self.exp, self.pow = spec.exponents()
        self.max_deg = spec.state_degree

    def _powers(self, z):
        # p[j, e] = z[:, j] ** e as an array of shape (n, degree + 1, batch)
        b, n = z.shape
        p = np.ones((n, self.max_deg + 1, b))
        for e in range(1, self.max_deg + 1):
            p[:, e] = p[:, e - 1] * z.T
        return p

    def _mu_powers(self, mu, b):
        kmax = self.spec.param_degree
        mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (b,))
        m = np.ones((kmax + 1, b))
        for k in range(1, kmax + 1):
            m[k] = m[k - 1] * mu
        return m

    def evaluate(self, z, mu):
        """Theta(z; mu) with shape (batch, r)."""
        z = np.asarray(z, dtype=np.float64)
        b, n = z.shape
        p = self._powers(z)
        theta = np.ones((len(self.pow), b))
        for j in range(n):
            theta *= p[j, self.exp[:, j]]
        theta *= self._mu_powers(mu, b)[self.pow]
        return theta.T

    def evaluate_with_grad(self, z, mu):
        """Theta and dTheta/dz; the gradient has shape (n, batch, r)."""
        z = np.asarray(z, dtype=np.float64)
        b, n = z.shape
        p = self._powers(z)
        mp = self._mu_powers(mu, b)[self.pow]
        factors = [p[j, self.exp[:, j]] for j in range(n)]
        theta = mp.copy()
        for f in factors:
            theta *= f
        grad = np.empty((n, b, len(self.pow)))
        for j in range(n):
            e = self.exp[:, j]
            d = e[:, None] * p[j, np.maximum(e - 1, 0)]
            for i in range(n):
                if i != j:
                    d = d * factors[i]
            grad[j] = (d * mp).T
        return theta.T, grad


def build_library(z, mu_per_row, spec: LibrarySpec):
    z = as_matrix(z, "library input")
    if z.shape[1] != spec.state_dim:
        raise InvalidInput(f"state width {z.shape[1]} != library state_dim {spec.state_dim}")
    mu = np.asarray(mu_per_row, dtype=np.float64).ravel()
    if spec.param_dim == 0:
        mu = np.zeros(z.shape[0]) if mu.size == 0 else mu
    if mu.size != z.shape[0]:
        raise InvalidInput("mu_per_row length must match the number of samples")
    if not np.all(np.isfinite(mu)):
        raise InvalidInput("non-finite parameter values")
    return Library(spec).evaluate(z, mu)


def stlsq(theta, zdot, tau, ridge=1e-10, max_iter=20):
    """Sequentially thresholded least squares.

    Fits, zeroes every coefficient below ``tau`` in magnitude, refits each
    output column on its surviving terms, and repeats until the support stops
    changing. A column left with no terms comes back all-zero together with a
    :class:`SparsityWarning`.
    """
    theta = as_matrix(theta, "theta")
    zdot = as_matrix(zdot, "zdot")
    if theta.shape[0] != zdot.shape[0]:
        raise InvalidInput("theta and zdot must have the same number of rows")
    xi = least_squares(theta, zdot, ridge)
    support = np.abs(xi) >= tau
    for _ in range(max_iter):
        new = np.zeros_like(xi)
        for j in range(zdot.shape[1]):
            idx = np.flatnonzero(support[:, j])
            if idx.size:
                new[idx, j] = least_squares(theta[:, idx], zdot[:, j], ridge)
        xi = new
        shrunk = support & (np.abs(xi) >= tau)
        if np.array_equal(shrunk, support):
            break
        support = shrunk
    xi[np.abs(xi) < tau] = 0.0
    empty = ~np.any(xi != 0.0, axis=0)
    if np.any(empty):
        warnings.warn(f"STLSQ removed every term from columns {np.flatnonzero(empty).tolist()}",
                      SparsityWarning, stacklevel=2)
    return xi


@dataclass
class EnsembleConfig:
    """Bagging over rows plus random library column dropping.

    Rows are subsampled without replacement unless ``replace`` is set; with
    ``sample_fraction = 1`` and ``replace`` off every member sees all rows.
    """

    n_models: int = 20
    sample_fraction: float = 0.8
    library_drop_count: int = 0
    aggregation: str = "median"
    seed: int = 0
    replace: bool = False

    def __post_init__(self):
        if self.n_models < 1:
            raise InvalidInput("n_models must be at least 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise InvalidInput("sample_fraction must lie in (0, 1]")
        if self.library_drop_count < 0:
            raise InvalidInput("library_drop_count must be nonnegative")
        if self.aggregation not in ("median", "mean"):
            raise InvalidInput("aggregation must be 'median' or 'mean'")

    def to_dict(self):
        return dict(self.__dict__)


def ensemble_stlsq(theta, zdot, tau, ridge=1e-10, cfg: EnsembleConfig | None = None, max_iter=20):
    cfg = cfg or EnsembleConfig()
    theta = as_matrix(theta, "theta")
    zdot = as_matrix(zdot, "zdot")
    if theta.shape[0] != zdot.shape[0]:
        raise InvalidInput("theta and zdot must have the same number of rows")
    n_rows, r = theta.shape
    if cfg.library_drop_count >= r:
        raise InvalidInput("library_drop_count must leave at least one column")
    m = max(1, int(round(cfg.sample_fraction * n_rows)))
    # all draws happen up front so the result does not depend on scheduling
    plans = []
    for child in Rng(cfg.seed).spawn(cfg.n_models):
        if m == n_rows and not cfg.replace:
            rows = np.arange(n_rows)
        else:
            rows = np.sort(child.choice(n_rows, m, replace=cfg.replace))
        keep = np.arange(r)
        if cfg.library_drop_count:
            drop = child.choice(r, cfg.library_drop_count, replace=False)
            keep = np.setdiff1d(keep, drop)
        plans.append((rows, keep))

    def member(plan):
        rows, keep = plan
        xi = np.zeros((r, zdot.shape[1]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SparsityWarning)
            xi[keep] = stlsq(theta[np.ix_(rows, keep)], zdot[rows], tau, ridge, max_iter)
        return xi

    with ThreadPoolExecutor(max_workers=parallel.workers()) as ex:
        members = np.stack(list(ex.map(member, plans)))
    agg = np.median(members, axis=0) if cfg.aggregation == "median" else members.mean(axis=0)
    agg[np.abs(agg) < tau] = 0.0
    empty = ~np.any(agg != 0.0, axis=0)
    if np.any(empty):
        warnings.warn(f"ensemble removed every term from columns {np.flatnonzero(empty).tolist()}",
                      SparsityWarning, stacklevel=2)
    return agg


@dataclass
class SindyModel:
    spec: LibrarySpec
    xi: np.ndarray
    tau: float = 0.0
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.float64)
        if self.xi.shape != (self.spec.n_terms, self.spec.state_dim):
            raise InvalidInput(
                f"xi shape {self.xi.shape} != ({self.spec.n_terms}, {self.spec.state_dim})"
            )
        self._lib = Library(self.spec)

    def rhs_matrix(self, z, mu):
        return self._lib.evaluate(np.atleast_2d(z), mu) @ self.xi

    def field_at(self, mu):
        """Right-hand side ``f(t, z, _)`` with the parameter folded into the coefficients."""
        exp, pw = self._lib.exp, self._lib.pow
        mono, inverse = np.unique(exp, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).ravel()
        coef = np.zeros((mono.shape[0], self.spec.state_dim))
        mu_pw = float(mu) ** pw if self.spec.param_dim else np.where(pw == 0, 1.0, 0.0)
        np.add.at(coef, inverse, mu_pw[:, None] * self.xi)
        live = np.any(coef != 0.0, axis=1)
        mono, coef = mono[live], coef[live]
        if mono.shape[0] == 0:
            zero = np.zeros(self.spec.state_dim)
            return lambda t, z, p: zero
        linear_only = bool(np.all(mono.sum(axis=1) <= 1))
        if linear_only:
            const = coef[mono.sum(axis=1) == 0].sum(axis=0)
            lin = np.zeros((self.spec.state_dim, self.spec.state_dim))
            for row, e in zip(coef, mono):
                if e.sum() == 1:
                    lin[int(np.argmax(e))] += row
            return lambda t, z, p: const + z @ lin
        return lambda t, z, p: np.prod(z ** mono, axis=1) @ coef

    def _compiled(self, mu, h):
        """Straight-line source for the field and one RK4 step at fixed ``mu``.

        The parameter is folded into the coefficients; each monomial is an
        earlier monomial times one coordinate and ``repr`` keeps every
        coefficient exact.
        """
        n, h = self.spec.state_dim, float(h)
        mono = _monomial_exponents(n, self.spec.state_degree)
        index = {e: k for k, e in enumerate(mono)}
        coef = np.zeros((len(mono), n))
        mu_pw = float(mu) ** self._lib.pow if self.spec.param_dim else np.where(self._lib.pow == 0, 1.0, 0.0)
        rows = [index[tuple(int(c) for c in e)] for e in self._lib.exp]
        np.add.at(coef, rows, mu_pw[:, None] * self.xi)
        ys = [f"y{i}" for i in range(n)]
        src = [f"def f({', '.join(ys)}):", "    m0 = 1.0"]
        for k, e in enumerate(mono[1:], 1):
            v = next(i for i, c in enumerate(e) if c)
            parent = list(e)
            parent[v] -= 1
            src.append(f"    m{k} = m{index[tuple(parent)]} * y{v}")
        outs = []
        for j in range(n):
            terms = [f"{float(c)!r} * m{k}" for k, c in enumerate(coef[:, j]) if c != 0.0]
            outs.append(" + ".join(terms) if terms else "0.0")
        src.append(f"    return ({', '.join(outs)},)")
        hh, h6 = repr(0.5 * h), repr(h / 6.0)

        def call(stage, scale, prev):
            args = ys if prev is None else [f"y{i} + {scale} * {prev}{i}" for i in range(n)]
            return f"    {', '.join(f'{stage}{i}' for i in range(n))}, = f({', '.join(args)})"

        src += [f"def step({', '.join(ys)}):", call("a", None, None), call("b", hh, "a"),
                call("c", hh, "b"), call("d", repr(h), "c"),
                "    return (" + ", ".join(f"y{i} + {h6} * (a{i} + 2.0 * b{i} + 2.0 * c{i} + d{i})"
                                           for i in range(n)) + ",)"]
        scope = {"__builtins__": {}}
        exec("\n".join(src), scope)
        return scope

    def scalar_field(self, mu):
        """Right-hand side ``f(*z)`` on plain floats, returning a tuple."""
        return self._compiled(mu, 1.0)["f"]

    def integrate(self, z0, mu, grid: TimeGrid):
        """RK4 on ``grid`` with compiled scalar code; same contract as ``rk4_integrate``."""
        y = tuple(float(v) for v in np.asarray(z0, dtype=np.float64).ravel())
        if len(y) != self.spec.state_dim:
            raise InvalidInput(f"z0 has {len(y)} entries, model state_dim is {self.spec.state_dim}")
        if not all(isfinite(v) for v in y):
            raise InvalidInput("initial state is not finite")
        step = self._compiled(mu, grid.dt)["step"]
        out = [y]
        for i in range(1, grid.count):
            y = step(*y)
            if not all(isfinite(v) for v in y):
                raise DivergedTrajectory(f"non-finite state at step {i}", last_valid=i - 1,
                                         partial=np.array(out))
            out.append(y)
        return np.array(out)

    def to_dict(self):
        return {"spec": self.spec.to_dict(), "tau": self.tau, "notes": self.notes,
                "xi": self.xi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(LibrarySpec.from_dict(d["spec"]), np.array(d["xi"], dtype=np.float64),
                   float(d.get("tau", 0.0)), dict(d.get("notes", {})))


def simulate(model: SindyModel, z0, mu, grid: TimeGrid):
    z0 = np.asarray(z0, dtype=np.float64).ravel()
    if z0.size != model.spec.state_dim:
        raise InvalidInput(f"z0 has {z0.size} entries, model state_dim is {model.spec.state_dim}")
    return model.integrate(z0, mu, grid)


def equations_to_text(model: SindyModel, var="z", param="mu"):
    names = model.spec.term_names(var, param)
    lines = []
    for j in range(model.spec.state_dim):
        parts = []
        for name, c in zip(names, model.xi[:, j]):
            if c == 0.0:
                continue
            mag = f"{abs(c):.3f}" if name == "1" else f"{abs(c):.3f} {name}"
            if not parts:
                parts.append(("-" if c < 0 else "") + mag)
            else:
                parts.append(("- " if c < 0 else "+ ") + mag)
        lines.append(f"{var}{j}' = " + (" ".join(parts) if parts else "0"))
    return "\n".join(lines)
