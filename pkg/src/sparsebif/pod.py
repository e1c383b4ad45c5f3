"""Proper orthogonal decomposition: single level, nested (two level),
projection and per-field standardization."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import parallel
from .errors import InvalidInput
from .numkit import as_matrix, thin_svd


@dataclass(frozen=True)
class TruncationRule:
    mode: str = "energy_tol"
    delta: float | None = None
    rank: int | None = None

    def __post_init__(self):
        if self.mode == "energy_tol":
            if self.delta is None or not 0.0 < self.delta < 1.0 or self.rank is not None:
                raise InvalidInput("energy_tol rule needs delta in (0, 1) and no rank")
        elif self.mode == "fixed_rank":
            if self.rank is None or self.rank < 1 or self.delta is not None:
                raise InvalidInput("fixed_rank rule needs rank >= 1 and no delta")
        else:
            raise InvalidInput(f"unknown truncation mode {self.mode!r}")

    @classmethod
    def energy(cls, delta):
        return cls("energy_tol", delta=float(delta))

    @classmethod
    def fixed(cls, rank):
        return cls("fixed_rank", rank=int(rank))

    def to_dict(self):
        return {"mode": self.mode, "delta": self.delta, "rank": self.rank}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mode"], delta=d.get("delta"), rank=d.get("rank"))


@dataclass
class PodBasis:
    modes: np.ndarray
    singular_values: np.ndarray
    level: str = "single"
    local_ranks: list = field(default_factory=list)
    # name -> (first column, stop column) when modes were computed per field
    coeff_layout: dict = field(default_factory=dict)

    @property
    def n_h(self):
        return self.modes.shape[0]

    @property
    def rank(self):
        return self.modes.shape[1]

    def to_meta(self):
        return {
            "level": self.level,
            "rank": self.rank,
            "singular_values": [float(v) for v in self.singular_values],
            "local_ranks": [int(k) for k in self.local_ranks],
            "coeff_layout": {k: [int(a), int(b)] for k, (a, b) in self.coeff_layout.items()},
        }


def truncation_rank(s, delta):
    """Smallest N whose leading modes hold at least ``1 - delta`` of the energy."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0 or np.any(s < 0):
        raise InvalidInput("singular values must be nonnegative and nonempty")
    e = s * s
    total = e.sum()
    if total == 0:
        raise InvalidInput("all-zero singular value spectrum")
    ratio = np.cumsum(e) / total
    # 1e-12 slack so that an exact 1 - delta is accepted despite round-off
    return int(np.argmax(ratio >= (1.0 - delta) - 1e-12) + 1)


def _sign_fix(u):
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def pod(snapshots, rule: TruncationRule):
    """POD of a snapshot matrix whose columns are snapshots."""
    s_mat = np.asarray(snapshots, dtype=np.float64)
    if s_mat.ndim != 2 or s_mat.shape[1] == 0 or s_mat.shape[0] == 0:
        raise InvalidInput("pod needs at least one snapshot")
    s_mat = as_matrix(s_mat, "snapshots")
    u, s, _ = thin_svd(s_mat)
    if rule.mode == "fixed_rank":
        n = min(rule.rank, s.size)
    elif not np.any(s > 0):
        n = 1
    else:
        n = truncation_rank(s, rule.delta)
    return PodBasis(modes=_sign_fix(u[:, :n].copy()), singular_values=s, level="single")


def numerical_rank(s, shape):
    """Count of singular values above ``max(shape) * eps * s_max``."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > max(shape) * np.finfo(np.float64).eps * s[0]))


def _pod_in_range(s_mat, rule):
    # modes past the numerical rank are an arbitrary completion of the range,
    # not snapshot content; unweighted concatenation would give them full weight
    b = pod(s_mat, rule)
    n = max(1, min(b.rank, numerical_rank(b.singular_values, s_mat.shape)))
    return b.modes[:, :n], b.singular_values


def _nested_block(trajectories, local_rule, global_rule):
    def local(tr):
        return _pod_in_range(np.asarray(tr).T, local_rule)[0]

    with ThreadPoolExecutor(max_workers=parallel.workers()) as ex:
        locals_ = list(ex.map(local, trajectories))
    v_global = np.concatenate(locals_, axis=1)
    modes, sv = _pod_in_range(v_global, global_rule)
    return modes, sv, [m.shape[1] for m in locals_]


def nested_pod(source, local_rule: TruncationRule, global_rule: TruncationRule, layout=None):
    """Two-level POD.

    ``source`` is a SnapshotSet or a list of (time x N_h) trajectories. Each
    trajectory gets its own local POD; the concatenated local modes are
    compressed by a second, global POD. With ``layout`` (name -> slice of the
    state) the procedure runs per field and the result is block diagonal.
    """
    trajectories = getattr(source, "trajectories", source)
    trajectories = [np.asarray(t, dtype=np.float64) for t in trajectories]
    if not trajectories:
        raise InvalidInput("nested_pod needs at least one trajectory")
    n_h = trajectories[0].shape[1]
    if layout is None:
        modes, sv, ranks = _nested_block(trajectories, local_rule, global_rule)
        return PodBasis(modes=modes, singular_values=sv, level="nested", local_ranks=ranks,
                        coeff_layout={"all": (0, modes.shape[1])})
    blocks, svs, ranks, coeff_layout = [], [], [], {}
    col = 0
    for name, (a, b) in sorted(layout.items(), key=lambda kv: kv[1][0]):
        m, sv, r = _nested_block([t[:, a:b] for t in trajectories], local_rule, global_rule)
        full = np.zeros((n_h, m.shape[1]))
        full[a:b] = m
        blocks.append(full)
        svs.append(sv)
        ranks.extend(r)
        coeff_layout[name] = (col, col + m.shape[1])
        col += m.shape[1]
    return PodBasis(modes=np.concatenate(blocks, axis=1), singular_values=np.concatenate(svs),
                    level="nested", local_ranks=ranks, coeff_layout=coeff_layout)


def project(basis: PodBasis, x_rows):
    x = np.asarray(x_rows, dtype=np.float64)
    if x.shape[-1] != basis.n_h:
        raise InvalidInput(f"state width {x.shape[-1]} != basis N_h {basis.n_h}")
    return x @ basis.modes


def reconstruct(basis: PodBasis, coeffs):
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape[-1] != basis.rank:
        raise InvalidInput(f"coefficient width {c.shape[-1]} != basis rank {basis.rank}")
    return c @ basis.modes.T


@dataclass
class Scaler:
    """Column-wise centring with one pooled standard deviation per field group.

    Columns whose own standard deviation is at most ``1e-12`` are passed
    through untouched and flagged in ``constant``.
    """

    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray
    layout: dict

    def to_meta(self):
        return {"layout": {k: [int(a), int(b)] for k, (a, b) in self.layout.items()},
                "constant": [bool(c) for c in self.constant]}


def fit_scaler(coeffs, layout=None):
    c = as_matrix(coeffs, "coefficients")
    if c.shape[0] < 2:
        raise InvalidInput("scaler needs at least 2 samples")
    ncol = c.shape[1]
    layout = dict(layout) if layout else {"all": (0, ncol)}
    mean = c.mean(axis=0)
    std = c.std(axis=0)
    constant = std <= 1e-12
    scale = np.ones(ncol)
    for a, b in layout.values():
        live = ~constant[a:b]
        if np.any(live):
            pooled = np.sqrt(np.mean(std[a:b][live] ** 2))
            scale[a:b][live] = pooled
    mean = np.where(constant, 0.0, mean)
    return Scaler(mean=mean, scale=scale, constant=constant, layout=layout)


def apply_scaler(sc: Scaler, coeffs):
    return (np.asarray(coeffs, dtype=np.float64) - sc.mean) / sc.scale


def invert_scaler(sc: Scaler, scaled):
    return np.asarray(scaled, dtype=np.float64) * sc.scale + sc.mean
