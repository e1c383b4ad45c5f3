"""Offline fit and online prediction of the nested-POD + autoencoder + SINDy
reduced model, plus model persistence.

Offline: window -> nested POD -> project -> scale -> spline resample ->
central differences -> per-trajectory time split -> joint training ->
separate (ensembled) SINDy refit on the encoded training rows.

Online: ``z0 = encode(scale(V^T x0))``, RK4 on ``zdot = Theta(z; mu) Xi``,
then ``x_i = V unscale(decode(z_i))``.
"""
from __future__ import annotations

import base64
import copy
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autoenc, pod
from .autoenc import LossWeights, Mlp, TrainConfig
from .errors import ConfigError, DivergedTrajectory, FormatError, InvalidInput, VersionError
from .numkit import TimeGrid, central_diff, natural_cubic_spline
from .pod import PodBasis, Scaler, TruncationRule
from .sindy import EnsembleConfig, Library, LibrarySpec, SindyModel, ensemble_stlsq

FORMAT_TAG = "sparsebif-rom-v1"
FORMAT_FAMILY = "sparsebif-rom"


@dataclass
class OfflineConfig:
    """Everything the offline phase needs.

    ``enc_hidden`` / ``dec_hidden`` are the hidden-layer widths; the input
    and output widths follow from the POD rank and ``latent_dim``.
    """

    local_rule: TruncationRule = field(default_factory=lambda: TruncationRule.energy(1e-6))
    global_rule: TruncationRule = field(default_factory=lambda: TruncationRule.energy(1e-5))
    per_field: bool = False
    time_window: tuple | None = None
    resample_dt: float = 0.1
    train_fraction: float = 0.9
    latent_dim: int = 2
    enc_hidden: tuple = (32, 8, 4)
    dec_hidden: tuple = (4, 8, 32)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    state_degree: int = 2
    param_degree: int = 2
    include_bias: bool = True
    tau: float = 0.01
    ridge: float = 1e-10
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if not self.resample_dt > 0:
            raise ConfigError("resample_dt must be positive")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be at least 1")
        if self.time_window is not None:
            a, b = self.time_window
            if not b > a:
                raise ConfigError("time_window must satisfy start < end")

    def library_spec(self, param_dim=1):
        return LibrarySpec(self.latent_dim, param_dim, self.state_degree,
                           self.param_degree if param_dim else 0, self.include_bias)

    def to_dict(self):
        return {
            "local_rule": self.local_rule.to_dict(),
            "global_rule": self.global_rule.to_dict(),
            "per_field": self.per_field,
            "time_window": list(self.time_window) if self.time_window else None,
            "resample_dt": self.resample_dt,
            "train_fraction": self.train_fraction,
            "latent_dim": self.latent_dim,
            "enc_hidden": list(self.enc_hidden),
            "dec_hidden": list(self.dec_hidden),
            "weights": self.weights.to_dict(),
            "train": self.train.to_dict(),
            "state_degree": self.state_degree,
            "param_degree": self.param_degree,
            "include_bias": self.include_bias,
            "tau": self.tau,
            "ridge": self.ridge,
            "ensemble": self.ensemble.to_dict(),
        }


@dataclass
class RomModel:
    pod_basis: PodBasis
    scaler: Scaler
    encoder: Mlp
    decoder: Mlp
    latent_model: SindyModel
    train_window: tuple
    split: float
    resample_dt: float
    field_layout: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        n_pod = self.pod_basis.rank
        n = self.latent_model.spec.state_dim
        if (self.encoder.dims[0] != n_pod or self.decoder.dims[-1] != n_pod
                or self.encoder.dims[-1] != n or self.decoder.dims[0] != n
                or self.scaler.mean.size != n_pod):
            raise ConfigError(
                f"dimension chain broken: N_pod={n_pod}, encoder {self.encoder.dims}, "
                f"decoder {self.decoder.dims}, latent {n}, scaler {self.scaler.mean.size}"
            )

    @property
    def n_h(self):
        return self.pod_basis.n_h

    @property
    def latent_dim(self):
        return self.latent_model.spec.state_dim

    def to_coeffs(self, x):
        return pod.apply_scaler(self.scaler, pod.project(self.pod_basis, x))

    def from_coeffs(self, c):
        return pod.reconstruct(self.pod_basis, pod.invert_scaler(self.scaler, c))

    def encode_state(self, x):
        return autoenc.encode(self.encoder, self.to_coeffs(np.atleast_2d(x)))

    def decode_state(self, z):
        return self.from_coeffs(autoenc.decode(self.decoder, np.atleast_2d(z)))


@dataclass
class PreparedData:
    """Scaled, resampled POD coefficients with derivatives, one block per parameter."""

    times: np.ndarray
    coeffs: list
    derivs: list
    params: list
    t_split: float

    def rows(self, part="train"):
        x, xd, mu = [], [], []
        mask = self.train_mask() if part == "train" else ~self.train_mask()
        for c, d, p in zip(self.coeffs, self.derivs, self.params):
            x.append(c[mask])
            xd.append(d[mask])
            mu.append(np.full(int(mask.sum()), p))
        return np.concatenate(x), np.concatenate(xd), np.concatenate(mu)

    def train_mask(self):
        return self.times <= self.t_split + 1e-9 * max(1.0, abs(self.t_split))


def _window_mask(times, window):
    if window is None:
        return np.ones(times.size, dtype=bool)
    a, b = window
    slack = 1e-9 * max(1.0, abs(a), abs(b))
    return (times >= a - slack) & (times <= b + slack)


def _window_trajectories(dataset, window):
    times = dataset.grid.times()
    mask = _window_mask(times, window)
    if mask.sum() < 3:
        raise ConfigError("time window keeps fewer than 3 samples")
    idx = np.flatnonzero(mask)
    if np.any(np.diff(idx) != 1):
        raise ConfigError("time window must be contiguous")
    return times[idx], [tr[idx] for tr in dataset.trajectories]


def _prepare(dataset, basis, scaler, window, resample_dt, train_fraction, fit_scaler_layout=None):
    times, trajs = _window_trajectories(dataset, window)
    a, b = times[0], times[-1]
    t_split = a + train_fraction * (b - a)
    raw = [pod.project(basis, tr) for tr in trajs]
    if scaler is None:
        keep = times <= t_split + 1e-9 * max(1.0, abs(t_split))
        scaler = pod.fit_scaler(np.concatenate([c[keep] for c in raw]), fit_scaler_layout)
    knots = TimeGrid(float(a), float(dataset.grid.dt), times.size)
    n_new = int(np.floor((b - a) / resample_dt + 1e-9)) + 1
    if n_new < 3:
        raise ConfigError("resample_dt leaves fewer than 3 samples in the window")
    new_t = a + resample_dt * np.arange(n_new)
    coeffs, derivs = [], []
    for c in raw:
        sp = natural_cubic_spline(knots, pod.apply_scaler(scaler, c))
        rs = sp(new_t)
        coeffs.append(rs)
        derivs.append(central_diff(rs, resample_dt))
    data = PreparedData(new_t, coeffs, derivs, list(dataset.params), float(t_split))
    return data, scaler


def _latent_targets(encoder, x, xdot):
    z, zdot, _ = autoenc.forward_tangent(encoder, x, xdot)
    return z, zdot


def offline_fit(dataset, cfg: OfflineConfig, callback=None):
    """Fit a :class:`RomModel` to a SnapshotSet."""
    if cfg.time_window is not None:
        lo, hi = dataset.grid.t0, dataset.grid.t_end
        a, b = cfg.time_window
        if a < lo - 1e-9 or b > hi + 1e-9:
            raise ConfigError(f"time_window {cfg.time_window} not inside data window [{lo}, {hi}]")
    if cfg.enc_hidden and cfg.dec_hidden and len(cfg.enc_hidden) != len(cfg.dec_hidden):
        warnings.warn("encoder and decoder have different depths", stacklevel=2)
    layout = dataset.field_layout if cfg.per_field else None
    _, trajs = _window_trajectories(dataset, cfg.time_window)
    basis = pod.nested_pod(trajs, cfg.local_rule, cfg.global_rule, layout)
    n_pod = basis.rank
    data, scaler = _prepare(dataset, basis, None, cfg.time_window, cfg.resample_dt,
                            cfg.train_fraction, basis.coeff_layout)
    x, xdot, mu = data.rows("train")
    spec = cfg.library_spec()
    enc_dims = [n_pod, *cfg.enc_hidden, cfg.latent_dim]
    dec_dims = [cfg.latent_dim, *cfg.dec_hidden, n_pod]
    res = autoenc.train((x, xdot, mu), enc_dims, dec_dims, spec, cfg.weights, cfg.train,
                        callback=callback)
    joint_model = SindyModel(spec, res.xi, 0.0, {"source": "joint training"})
    z, zdot = _latent_targets(res.encoder, x, xdot)
    xi = _fit_latent(z, zdot, mu, spec, cfg.tau, cfg.ridge, cfg.ensemble)
    latent = SindyModel(spec, xi, cfg.tau, {"source": "ensemble STLSQ refit"})
    recon = autoenc.decode(res.decoder, z)
    diagnostics = {
        "ae_rel_error": float(np.linalg.norm(recon - x) / max(np.linalg.norm(x), 1e-300)),
        "loss_history": [float(v) for v in res.history],
        "residual_rms_joint": _residual_rms(joint_model, z, zdot, mu),
        "residual_rms_refit": _residual_rms(latent, z, zdot, mu),
        "adam_steps": res.steps,
        "n_train_rows": int(x.shape[0]),
        "param_hull": [float(min(dataset.params)), float(max(dataset.params))],
    }
    provenance = {
        "dataset_sha256": dataset.digest(),
        "dataset_metadata": _jsonable(dataset.metadata),
        "seeds": {"ae": cfg.train.seed, "ensemble": cfg.ensemble.seed},
        "config": cfg.to_dict(),
    }
    t0 = float(data.times[0])
    return RomModel(basis, scaler, res.encoder, res.decoder, latent, (t0, data.t_split),
                    cfg.train_fraction, cfg.resample_dt, dict(dataset.field_layout), provenance,
                    diagnostics)


def _fit_latent(z, zdot, mu, spec, tau, ridge, ens):
    theta = Library(spec).evaluate(z, mu)
    return ensemble_stlsq(theta, zdot, tau, ridge, ens)


def _residual_rms(model, z, zdot, mu):
    r = zdot - model.rhs_matrix(z, mu)
    return float(np.sqrt(np.mean(r * r)))


def prepare_for_model(model: RomModel, dataset, window="train"):
    """Re-run the data preparation of the offline phase with a fitted model's
    basis and scaler."""
    win = model.provenance.get("config", {}).get("time_window")
    win = tuple(win) if win else None
    return _prepare(dataset, model.pod_basis, model.scaler, win, model.resample_dt, model.split)[0]


def refit_latent_sindy(model: RomModel, dataset, spec: LibrarySpec | None = None, tau=None,
                       cfg: EnsembleConfig | None = None, ridge=None):
    """Replace the latent SINDy model by a new ensemble fit on the frozen encoder."""
    conf = model.provenance.get("config", {})
    spec = spec or model.latent_model.spec
    if spec.state_dim != model.latent_dim:
        raise ConfigError("library state_dim must equal the latent dimension")
    tau = model.latent_model.tau if tau is None else tau
    ridge = conf.get("ridge", 1e-10) if ridge is None else ridge
    if cfg is None:
        cfg = EnsembleConfig(**conf["ensemble"]) if "ensemble" in conf else EnsembleConfig()
    data = prepare_for_model(model, dataset)
    x, xdot, mu = data.rows("train")
    z, zdot = _latent_targets(model.encoder, x, xdot)
    xi = ensemble_stlsq(Library(spec).evaluate(z, mu), zdot, tau, ridge, cfg)
    new = copy.copy(model)
    new.latent_model = SindyModel(spec, xi, tau, {"source": "ensemble STLSQ refit"})
    new.diagnostics = dict(model.diagnostics)
    new.diagnostics["residual_rms_refit"] = _residual_rms(new.latent_model, z, zdot, mu)
    new.provenance = copy.deepcopy(model.provenance)
    new.provenance.setdefault("refits", []).append(
        {"spec": spec.to_dict(), "tau": tau, "ensemble": cfg.to_dict()})
    return new


@dataclass
class Prediction:
    times: np.ndarray
    latent: np.ndarray
    states: np.ndarray


def online_predict(model: RomModel, x0, mu, t0, t_end, dt, return_latent=False):
    """Full-order trajectory from ``x0`` at parameter ``mu`` on ``[t0, t_end]``.

    On divergence, :class:`DivergedTrajectory` carries the decoded rows up
    to the last finite latent state in ``partial``.
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    if x0.size != model.n_h:
        raise InvalidInput(f"x0 has {x0.size} entries, model expects N_h={model.n_h}")
    if not t_end > t0:
        raise InvalidInput("t_end must exceed t0")
    grid = TimeGrid.span(t0, t_end, dt)
    z0 = model.encode_state(x0)[0]
    try:
        z = model.latent_model.integrate(z0, mu, grid)
    except DivergedTrajectory as exc:
        part = model.decode_state(exc.partial)
        raise DivergedTrajectory(str(exc), exc.last_valid, part) from exc
    states = model.decode_state(z)
    if return_latent:
        return Prediction(grid.times(), z, states)
    return states


# ----------------------------------------------------------------------------
# persistence


def _pack(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d, name):
    try:
        raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
        shape = tuple(int(s) for s in d["shape"])
    except (KeyError, ValueError, TypeError, AttributeError) as exc:
        raise FormatError(f"array {name!r} is malformed: {exc}") from exc
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"array {name!r} has {len(raw)} bytes for shape {shape}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def model_to_document(model: RomModel, basis_ref=None):
    arrays = {
        "pod_singular_values": _pack(model.pod_basis.singular_values),
        "scaler_mean": _pack(model.scaler.mean),
        "scaler_scale": _pack(model.scaler.scale),
        "encoder": _pack(model.encoder.flat),
        "decoder": _pack(model.decoder.flat),
        "xi": _pack(model.latent_model.xi),
    }
    if basis_ref is None:
        arrays["pod_modes"] = _pack(model.pod_basis.modes)
    return {
        "format": FORMAT_TAG,
        "pod": {**model.pod_basis.to_meta(), "external": basis_ref},
        "scaler": model.scaler.to_meta(),
        "encoder": {"layer_dims": model.encoder.dims, "activation": "elu-hidden/linear-output"},
        "decoder": {"layer_dims": model.decoder.dims, "activation": "elu-hidden/linear-output"},
        "latent_model": {"spec": model.latent_model.spec.to_dict(), "tau": model.latent_model.tau,
                         "notes": _jsonable(model.latent_model.notes)},
        "train_window": list(model.train_window),
        "split": model.split,
        "resample_dt": model.resample_dt,
        "field_layout": {k: [int(a), int(b)] for k, (a, b) in model.field_layout.items()},
        "provenance": _jsonable(model.provenance),
        "diagnostics": _jsonable(model.diagnostics),
        "arrays": arrays,
    }


def model_from_document(doc, base_dir=None):
    if not isinstance(doc, dict) or not str(doc.get("format", "")).startswith(FORMAT_FAMILY):
        raise FormatError("not a sparsebif model file (bad magic/format tag)", 0)
    if doc["format"] != FORMAT_TAG:
        raise VersionError(f"model format {doc['format']!r}, this build reads {FORMAT_TAG!r}")
    try:
        arr = doc["arrays"]
        pmeta = doc["pod"]
        if pmeta.get("external"):
            from .snapio import read_snap

            ref = pmeta["external"]
            path = Path(base_dir or ".") / ref["path"]
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest != ref["sha256"]:
                raise FormatError(f"external basis {path} hash mismatch")
            modes = read_snap(path)
        else:
            modes = _unpack(arr["pod_modes"], "pod_modes")
        basis = PodBasis(modes, _unpack(arr["pod_singular_values"], "pod_singular_values"),
                         pmeta["level"], list(pmeta["local_ranks"]),
                         {k: tuple(v) for k, v in pmeta["coeff_layout"].items()})
        smeta = doc["scaler"]
        scaler = Scaler(_unpack(arr["scaler_mean"], "scaler_mean"),
                        _unpack(arr["scaler_scale"], "scaler_scale"),
                        np.array(smeta["constant"], dtype=bool),
                        {k: tuple(v) for k, v in smeta["layout"].items()})
        enc = Mlp(doc["encoder"]["layer_dims"], _unpack(arr["encoder"], "encoder").copy())
        dec = Mlp(doc["decoder"]["layer_dims"], _unpack(arr["decoder"], "decoder").copy())
        lm = doc["latent_model"]
        latent = SindyModel(LibrarySpec.from_dict(lm["spec"]), _unpack(arr["xi"], "xi"),
                            float(lm["tau"]), dict(lm.get("notes", {})))
        return RomModel(basis, scaler, enc, dec, latent, tuple(doc["train_window"]),
                        float(doc["split"]), float(doc["resample_dt"]),
                        {k: tuple(v) for k, v in doc["field_layout"].items()},
                        doc.get("provenance", {}), doc.get("diagnostics", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (FormatError, VersionError)):
            raise
        raise FormatError(f"model document is incomplete: {exc!r}") from exc


def save_model(model: RomModel, path, external_basis=False):
    path = Path(path)
    ref = None
    if external_basis:
        from .snapio import write_snap

        bpath = path.with_name(path.stem + ".basis.snap")
        write_snap(bpath, model.pod_basis.modes)
        ref = {"path": bpath.name, "sha256": hashlib.sha256(bpath.read_bytes()).hexdigest()}
    text = json.dumps(model_to_document(model, ref), indent=1, sort_keys=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_model(path):
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("model file is not UTF-8", exc.start) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model file is not valid JSON: {exc.msg}",
                          len(text[: exc.pos].encode("utf-8"))) from exc
    return model_from_document(doc, path.parent)
