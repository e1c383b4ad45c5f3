"""Run configuration files.

Grammar: one ``section.key = value`` per line, ``#`` starts a comment,
values are numbers, ``true``/``false``, double-quoted strings or arrays of
numbers in brackets. This is a subset of TOML, so the file is read with a
TOML parser. Sections: system, grid, pod, ae, sindy, analysis, io.
Unknown sections or keys are rejected.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .autoenc import LossWeights, TrainConfig
from .datagen import FomSystem, default_layout
from .errors import ConfigError, InvalidInput
from .numkit import TimeGrid
from .pod import TruncationRule
from .rom import OfflineConfig
from .sindy import EnsembleConfig

# section -> key -> (type, default); a default of REQUIRED must be given
REQUIRED = object()
_NUM = (int, float)
SCHEMA = {
    "system": {
        "kind": (str, REQUIRED),
        "mu_star": (_NUM, 0.96),
        "omega": (_NUM, 1.0),
        "transverse_dims": (int, 3),
        "transverse_rate": (_NUM, 10.0),
        "n_h": (int, 200),
        "nonlinear_gain": (_NUM, 0.0),
        "offset_norm": (_NUM, 0.0),
        "seed": (int, 0),
        "amplitude": (_NUM, 0.01),
        "transverse_scale": (_NUM, 0.1),
        "stop_tol": (_NUM, 0.0),
        "layout": (str, "u1,u2,p"),
        "layout_bounds": (list, None),
    },
    "grid": {
        "t0": (_NUM, 0.0),
        "dt": (_NUM, REQUIRED),
        "t_end": (_NUM, REQUIRED),
        "mu": (list, None),
        "mu_min": (_NUM, None),
        "mu_max": (_NUM, None),
        "mu_count": (int, None),
        "window_start": (_NUM, None),
        "window_end": (_NUM, None),
        "resample_dt": (_NUM, 0.1),
        "train_fraction": (_NUM, 0.9),
    },
    "pod": {
        "local_mode": (str, "energy"),
        "local_delta": (_NUM, 1e-6),
        "local_rank": (int, 100),
        "global_mode": (str, "energy"),
        "global_delta": (_NUM, 1e-5),
        "global_rank": (int, 32),
        "per_field": (bool, False),
    },
    "ae": {
        "latent_dim": (int, 2),
        "enc_hidden": (list, [32, 8, 4]),
        "dec_hidden": (list, [4, 8, 32]),
        "epochs": (int, 100),
        "learning_rate": (_NUM, 1e-3),
        "batch_size": (int, 64),
        "seed": (int, 0),
        "shuffle": (bool, True),
        "lambda1": (_NUM, 0.0),
        "lambda2": (_NUM, 0.0),
        "lambda3": (_NUM, 0.0),
    },
    "sindy": {
        "state_degree": (int, 2),
        "param_degree": (int, 2),
        "include_bias": (bool, True),
        "tau": (_NUM, 0.01),
        "ridge": (_NUM, 1e-10),
        "n_models": (int, 20),
        "sample_fraction": (_NUM, 0.8),
        "library_drop_count": (int, 0),
        "aggregation": (str, "median"),
        "seed": (int, 0),
        "replace": (bool, False),
    },
    "analysis": {
        "qoi": (str, "field_l2norm:u2"),
        "mode": (str, "final_value"),
        "amp_window": (_NUM, 0.25),
        "t_end": (_NUM, None),
        "dt": (_NUM, None),
        "floor": (_NUM, 1e-6),
    },
    "io": {
        "external_basis": (bool, False),
    },
}

COMMAND_REQUIRED = {
    "generate": ("system", "grid"),
    "train": ("pod", "ae", "sindy"),
}


def _check_type(section, key, value, typ):
    if typ is list:
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{section}.{key} must be an array of numbers")
        return [float(v) if isinstance(v, float) else v for v in value]
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false")
        return value
    if isinstance(value, bool) or not isinstance(value, typ):
        raise ConfigError(f"{section}.{key} has the wrong type ({type(value).__name__})")
    if typ is _NUM:
        return float(value)
    return value


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)
    present: set = field(default_factory=set)

    def get(self, section, key):
        return self.sections[section][key]

    def require(self, command):
        for section in COMMAND_REQUIRED.get(command, ()):
            for key, (_, default) in SCHEMA[section].items():
                if default is REQUIRED and (section, key) not in self.present:
                    raise ConfigError(f"missing required key {section}.{key} for {command}")

    # builders -------------------------------------------------------------

    def system(self):
        s = self.sections["system"]
        try:
            return FomSystem(s["kind"], mu_star=s["mu_star"], omega=s["omega"],
                             transverse_dims=s["transverse_dims"],
                             transverse_rate=s["transverse_rate"])
        except InvalidInput as exc:
            raise ConfigError(str(exc)) from exc

    def layout(self):
        s = self.sections["system"]
        names = [n.strip() for n in s["layout"].split(",") if n.strip()]
        n_h = s["n_h"]
        if s["layout_bounds"] is None:
            if names == ["u1", "u2", "p"]:
                return default_layout(n_h)
            raise ConfigError("system.layout_bounds is needed for a custom layout")
        b = [int(v) for v in s["layout_bounds"]]
        if len(b) != len(names) + 1 or b[0] != 0 or b[-1] != n_h or any(
                x >= y for x, y in zip(b, b[1:])):
            raise ConfigError("system.layout_bounds must increase from 0 to n_h, one more entry than names")
        return {n: (b[i], b[i + 1]) for i, n in enumerate(names)}

    def time_grid(self):
        g = self.sections["grid"]
        try:
            return TimeGrid.span(g["t0"], g["t_end"], g["dt"])
        except InvalidInput as exc:
            raise ConfigError(str(exc)) from exc

    def params(self):
        g = self.sections["grid"]
        if g["mu"] is not None:
            mu = [float(v) for v in g["mu"]]
        elif None not in (g["mu_min"], g["mu_max"], g["mu_count"]):
            mu = np.linspace(g["mu_min"], g["mu_max"], g["mu_count"]).tolist()
        else:
            raise ConfigError("give grid.mu or grid.mu_min, grid.mu_max and grid.mu_count")
        if not mu or np.any(np.diff(mu) <= 0):
            raise ConfigError("parameter values must be nonempty and strictly increasing")
        return mu

    def window(self):
        g = self.sections["grid"]
        if g["window_start"] is None and g["window_end"] is None:
            return None
        a = g["window_start"] if g["window_start"] is not None else g["t0"]
        b = g["window_end"] if g["window_end"] is not None else g["t_end"]
        return (a, b)

    def offline(self):
        p, a, s, g = (self.sections[k] for k in ("pod", "ae", "sindy", "grid"))

        def rule(prefix):
            mode = p[f"{prefix}_mode"]
            if mode == "energy":
                return TruncationRule.energy(p[f"{prefix}_delta"])
            if mode == "fixed":
                return TruncationRule.fixed(p[f"{prefix}_rank"])
            raise ConfigError(f"pod.{prefix}_mode must be 'energy' or 'fixed'")

        try:
            return OfflineConfig(
                local_rule=rule("local"),
                global_rule=rule("global"),
                per_field=p["per_field"],
                time_window=self.window(),
                resample_dt=g["resample_dt"],
                train_fraction=g["train_fraction"],
                latent_dim=a["latent_dim"],
                enc_hidden=tuple(int(v) for v in a["enc_hidden"]),
                dec_hidden=tuple(int(v) for v in a["dec_hidden"]),
                weights=LossWeights(a["lambda1"], a["lambda2"], a["lambda3"]),
                train=TrainConfig(a["epochs"], a["learning_rate"], a["batch_size"], a["seed"],
                                  a["shuffle"]),
                state_degree=s["state_degree"],
                param_degree=s["param_degree"],
                include_bias=s["include_bias"],
                tau=s["tau"],
                ridge=s["ridge"],
                ensemble=EnsembleConfig(s["n_models"], s["sample_fraction"],
                                        s["library_drop_count"], s["aggregation"], s["seed"],
                                        s["replace"]),
            )
        except InvalidInput as exc:
            raise ConfigError(str(exc)) from exc


def parse_config(text):
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    sections = {name: {k: v[1] for k, v in keys.items()} for name, keys in SCHEMA.items()}
    present = set()
    for section, body in doc.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{section} must hold keys, write {section}.key = value")
        for key, value in body.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            typ = SCHEMA[section][key][0]
            sections[section][key] = _check_type(section, key, value, typ)
            present.add((section, key))
    return RunConfig(sections, present)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
