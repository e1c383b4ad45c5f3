"""Command-line entry point: ``sparsebif <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numerical failure, 5 diverged prediction.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, datagen, rom, snapio
from .autoenc import TrainingFailure
from .config import load_config
from .errors import (ConfigError, DivergedTrajectory, FormatError, InvalidInput, NumericalFailure,
                     VersionError)
from .numkit import Rng
from .sindy import equations_to_text

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_DIVERGED = 0, 2, 3, 4, 5


class CliExit(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _err(msg):
    print(f"sparsebif: {msg}", file=sys.stderr)


def build_dataset(cfg):
    """Dataset described by the ``system`` and ``grid`` sections."""
    s = cfg.sections["system"]
    system = cfg.system()
    rng = Rng(s["seed"])
    try:
        lift_map = datagen.make_lift(s["n_h"], system.dim, rng.spawn(1)[0],
                                     nonlinear_gain=s["nonlinear_gain"],
                                     offset_norm=s["offset_norm"])
    except InvalidInput as exc:
        raise ConfigError(str(exc)) from exc
    stop = s["stop_tol"] if s["stop_tol"] > 0 else None
    ds = datagen.generate_dataset(system, cfg.params(), cfg.time_grid(), lift_map, rng,
                                  stop_tol=stop, amplitude=s["amplitude"],
                                  transverse_scale=s["transverse_scale"], layout=cfg.layout())
    return ds, lift_map


def cmd_generate(args):
    cfg = load_config(args.config)
    cfg.require("generate")
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliExit(EXIT_IO, f"{out} exists and is not empty (use --force)")
    ds, _ = build_dataset(cfg)
    snapio.save_dataset(ds, out)
    print(f"wrote {len(ds.params)} snapshot files to {out}")


def cmd_train(args):
    cfg = load_config(args.config)
    cfg.require("train")
    off = cfg.offline()
    ds = snapio.load_dataset(args.data_dir)

    def report(epoch, loss):
        if not args.quiet:
            print(f"{epoch},{loss:.17g}", flush=True)

    if not args.quiet:
        print("epoch,loss")
    _parent_dir(args.model_out)
    try:
        model = rom.offline_fit(ds, off, callback=report)
    except TrainingFailure as exc:
        ck = Path(str(args.model_out) + ".checkpoint.npz")
        c = exc.checkpoint
        np.savez(ck, encoder=c.encoder.flat, decoder=c.decoder.flat, xi=c.xi,
                 encoder_dims=np.array(c.encoder.dims), decoder_dims=np.array(c.decoder.dims))
        raise CliExit(EXIT_NUMERIC, f"training failed in term {exc.term!r}: {exc}; checkpoint {ck}")
    rom.save_model(model, args.model_out, external_basis=cfg.get("io", "external_basis"))
    print(f"# model written to {args.model_out}", file=sys.stderr)


def _x0_from_data(data_dir, mu, t0):
    ds = snapio.load_dataset(data_dir)
    m = int(np.argmin(np.abs(np.asarray(ds.params) - mu)))
    i = int(round((t0 - ds.grid.t0) / ds.grid.dt))
    if not 0 <= i < ds.grid.count:
        raise ConfigError(f"--t0 {t0} lies outside the data time grid")
    return ds.trajectories[m][i]


def _hull_warning(model, mu):
    hull = model.diagnostics.get("param_hull")
    if hull and not hull[0] <= mu <= hull[1]:
        _err(f"warning: mu={mu} lies outside the training range [{hull[0]}, {hull[1]}]")


def _parent_dir(path):
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)


def _write_latent(path, times, z):
    cols = [times] + [z[:, k] for k in range(z.shape[1])]
    analysis.write_csv(path, ["t"] + [f"z{k}" for k in range(z.shape[1])], cols)


def cmd_predict(args):
    model = rom.load_model(args.model)
    _hull_warning(model, args.mu)
    if args.x0 == "from-data":
        if not args.data:
            raise ConfigError("--x0 from-data needs --data")
        x0 = _x0_from_data(args.data, args.mu, args.t0)
    else:
        x0 = snapio.read_snap(args.x0).ravel()
    out = Path(args.out)
    _parent_dir(out)
    try:
        pred = rom.online_predict(model, x0, args.mu, args.t0, args.t_end, args.dt,
                                  return_latent=True)
    except DivergedTrajectory as exc:
        n = exc.last_valid + 1
        snapio.write_snap(str(out) + ".snap.partial", exc.partial)
        z = model.encode_state(exc.partial)
        _write_latent(str(out) + "_latent.csv.partial", args.t0 + args.dt * np.arange(n), z)
        raise CliExit(EXIT_DIVERGED, f"prediction diverged after {n} samples; partial output kept")
    snapio.write_snap(str(out) + ".snap", pred.states)
    _write_latent(str(out) + "_latent.csv", pred.times, pred.latent)
    print(f"wrote {out}.snap and {out}_latent.csv")


def _mu_grid(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ConfigError("--mu-grid expects start,stop,count")
    return np.linspace(parts[0], parts[1], int(parts[2])).tolist()


def cmd_diagram(args):
    spec = analysis.QoiSpec.parse(args.qoi)
    if args.model:
        model = rom.load_model(args.model)
        if not args.data:
            raise ConfigError("a model diagram needs --data for initial states")
        ds = snapio.load_dataset(args.data)
        params = _mu_grid(args.mu_grid) if args.mu_grid else list(ds.params)
        t0 = model.train_window[0] if args.t0 is None else args.t0
        i = int(round((t0 - ds.grid.t0) / ds.grid.dt))
        if not 0 <= i < ds.grid.count:
            raise ConfigError("--t0 lies outside the data time grid")
        p = np.asarray(ds.params)

        def start(mu):
            return ds.trajectories[int(np.argmin(np.abs(p - mu)))][i]

        for mu in params:
            _hull_warning(model, mu)
        t_end = args.t_end if args.t_end is not None else ds.grid.t_end
        dt = args.dt if args.dt is not None else model.resample_dt
        dia = analysis.bifurcation_diagram(model, spec, args.mode, params=params, x0=start,
                                           t0=t0, t_end=t_end, dt=dt, amp_window=args.amp_window)
    else:
        if not args.data:
            raise ConfigError("give --data (and optionally --model)")
        ds = snapio.load_dataset(args.data)
        dia = analysis.bifurcation_diagram(ds, spec, args.mode, amp_window=args.amp_window)
    _parent_dir(args.out)
    text = dia.to_csv(args.out)
    if args.out is None:
        sys.stdout.write(text)


def cmd_spectrum(args):
    ds = snapio.load_dataset(args.data)
    spec = analysis.QoiSpec.parse(args.signal)
    if not 0 <= args.index < len(ds.params):
        raise ConfigError(f"--index must lie in [0, {len(ds.params)})")
    traj = ds.trajectories[args.index][: ds.last_valid_index(args.index) + 1]
    i0 = int(round((args.t_start - ds.grid.t0) / ds.grid.dt)) if args.t_start is not None else 0
    if not 0 <= i0 < traj.shape[0] - 4:
        raise ConfigError("--t-start leaves fewer than 4 samples")
    sig = analysis.qoi(traj[i0:], spec, ds.field_layout)
    sp = analysis.psd(sig, ds.grid.dt, detrend=args.detrend)
    _parent_dir(args.out)
    text = sp.to_csv(args.out)
    f, pw = sp.peak()
    print(f"# peak frequency {f:.17g} power {pw:.17g}", file=sys.stderr)
    if args.out is None:
        sys.stdout.write(text)


def cmd_equations(args):
    model = rom.load_model(args.model)
    print(equations_to_text(model.latent_model))


def make_parser():
    p = argparse.ArgumentParser(prog="sparsebif", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a synthetic dataset")
    g.add_argument("config")
    g.add_argument("out_dir")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a reduced model; prints 'epoch,loss' lines")
    t.add_argument("config")
    t.add_argument("data_dir")
    t.add_argument("model_out")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="online prediction; writes OUT.snap and OUT_latent.csv "
                                       "(columns t,z0,z1,...)")
    r.add_argument("model")
    r.add_argument("--mu", type=float, required=True)
    r.add_argument("--t0", type=float, required=True)
    r.add_argument("--t-end", type=float, required=True)
    r.add_argument("--dt", type=float, required=True)
    r.add_argument("--x0", required=True, help="SnapFile holding x0, or 'from-data'")
    r.add_argument("--data", help="dataset directory for --x0 from-data")
    r.add_argument("--out", required=True, help="output prefix")
    r.set_defaults(func=cmd_predict)

    d = sub.add_parser("diagram", help="bifurcation diagram CSV with columns mu,value,label")
    d.add_argument("--model")
    d.add_argument("--data")
    d.add_argument("--qoi", default="field_l2norm:u2",
                   help="point_value:FIELD:INDEX, field_l2norm:FIELD or kinetic_energy")
    d.add_argument("--mode", choices=["final_value", "amplitude"], default="final_value")
    d.add_argument("--mu-grid", help="start,stop,count (model only; default: data params)")
    d.add_argument("--t0", type=float)
    d.add_argument("--t-end", type=float)
    d.add_argument("--dt", type=float)
    d.add_argument("--amp-window", type=float, default=0.25, help="trailing fraction")
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagram)

    s = sub.add_parser("spectrum", help="PSD CSV with columns frequency,power")
    s.add_argument("data")
    s.add_argument("--signal", default="kinetic_energy", help="QoI spec, as for diagram")
    s.add_argument("--index", type=int, default=0, help="trajectory index")
    s.add_argument("--t-start", type=float)
    s.add_argument("--detrend", action="store_true", help="subtract the mean first")
    s.add_argument("--out")
    s.set_defaults(func=cmd_spectrum)

    e = sub.add_parser("equations", help="print the identified latent equations")
    e.add_argument("model")
    e.set_defaults(func=cmd_equations)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        args.func(args)
    except CliExit as exc:
        _err(str(exc))
        return exc.code
    except (ConfigError, InvalidInput) as exc:
        _err(f"configuration error: {exc}")
        return EXIT_CONFIG
    except (FormatError, VersionError, OSError) as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO
    except DivergedTrajectory as exc:
        _err(f"diverged: {exc}")
        return EXIT_DIVERGED
    except NumericalFailure as exc:
        _err(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
