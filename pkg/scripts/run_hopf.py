"""Hopf experiment: train on the preset grid, then compare ROM and FOM energy
amplitudes over the training window and a 20% extension beyond it.

    python3 scripts/run_hopf.py [--config presets/hopf.cfg] [--out results/hopf]
"""
import argparse
import time
from pathlib import Path

import numpy as np

from sparsebif import analysis, cli, datagen, rom
from sparsebif.config import load_config
from sparsebif.errors import DivergedTrajectory
from sparsebif.numkit import TimeGrid
from sparsebif.sindy import equations_to_text

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "presets" / "hopf.cfg"))
    ap.add_argument("--out", default="results/hopf")
    ap.add_argument("--extend", type=float, default=0.2, help="extension as a fraction of the window")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t = time.perf_counter()
    cfg = load_config(args.config)
    ds, lm = cli.build_dataset(cfg)
    system = cfg.system()
    model = rom.offline_fit(ds, cfg.offline())
    rom.save_model(model, out / "model.json")
    print(f"offline fit {time.perf_counter() - t:.0f} s, N_pod={model.pod_basis.rank}")
    print(equations_to_text(model.latent_model))

    spec = analysis.QoiSpec.parse(cfg.get("analysis", "qoi"))
    params = np.asarray(ds.params)
    w0, w1 = model.train_window
    t_ext = w1 + args.extend * (w1 - w0)
    dt = ds.grid.dt
    i0, i1, n = int(round(w0 / dt)), int(round(w1 / dt)), int(round(t_ext / dt)) + 1
    rows = []
    for i, mu in enumerate(params):
        tr, _ = datagen.simulate_fom(system, mu, TimeGrid(0.0, dt, n), datagen.unlift(ds.trajectories[i][0], lm))
        e = analysis.qoi(datagen.lift(tr, lm), spec, ds.field_layout)
        row = [analysis.amplitude(e[:i1 + 1], 0.25), analysis.amplitude(e[i1:])]
        try:
            pred = rom.online_predict(model, ds.trajectories[i][i0], mu, w0, t_ext, dt)
            e = analysis.qoi(pred, spec, ds.field_layout)
            row += [analysis.amplitude(e[:i1 - i0 + 1], 0.25), analysis.amplitude(e[i1 - i0:])]
        except DivergedTrajectory:
            row += [np.nan, np.nan]
        rows.append(row)
        print(f"mu={mu:.4f} window fom={row[0]:.5g} rom={row[2]:.5g}  extension fom={row[1]:.5g} rom={row[3]:.5g}")
    a = np.asarray(rows)
    analysis.Diagram(params, a[:, 0]).to_csv(out / "diagram_fom.csv")
    analysis.Diagram(params, a[:, 2]).to_csv(out / "diagram_rom.csv")
    floor = 0.01 * np.nanmax(a[:, 0])
    onset = analysis.locate_onset(analysis.Diagram(params, a[:, 2]), floor=floor)
    print(f"ROM onset {onset} (mu*={system.mu_star}, grid spacing {params[1] - params[0]:.4f})")
    print(f"total {time.perf_counter() - t:.0f} s; results in {out}")


if __name__ == "__main__":
    main()
