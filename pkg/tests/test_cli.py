import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsebif import cli, config, pod, rom, snapio
from sparsebif.autoenc import Mlp
from sparsebif.errors import ConfigError, FormatError, VersionError
from sparsebif.numkit import Rng
from sparsebif.sindy import LibrarySpec, SindyModel

PRESETS = Path(__file__).resolve().parents[1] / "presets"

TINY = """
system.kind = "pitchfork"
system.transverse_dims = 1
system.transverse_rate = 0.5
system.n_h = 30
system.nonlinear_gain = 0.1
system.seed = 3
system.transverse_scale = 0.3

grid.dt = 0.2
grid.t_end = 20.0
grid.mu_min = 0.8
grid.mu_max = 1.0
grid.mu_count = 4
grid.resample_dt = 0.4

ae.enc_hidden = [8]
ae.dec_hidden = [8]
ae.epochs = 1
ae.learning_rate = 1e-3
ae.lambda1 = 1e-10
ae.lambda2 = 1e-6

sindy.n_models = 3
"""

HOPF_TINY = """
system.kind = "hopf"
system.mu_star = 1.0
system.transverse_dims = 1
system.n_h = 20
system.seed = 1
system.layout = "u,p"
system.layout_bounds = [0, 16, 20]
grid.dt = 0.05
grid.t_end = 100.0
grid.mu = [1.25]
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture()
def tiny_data(tmp_path, tiny_cfg):
    out = tmp_path / "data"
    assert cli.main(["generate", str(tiny_cfg), str(out)]) == 0
    return out


# SnapFile ------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_snap_roundtrip(rows, cols, seed):
    a = Rng(seed).normal((rows, cols))
    assert np.array_equal(snapio.decode_snap(snapio.encode_snap(a)), a)


def test_snap_header_layout():
    raw = snapio.encode_snap(np.arange(6.0).reshape(2, 3))
    assert raw[:4] == b"SBIF" and len(raw) == 4 + 4 + 8 + 8 + 48 + 4
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:16], "little") == 2 and int.from_bytes(raw[16:24], "little") == 3


def test_snap_errors():
    raw = bytearray(snapio.encode_snap(np.ones((3, 2))))
    with pytest.raises(FormatError):
        snapio.decode_snap(bytes(raw[:-5]))
    with pytest.raises(FormatError):
        snapio.decode_snap(bytes(raw) + b"x")
    with pytest.raises(FormatError) as info:
        snapio.decode_snap(b"XXXX" + bytes(raw[4:]))
    assert info.value.offset == 0
    bad = bytearray(raw)
    bad[30] ^= 0xFF
    with pytest.raises(FormatError) as info:
        snapio.decode_snap(bytes(bad))
    assert info.value.offset == 24
    ver = bytearray(raw)
    ver[4] = 2
    with pytest.raises(VersionError):
        snapio.decode_snap(bytes(ver))
    with pytest.raises(FormatError):
        snapio.decode_snap(b"SB")


# config ----------------------------------------------------------------------

def test_config_parsing_and_rejection():
    cfg = config.parse_config(TINY)
    assert cfg.params() == pytest.approx(list(np.linspace(0.8, 1.0, 4)))
    assert cfg.offline().enc_hidden == (8,)
    with pytest.raises(ConfigError):
        config.parse_config("system.colour = 1\n")
    with pytest.raises(ConfigError):
        config.parse_config("nosuch.key = 1\n")
    with pytest.raises(ConfigError):
        config.parse_config("ae.epochs = \"many\"\n")
    with pytest.raises(ConfigError):
        config.parse_config("ae.epochs = = 3\n")
    with pytest.raises(ConfigError):
        config.parse_config("grid.dt = 0.1\n").require("generate")
    c = config.parse_config(HOPF_TINY)
    assert c.layout() == {"u": (0, 16), "p": (16, 20)}


@pytest.mark.parametrize("name", ["pitchfork.cfg", "hopf.cfg", "limit_cycle.cfg", "lorenz.cfg"])
def test_presets_load(name):
    cfg = config.load_config(PRESETS / name)
    cfg.require("generate")
    cfg.system()
    cfg.time_grid()
    cfg.params()
    cfg.offline()


def test_pitchfork_preset_values():
    cfg = config.load_config(PRESETS / "pitchfork.cfg")
    off = cfg.offline()
    assert len(cfg.params()) == 20
    assert off.enc_hidden == (32, 8, 4) and off.dec_hidden == (4, 8, 32)
    assert off.train.epochs == 5000 and off.train.learning_rate == 1e-5
    assert off.train.batch_size == 64
    assert (off.weights.lambda1, off.weights.lambda2, off.weights.lambda3) == (1e-10, 1e-6, 0.0)
    assert off.tau == 0.01 and (off.state_degree, off.param_degree) == (2, 2)


# commands --------------------------------------------------------------------

def test_generate_writes_files_and_is_deterministic(tmp_path, tiny_cfg, tiny_data):
    files = sorted(p.name for p in tiny_data.iterdir())
    assert files == ["manifest.json"] + [snapio.snap_name(m) for m in range(4)]
    man = json.loads((tiny_data / "manifest.json").read_text())
    assert man["seed"] == 3 and len(man["params"]) == 4 and "stop_indices" in man
    again = tmp_path / "again"
    assert cli.main(["generate", str(tiny_cfg), str(again)]) == 0
    for m in range(4):
        name = snapio.snap_name(m)
        assert (again / name).read_bytes() == (tiny_data / name).read_bytes()
    a = json.loads((again / "manifest.json").read_text())
    a.pop("created"), man.pop("created")
    assert a == man


def test_generate_refuses_nonempty(tiny_cfg, tiny_data, capsys):
    assert cli.main(["generate", str(tiny_cfg), str(tiny_data)]) == 3
    assert "--force" in capsys.readouterr().err
    assert cli.main(["generate", str(tiny_cfg), str(tiny_data), "--force"]) == 0


def test_config_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("system.kind = \"saddle\"\ngrid.dt = 0.1\ngrid.t_end = 1.0\ngrid.mu = [1.0]\n")
    assert cli.main(["generate", str(bad), str(tmp_path / "o")]) == 2
    bad.write_text("grid.unknown = 1\n")
    assert cli.main(["generate", str(bad), str(tmp_path / "o")]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert cli.main(["generate", str(tmp_path / "missing.cfg"), str(tmp_path / "o")]) == 3


def test_train_smoke_and_predict(tmp_path, tiny_cfg, tiny_data, capsys):
    model = tmp_path / "m.json"
    assert cli.main(["train", str(tiny_cfg), str(tiny_data), str(model)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "epoch,loss" and lines[1].startswith("0,")
    out = tmp_path / "pred"
    args = ["predict", str(model), "--mu", "0.9", "--t0", "0", "--t-end", "24", "--dt", "0.4",
            "--x0", "from-data", "--data", str(tiny_data), "--out", str(out)]
    assert cli.main(args) == 0
    traj = snapio.read_snap(str(out) + ".snap")
    assert traj.shape == (61, 30)
    from sparsebif.analysis import read_csv
    header, cols = read_csv(str(out) + "_latent.csv")
    assert header == ["t", "z0", "z1"] and cols[0][-1] == 24.0
    # outside the training hull: warning, still runs
    args[3] = "1.3"
    assert cli.main(args) == 0
    assert "outside the training range" in capsys.readouterr().err
    # explicit x0 file
    x0 = tmp_path / "x0.snap"
    snapio.write_snap(x0, snapio.load_dataset(tiny_data).trajectories[1][0][None, :])
    args[args.index("from-data")] = str(x0)
    assert cli.main(args) == 0
    assert cli.main(["equations", str(model)]) == 0


def test_train_corrupt_snapfile(tmp_path, tiny_cfg, tiny_data, capsys):
    f = tiny_data / snapio.snap_name(2)
    raw = bytearray(f.read_bytes())
    raw[40] ^= 0x01
    f.write_bytes(bytes(raw))
    assert cli.main(["train", str(tiny_cfg), str(tiny_data), str(tmp_path / "m.json"),
                     "--quiet"]) == 3
    err = capsys.readouterr().err
    assert "CRC32" in err and "offset 24" in err


def _planar_rom(n_h=6, xi=None):
    q = np.eye(n_h)[:, :2]
    basis = pod.PodBasis(q, np.ones(2))
    scaler = pod.Scaler(np.zeros(2), np.ones(2), np.zeros(2, dtype=bool), {})
    enc, dec = Mlp([2, 2]), Mlp([2, 2])
    enc.weights[0][...] = np.eye(2)
    dec.weights[0][...] = np.eye(2)
    spec = LibrarySpec(2, 1, 1, 0)
    if xi is None:
        xi = np.array([[0.0, 0.0], [-0.111, 0.992], [-0.992, 0.111]])
    return rom.RomModel(basis, scaler, enc, dec, SindyModel(spec, xi, 0.01), (0.0, 1.0), 0.9, 0.1,
                        {"u1": (0, 3), "u2": (3, 6)})


def test_equations_fixture(tmp_path, capsys):
    path = tmp_path / "planar.json"
    rom.save_model(_planar_rom(), path)
    assert cli.main(["equations", str(path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "z0' = -0.111 z0 - 0.992 z1"
    assert out[1] == "z1' = 0.992 z0 + 0.111 z1"


def test_predict_divergence_keeps_partial(tmp_path, capsys):
    xi = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    model = _planar_rom(xi=xi)
    # z0' = z0^2 blows up in finite time from z0 = 1 (t = 1)
    model.latent_model = SindyModel(LibrarySpec(2, 1, 2, 0),
                                    np.array([[0, 0], [0, 0], [0, 0], [50.0, 0], [0, 0], [0, 0]]),
                                    0.01)
    path = tmp_path / "blow.json"
    rom.save_model(model, path)
    x0 = tmp_path / "x0.snap"
    snapio.write_snap(x0, np.array([[1.0, 0, 0, 0, 0, 0]]))
    out = tmp_path / "p"
    code = cli.main(["predict", str(path), "--mu", "0.5", "--t0", "0", "--t-end", "10",
                     "--dt", "0.1", "--x0", str(x0), "--out", str(out)])
    assert code == 5
    assert Path(str(out) + ".snap.partial").exists()
    assert Path(str(out) + "_latent.csv.partial").exists()
    assert not Path(str(out) + ".snap").exists()


def test_diagram_data_and_model_share_schema(tmp_path, tiny_cfg, tiny_data):
    model = tmp_path / "m.json"
    assert cli.main(["train", str(tiny_cfg), str(tiny_data), str(model), "--quiet"]) == 0
    a, b = tmp_path / "fom.csv", tmp_path / "rom.csv"
    assert cli.main(["diagram", "--data", str(tiny_data), "--out", str(a)]) == 0
    assert cli.main(["diagram", "--model", str(model), "--data", str(tiny_data),
                     "--t-end", "20", "--out", str(b)]) == 0
    from sparsebif.analysis import read_csv
    ha, ca = read_csv(a)
    hb, cb = read_csv(b)
    assert ha == hb == ["mu", "value", "label"]
    assert np.array_equal(ca[0], cb[0])


def test_spectrum_of_hopf_energy(tmp_path, capsys):
    cfgp = tmp_path / "h.cfg"
    cfgp.write_text(HOPF_TINY)
    data = tmp_path / "h"
    assert cli.main(["generate", str(cfgp), str(data)]) == 0
    out = tmp_path / "s.csv"
    assert cli.main(["spectrum", str(data), "--signal", "point_value:u:0", "--t-start", "50",
                     "--detrend", "--out", str(out)]) == 0
    err = capsys.readouterr().err
    f = float(err.split("peak frequency")[1].split()[0])
    # cycle frequency 1 / (2 pi) on a bin grid of 1 / 50
    assert abs(f - 1.0 / (2 * np.pi)) <= 0.5 / 50.0 + 1e-12
    from sparsebif.analysis import read_csv
    header, cols = read_csv(out)
    assert header == ["frequency", "power"] and f in cols[0]
    assert cli.main(["spectrum", str(data), "--index", "4"]) == 2


def test_cli_missing_model_is_io_error(tmp_path):
    assert cli.main(["equations", str(tmp_path / "none.json")]) == 3
    p = tmp_path / "junk.json"
    p.write_text("{not json")
    assert cli.main(["equations", str(p)]) == 3


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    for name in ("generate", "train", "predict", "diagram", "spectrum", "equations"):
        assert name in text


def test_predict_creates_output_directory(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    data, model = tmp_path / "data", tmp_path / "m.json"
    assert cli.main(["generate", str(cfg), str(data)]) == 0
    assert cli.main(["train", str(cfg), str(data), str(model), "--quiet"]) == 0
    out = tmp_path / "nested" / "dir" / "pred"
    code = cli.main(["predict", str(model), "--mu", "0.9", "--t0", "0", "--t-end", "2", "--dt", "0.4",
                     "--x0", "from-data", "--data", str(data), "--out", str(out)])
    assert code in (0, 5)
    assert out.parent.is_dir()
