import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from imhd_vem import mesh as M
from imhd_vem.cli import ConfigError, RunConfig, config_from_dict, load_config, main
from imhd_vem.verify import CSV_COLUMNS


def test_defaults_match_reference_setup():
    cfg = RunConfig()
    assert (cfg.nu, cfg.Sc, cfg.B3, cfg.tol) == (1.0, 1.0, 1.0, 1e-6)
    assert (cfg.k1, cfg.k2) == (2, 1)


@pytest.mark.parametrize(
    "data,field",
    [({"k2": 0}, "k2"), ({"k1": 1}, "k1"), ({"tol": 0}, "tol"), ({"scheme": "x"}, "scheme"),
     ({"bogus": 1}, "bogus"), ({"k1": "two"}, "k1"), ({"family": "hex"}, "family")],
)
def test_config_validation_names_field(data, field):
    with pytest.raises(ConfigError, match=field):
        config_from_dict(data)


def test_config_k2_message_cites_range():
    with pytest.raises(ConfigError, match="k2 >= 1"):
        config_from_dict({"k2": 0})


def test_json_error_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "k1": 2,\n  "k2": ,\n}')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(p)


def test_mesh_gen_roundtrip_and_determinism(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["mesh-gen", "--family", "voronoi", "--n", "50", "--seed", "4", "--out", str(a)]) == 0
    assert main(["mesh-gen", "--family", "voronoi", "--n", "50", "--seed", "4", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    mesh = M.load_mesh(a)
    assert mesh.n_cells == 50
    assert np.array_equal(mesh.vertices, M.generate_voronoi(50, 4).vertices)


def test_mesh_gen_lshape_level0(tmp_path):
    out = tmp_path / "l.json"
    assert main(["mesh-gen", "--family", "lshape", "--n", "0", "--out", str(out)]) == 0
    assert M.load_mesh(out).n_cells == 96


def test_run_writes_three_files(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--family", "voronoi", "--n", "100", "--out", str(out)])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["errors.json", "iterations.csv", "solution.npz"]
    rec = json.loads((out / "errors.json").read_text())
    assert rec["N_t"] == 100 and rec["status"] == "ok"
    assert "iterations" in capsys.readouterr().out


def test_run_from_config_and_mesh_file(tmp_path):
    mesh_path = tmp_path / "m.json"
    M.save_mesh(M.structured_quads(3, 3), mesh_path)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mesh": str(mesh_path), "k1": 3, "k2": 2, "scheme": "newton"}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    rec = json.loads((tmp_path / "o" / "errors.json").read_text())
    assert rec["N_t"] == 9


def test_run_rejects_bad_order(tmp_path, capsys):
    assert main(["run", "--k2", "0", "--out", str(tmp_path)]) == 1
    assert "k2 >= 1" in capsys.readouterr().err


def test_run_missing_mesh_file(tmp_path, capsys):
    assert main(["run", "--mesh", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1
    assert "No such file" in capsys.readouterr().err


def test_run_nonconvergence_exit_status(tmp_path):
    code = main(["run", "--n", "9", "--scheme", "stokes", "--tol", "1e-15", "--max-iters", "1",
                 "--nu", "0.05", "--out", str(tmp_path), "--quiet"])
    assert code == 2
    assert (tmp_path / "iterations.csv").exists()


def test_study_minimal(tmp_path, capsys):
    code = main(["study", "--family", "remapped", "--sizes", "4,16", "--out", str(tmp_path)])
    assert code == 0
    files = list(tmp_path.glob("study_*.csv"))
    assert len(files) == 1
    with open(files[0]) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0].keys()) == CSV_COLUMNS
    assert len(rows) == 2
    assert "div u" in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "imhd_vem", "mesh-gen", "--family", "remapped", "--n", "4",
         "--out", str(tmp_path / "r.json")],
        capture_output=True, text=True,
    )
    assert res.returncode == 0
    assert M.load_mesh(tmp_path / "r.json").n_cells == 4
