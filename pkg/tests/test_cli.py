import csv
import json
import subprocess
import sys

import pytest

from eigbounds.cli import (
    EXIT_OK,
    EXIT_UNCONVERGED,
    EXIT_VALIDATION,
    FIELD_HEADER,
    HEADER,
    main,
)
from eigbounds.mesh import load_mesh
from eigbounds.presets import preset_document

from meshes import grid_document, mixed_label


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_capped_run_gives_single_unconverged_row(tmp_path, capsys):
    code = main(["--preset", "square-dirichlet", "--max-steps", "0", "--out", str(tmp_path)])
    assert code == EXIT_UNCONVERGED
    rows = read_rows(tmp_path / "history_1.csv")
    assert rows[0] == HEADER
    assert len(rows) == 2 and rows[1][0] == "1"
    assert json.loads((tmp_path / "run.json").read_text())["runs"]["1"]["status"] == "unconverged"
    assert "unconverged" in capsys.readouterr().out


@pytest.mark.parametrize("flag", [["--theta", "0"], ["--ereltol", "-1"], ["--degree", "3"], ["--index", "2,1"]])
def test_invalid_config_writes_nothing(tmp_path, flag):
    out = tmp_path / "out"
    assert main(["--preset", "square-dirichlet", "--out", str(out)] + flag) == EXIT_VALIDATION
    assert not out.exists()


def test_unknown_preset_and_missing_source(tmp_path):
    assert main(["--preset", "circle", "--out", str(tmp_path / "a")]) == EXIT_VALIDATION
    assert main(["--out", str(tmp_path / "b")]) == EXIT_VALIDATION
    assert main(["--mesh", str(tmp_path / "missing.json"), "--out", str(tmp_path / "c")]) == EXIT_VALIDATION


def test_bad_config_document(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"preset": "dumbbell", "colour": "red"}))
    assert main(["--config", str(path)]) == EXIT_VALIDATION
    path.write_text("[1, 2]")
    assert main(["--config", str(path)]) == EXIT_VALIDATION


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    outs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(name)
        code = main(["--preset", "dumbbell", "--index", "1,2", "--ereltol", "0.1", "--out", str(out)])
        outs.append((code, out))
    return outs


def test_csv_output_is_deterministic(two_runs):
    (code_a, a), (code_b, b) = two_runs
    assert code_a == code_b == EXIT_OK
    for name in ("bounds.csv", "history_1.csv", "history_2.csv", "diagnostics_1.csv", "diagnostics_2.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_summary_is_last_history_row(two_runs):
    _, out = two_runs[0]
    bounds = read_rows(out / "bounds.csv")
    assert bounds[0] == HEADER
    assert bounds[1:] == [read_rows(out / f"history_{i}.csv")[-1] for i in (1, 2)]


def test_history_rows(two_runs):
    _, out = two_runs[0]
    rows = read_rows(out / "history_2.csv")[1:]
    assert [int(r[0]) for r in rows] == list(range(1, len(rows) + 1))
    assert all(r[2] == "2" for r in rows)
    assert all(float(r[5]) <= float(r[3]) for r in rows)
    assert float(rows[-1][6]) <= 0.1
    assert {r[7] for r in rows} <= {"true", "false"}
    # 12 significant digits
    assert all(len(r[3].replace(".", "").lstrip("0")) <= 12 for r in rows)


def test_config_file_and_dump_fields(tmp_path, capsys):
    mesh_doc = grid_document(3, length=3.0, label=mixed_label)
    (tmp_path / "mesh.json").write_text(json.dumps(mesh_doc))
    run = {
        "mesh": "mesh.json",
        "coefficients": {"A": [[1.0, 0.0], [0.0, 2.0]], "c": 0.5, "beta2": 1.0},
        "ereltol": 0.2,
        "output": str(tmp_path / "out"),
        "dump_fields": True,
    }
    (tmp_path / "run.json").write_text(json.dumps(run))
    assert main(["--config", str(tmp_path / "run.json")]) == EXIT_OK
    out = tmp_path / "out"
    steps = len(read_rows(out / "history_1.csv")) - 1
    fields = out / "fields_1"
    for step in range(1, steps + 1):
        mesh = load_mesh(fields / f"mesh_{step}.txt")
        rows = read_rows(fields / f"field_{step}.csv")
        assert rows[0] == FIELD_HEADER
        assert {int(r[0]) for r in rows[1:]} == set(range(mesh.n_triangles))
    assert "lambda_1" in capsys.readouterr().out


def test_preset_document_roundtrips_through_mesh_flag(tmp_path):
    (tmp_path / "sq.json").write_text(json.dumps(preset_document("square-dirichlet")))
    code = main(["--mesh", str(tmp_path / "sq.json"), "--max-steps", "0", "--out", str(tmp_path / "o")])
    assert code == EXIT_UNCONVERGED
    row = read_rows(tmp_path / "o" / "bounds.csv")[1]
    assert float(row[5]) <= 2.0 <= float(row[3])


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "eigbounds.cli", "--preset", "square-dirichlet", "--max-steps", "0", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == EXIT_UNCONVERGED
    assert "lambda_1" in proc.stdout
