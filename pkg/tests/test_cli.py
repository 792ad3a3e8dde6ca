import subprocess
import sys
from pathlib import Path

import pytest

from skewreg import __version__
from skewreg.cli import ConfigError, load_config, main, parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def table_rows(path):
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    head = lines[0].split("\t")
    return [dict(zip(head, l.split("\t"))) for l in lines[1:]]


def test_version(capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == f"skewreg {__version__}"


def test_gauge_zero_run(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(CONFIGS / "gauge_zero.yaml"), "--out", str(out), "--quiet"]) == 0
    table = out / "gauge.tsv"
    text = table.read_text()
    for key in ("# config_hash=", "# seed=", "# resolution=33", "# tolerances="):
        assert key in text
    rows = table_rows(table)
    assert float(rows[0]["residual"]) == 0.0
    assert (out / "gauge_summary.txt").read_text().count("PASS") >= 1


def test_malformed_config_reports_line(tmp_path, capsys):
    cfg = write(tmp_path, "experiment: gauge\nresolution: 33\nproblem:\n  omega: [zero\n")
    assert main(["run", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert err.startswith(f"{cfg}:")
    assert int(err.split(":")[1]) >= 4


@pytest.mark.parametrize("text,line,msg", [
    ("experiment: gauge\nresolution: 34\n", 2, "odd"),
    ("experiment: gauge\nresolution: 33\nbogus: 1\n", 3, "unknown key"),
    ("experiment: morrey\np: 2.5\n", 2, "out of range"),
    ("experiment: dance\n", 1, "experiment must be"),
    ("experiment: gauge\nseed: -1\n", 2, "out of range"),
])
def test_config_errors(text, line, msg):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line
    assert msg in str(info.value)


def test_empty_sweep_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, "experiment: sweep\nsweep:\n  experiment: boundary\n  parameter: problem.delta\n"
                          "  values: []\n")
    assert main(["sweep", "--config", cfg]) == 2
    assert "sweep grid is empty" in capsys.readouterr().err


def test_validate_config_all_shipped(capsys):
    for path in sorted(CONFIGS.glob("*.yaml")):
        assert main(["validate-config", "--config", str(path)]) == 0, path
    assert "config_hash=" in capsys.readouterr().out


def test_config_hash_ignores_output_but_not_seed():
    a = parse_config("experiment: hodge\noutput: x\n")
    b = parse_config("experiment: hodge\noutput: y\n")
    c = parse_config("experiment: hodge\nseed: 3\n")
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_command_kind_mismatch(tmp_path, capsys):
    assert main(["run", "--config", str(CONFIGS / "sweep_boundary.yaml"), "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--config", str(CONFIGS / "hodge.yaml"), "--out", str(tmp_path)]) == 2


def test_missing_file(tmp_path, capsys):
    assert main(["validate-config", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_invariant_failure_exit_1(tmp_path, capsys):
    cfg = write(tmp_path, "experiment: hodge\nresolution: 33\ntolerances:\n  hodge: 1.0e-30\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 1
    assert capsys.readouterr().err.startswith("FAILED invariant hodge.")


def test_overrides_recorded(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(CONFIGS / "gauge_zero.yaml"), "--out", str(out), "--quiet",
                 "--seed", "7", "--resolution", "17"]) == 0
    text = (out / "gauge.tsv").read_text()
    assert "# seed=7" in text and "# resolution=17" in text


def test_determinism_byte_identical(tmp_path):
    for name in ("system.yaml", "hardy_bmo.yaml"):
        outs = []
        for k in range(2):
            out = tmp_path / f"{name}-{k}"
            main(["run", "--config", str(CONFIGS / name), "--out", str(out), "--quiet", "--resolution", "33"])
            outs.append(sorted(p for p in out.rglob("*.tsv")))
        assert [p.name for p in outs[0]] == [p.name for p in outs[1]]
        for a, b in zip(*outs):
            assert a.read_bytes() == b.read_bytes()


def test_h_surface_small_resolutions(tmp_path, capsys):
    cfg = write(tmp_path, "experiment: h-surface\nproblem:\n  scale: 0.5\n  resolutions: [33, 65]\n"
                          "  max_iter: 80\ntolerances:\n  picard: 1.0e-8\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    rows = table_rows(tmp_path / "o" / "h-surface.tsv")
    assert float(rows[-1]["order"]) >= 1.8


def test_boundary_sweep_monotone(tmp_path):
    out = tmp_path / "o"
    assert main(["sweep", "--config", str(CONFIGS / "sweep_boundary.yaml"), "--out", str(out), "--quiet"]) == 0
    rows = table_rows(out / "sweep.tsv")
    gaps = [float(r["gap"]) for r in sorted(rows, key=lambda r: -float(r["sweep_value"]))]
    assert all(b <= 1.1 * a + 1e-4 for a, b in zip(gaps, gaps[1:]))


def test_gauge_amplitude_sweep_threshold(tmp_path):
    out = tmp_path / "o"
    assert main(["sweep", "--config", str(CONFIGS / "sweep_gauge_amplitude.yaml"), "--out", str(out),
                 "--quiet"]) == 0
    summary = (out / "sweep_summary.txt").read_text()
    assert "threshold" in summary


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "skewreg", "version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("skewreg ")


def test_load_config_shipped():
    cfg = load_config(CONFIGS / "h_surface.yaml")
    assert cfg.experiment == "h-surface"
    assert cfg.with_value("problem.scale", 0.25).problem["scale"] == 0.25
