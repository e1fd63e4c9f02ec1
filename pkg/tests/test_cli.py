import subprocess
import sys

import pytest

from immersed_fsi.cli import SCHEMA, RunConfig, main, parse_config
from immersed_fsi.errors import ConfigError


def _write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_empty_file_gives_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, ""))
    assert cfg.values == {k: spec.default for k, spec in SCHEMA.items()}
    assert "scheme.tau = 0.05\n" in cfg.text()


def test_comments_and_types(tmp_path):
    cfg = parse_config(_write(tmp_path, "# header\nscheme.r = 2  # trailing\n"
                                        "sweep.taus = 0.1, 0.2\nscheme.frozen = yes\n"))
    assert cfg["scheme.r"] == 2
    assert cfg["sweep.taus"] == (0.1, 0.2)
    assert cfg["scheme.frozen"] is True


@pytest.mark.parametrize("text,line", [
    ("scheme.tau = -1\n", 1),
    ("\n# c\nscheme.r = two\n", 3),
    ("scheme.bogus = 1\n", 1),
    ("mesh.n 8\n", 1),
    ("scheme.name = alg9\n", 1),
])
def test_errors_name_line(tmp_path, text, line):
    with pytest.raises(ConfigError) as info:
        parse_config(_write(tmp_path, text))
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_flag_overrides_file(tmp_path):
    cfg = parse_config(_write(tmp_path, "scheme.r = 1\n"), [("scheme.r", "2")])
    assert cfg["scheme.r"] == 2
    assert cfg.origin["scheme.r"] == "flag"


def test_hash_tracks_values():
    a = parse_config(None)
    b = parse_config(None, [("mesh.n", "32")])
    assert a.hash != b.hash
    assert a.hash == parse_config(None).hash
    assert isinstance(a, RunConfig)


def test_check_monolithic(tmp_path, capsys):
    code = main(["check", "--mesh.n", "8", "--output.dir", str(tmp_path)])
    assert code == 0
    assert "unconditional" in capsys.readouterr().out
    header = (tmp_path / "effective_config.txt").read_text().splitlines()[0]
    assert header.startswith("# columns: ") and "config_hash: " in header


def test_check_alg2_violation(tmp_path, capsys):
    code = main(["check", "--mesh.n", "8", "--scheme.name", "alg2", "--scheme.tau", "1",
                 "--output.dir", str(tmp_path)])
    assert code == 1
    assert "violated" in capsys.readouterr().out


def test_config_error_exit(tmp_path, capsys):
    cfg = _write(tmp_path, "scheme.tau = -1\n")
    assert main(["run", str(cfg)]) == 2
    assert "line 1" in capsys.readouterr().err
    assert main(["run", "--scheme.tau"]) == 2
    assert main(["run", "--scheme.r=7"]) == 2


def test_run_writes_outputs(tmp_path):
    out = tmp_path / "o"
    code = main(["run", "--mesh.n", "8", "--scheme.t_final", "0.2",
                 "--output.snapshot_every", "2", "--output.dir", str(out)])
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["effective_config.txt", "energy.csv", "energy.dat", "snapshot_0.csv",
                     "snapshot_0.dat", "snapshot_2.csv", "snapshot_2.dat", "snapshot_4.csv",
                     "snapshot_4.dat"]
    lines = (out / "energy.csv").read_text().splitlines()
    assert lines[0].startswith("# columns: n t E")
    assert len(lines) == 2 + 5
    snap = (out / "snapshot_2.csv").read_text().splitlines()
    assert len(snap) == 2 + 81 + 8


def test_run_is_byte_identical(tmp_path):
    args = ["run", "--mesh.n", "8", "--scheme.t_final", "0.2"]
    main(args + ["--output.dir", str(tmp_path / "a")])
    main(args + ["--output.dir", str(tmp_path / "b")])
    for name in ("energy.csv", "energy.dat"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_leaving_domain(tmp_path, capsys):
    code = main(["run", "--mesh.n", "8", "--scheme.name", "alg2", "--scheme.tau", "1.28",
                 "--scheme.t_final", "25.6", "--scenario.a", "0.45", "--scenario.b", "0.1",
                 "--output.dir", str(tmp_path)])
    assert code == 1
    assert "run failed" in capsys.readouterr().err
    assert (tmp_path / "energy.csv").exists()


def test_sweep_and_stokes(tmp_path):
    assert main(["sweep", "--scheme.name", "alg3", "--scheme.r", "0", "--sweep.n", "8",
                 "--sweep.n_steps", "5", "--sweep.taus", "0.04,0.08",
                 "--output.dir", str(tmp_path)]) == 0
    assert (tmp_path / "sweep.csv").exists() and (tmp_path / "energy_tau1.csv").exists()
    assert main(["stokes-mms", "--stokes.ns", "4 8", "--output.dir", str(tmp_path)]) == 0
    rows = (tmp_path / "errors_stokes_mms.csv").read_text().splitlines()
    assert len(rows) == 4


def test_converge_small(tmp_path):
    code = main(["converge", "--study.kind", "TimeConv", "--study.taus", "0.04,0.02",
                 "--study.ref_n", "8", "--study.ref_tau", "0.01", "--study.t_eval", "0.04",
                 "--output.dir", str(tmp_path)])
    assert code == 0
    lines = (tmp_path / "errors_timeconv.csv").read_text().splitlines()
    assert lines[1] == "param,err_u,err_d,err_ddot,total,rate,err_p,rate_u,rate_d,rate_ddot,rate_p"
    assert len(lines) == 4


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "immersed_fsi", "check", "--mesh.n", "8",
                           "--output.dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "unconditional" in proc.stdout


def test_hash_ignores_output_dir():
    assert parse_config(None, [("output.dir", "x")]).hash == parse_config(None).hash
