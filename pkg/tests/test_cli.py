import json
import os
import stat
from pathlib import Path

import numpy as np
import pytest

from trflow import cli, immersion
from trflow.errors import ConfigError

MINIMAL = """
ambient.kind = flat-torus
preset.name = flat_lagrangian_torus
preset.epsilon = 0.02
grid.resolution = 16 16
flow.c_cfl = 0.2
flow.max_time = 0.005
flow.diagnostic_stride = 5
flow.eigen_stride = 25
flow.measure_kappa_final = false
flow.record_smoothing = false
output.figures = false
"""


class TestParse:
    def test_minimal_valid_fills_defaults(self):
        cfg = cli.parse_config(MINIMAL, source="mini.cfg")
        assert cfg["grid.fd_order"] == 4
        assert cfg["verify.resolutions"] == (32, 64, 128)
        assert cfg["flow.max_time"] == 0.005

    def test_cross_reference_error_names_both_keys(self):
        text = "ambient.kind = flat-torus\npreset.name = clifford_cp2\n"
        with pytest.raises(ConfigError) as exc:
            cli.parse_config(text, source="x.cfg")
        msg = str(exc.value)
        assert "ambient.kind" in msg and "preset.name" in msg
        assert "x.cfg:1" in msg and "x.cfg:2" in msg

    def test_odd_fd_order_rejected(self):
        text = MINIMAL + "grid.fd_order = 3\n"
        with pytest.raises(ConfigError, match="even order"):
            cli.parse_config(text)

    def test_unknown_key_with_line_number(self):
        text = "preset.name = product_circles\nfoo.bar = 1\n"
        with pytest.raises(ConfigError, match=r"<config>:2: unknown key"):
            cli.parse_config(text)

    def test_type_mismatch_reported(self):
        text = "preset.name = product_circles\nflow.c_cfl = fast\n"
        with pytest.raises(ConfigError, match="bad value for flow.c_cfl"):
            cli.parse_config(text)

    def test_duplicate_key_reported(self):
        text = "preset.name = product_circles\npreset.r1 = 1\npreset.r1 = 2\n"
        with pytest.raises(ConfigError, match="duplicate key"):
            cli.parse_config(text)

    def test_multiple_errors_collected(self):
        text = "foo = 1\nbar = 2\npreset.name = product_circles\n"
        with pytest.raises(ConfigError) as exc:
            cli.parse_config(text)
        assert str(exc.value).count("unknown key") == 2


class TestRunVerb:
    def test_run_writes_artifacts(self, tmp_path):
        cfgp = tmp_path / "mini.cfg"
        cfgp.write_text(MINIMAL)
        rc = cli.main(["run", "--config", str(cfgp), "--out", str(tmp_path / "out"),
                       "--quiet"])
        assert rc == 0
        names = set(os.listdir(tmp_path / "out"))
        assert {"diagnostics.csv", "certificates.jsonl", "identity_reports.json",
                "final_state.snap", "plots.gp", "resolved_config.cfg",
                "run_summary.json"} <= names
        header = (tmp_path / "out" / "diagnostics.csv").read_text().splitlines()[0]
        assert header.split(",")[:6] == ["t", "dt", "vol", "sup_A2", "sup_H2",
                                         "sup_omega2"]
        summary = json.loads((tmp_path / "out" / "run_summary.json").read_text())
        assert summary["stopped"] in ("max_time", "sup_H_floor")

    def test_determinism_bit_identical_csv(self, tmp_path):
        cfgp = tmp_path / "mini.cfg"
        cfgp.write_text(MINIMAL)
        for name in ("a", "b"):
            rc = cli.main(["run", "--config", str(cfgp), "--out",
                           str(tmp_path / name), "--seed", "7", "--quiet"])
            assert rc == 0
        a = (tmp_path / "a" / "diagnostics.csv").read_bytes()
        b = (tmp_path / "b" / "diagnostics.csv").read_bytes()
        assert a == b

    def test_blowup_exit_code_and_report(self, tmp_path):
        cfgp = tmp_path / "circles.cfg"
        cfgp.write_text("""
preset.name = product_circles
grid.resolution = 24 24
flow.max_time = 0.6
flow.diagnostic_stride = 100
flow.eigen_stride = 1000000
flow.dt_floor_factor = 1e-4
flow.measure_kappa_final = false
flow.record_smoothing = false
output.figures = false
""")
        rc = cli.main(["run", "--config", str(cfgp), "--out", str(tmp_path / "out"),
                       "--quiet"])
        assert rc == 3
        blow = json.loads((tmp_path / "out" / "blowup.json").read_text())
        assert 0.45 < blow["time"] < 0.55
        assert (tmp_path / "out" / "diagnostics.csv").exists()

    def test_config_error_exit_and_no_partial_artifacts(self, tmp_path):
        cfgp = tmp_path / "bad.cfg"
        cfgp.write_text("preset.name = clifford_cp2\nambient.kind = flat-torus\n")
        out = tmp_path / "nope"
        rc = cli.main(["run", "--config", str(cfgp), "--out", str(out)])
        assert rc == 2
        assert not out.exists()

    def test_unwritable_output_dir_exit_5(self, tmp_path):
        cfgp = tmp_path / "mini.cfg"
        cfgp.write_text(MINIMAL)
        ro = tmp_path / "ro"
        if os.geteuid() != 0:
            ro.mkdir()
            ro.chmod(stat.S_IRUSR | stat.S_IXUSR)
            try:
                rc = cli.main(["run", "--config", str(cfgp),
                               "--out", str(ro / "sub"), "--quiet"])
            finally:
                ro.chmod(stat.S_IRWXU)
        else:
            # permission bits do not bind root; a file in the path still fails
            ro.write_text("not a directory")
            rc = cli.main(["run", "--config", str(cfgp),
                           "--out", str(ro / "sub"), "--quiet"])
        assert rc == 5


class TestVerifyVerb:
    def test_identity_ladder_on_lagrangian(self, tmp_path):
        cfgp = tmp_path / "v.cfg"
        cfgp.write_text("""
preset.name = product_circles
grid.resolution = 16 16
verify.suites = identities
verify.resolutions = 16 24
verify.tolerance = 1e-6
output.figures = false
""")
        rc = cli.main(["verify", "--config", str(cfgp), "--out", str(tmp_path / "v"),
                       "--quiet"])
        assert rc == 0
        rep = json.loads((tmp_path / "v" / "verification_report.json").read_text())
        assert rep["passed"] is True
        assert {row["identity"] for row in rep["identities"]} >= {
            "xi_H_dstar_omega", "dH_chain"}

    def test_spectrum_suite(self, tmp_path):
        cfgp = tmp_path / "v.cfg"
        cfgp.write_text("""
preset.name = flat_lagrangian_torus
ambient.kind = flat-torus
grid.resolution = 32 32
verify.suites = spectrum
verify.resolutions = 32
output.figures = false
""")
        rc = cli.main(["verify", "--config", str(cfgp), "--out", str(tmp_path / "v"),
                       "--quiet"])
        assert rc == 0
        rep = json.loads((tmp_path / "v" / "verification_report.json").read_text())
        row = rep["spectrum"][0]
        assert row["harmonic_dimension"] == 2
        assert abs(row["lambda0"] - 4 * np.pi**2) / (4 * np.pi**2) < 0.01


class TestOtherVerbs:
    def test_presets_listing(self, capsys):
        assert cli.main(["presets"]) == 0
        out = capsys.readouterr().out
        assert "clifford_cp2" in out and "product_circles" in out

    def test_inspect_snapshot(self, tmp_path, capsys):
        state = immersion.flat_lagrangian_torus(resolution=(16, 16), epsilon=0.01)
        path = tmp_path / "s.snap"
        immersion.save_snapshot(state, path)
        assert cli.main(["inspect", str(path)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["grid"]["resolution"] == [16, 16]
        assert info["sup_omega2"] > 0

    def test_inspect_missing_file_exit_5(self, tmp_path):
        assert cli.main(["inspect", str(tmp_path / "missing.snap")]) == 5
