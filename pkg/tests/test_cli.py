import csv
from pathlib import Path

import numpy as np
import pytest

from vdpbc.cli import CSV_HEADER, EXIT_CERTIFICATE, EXIT_DIVERGENCE, EXIT_OK, EXIT_VALIDATION, main
from vdpbc.scenario import ScenarioError, bundled_scenarios, load_scenario, parse_text, validate

DATA = Path(__file__).parent / "data"


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def write_scenario(tmp_path, extra=""):
    keys = {"name": "custom", "integrator.t_end": "0.05", "output.dir": str(tmp_path)}
    for ln in extra.splitlines():
        k, _, v = ln.partition("=")
        keys[k.strip()] = v.strip()
    lines = [f"{k} = {v}" for k, v in keys.items()]
    path = tmp_path / "custom.scn"
    path.write_text("\n".join(lines) + "\n")
    return path


class TestScenario:
    def test_bundled(self):
        assert bundled_scenarios() == ["table1_k31", "table1_k3p1"]

    def test_soft_variant_differs_in_stiffness_only(self):
        a = load_scenario("table1_k31").model_dump()
        b = load_scenario("table1_k3p1").model_dump()
        assert b["model"]["stiffness"] == 3.1
        a["model"]["stiffness"] = 3.1
        a["name"] = b["name"]
        assert a == b

    def test_comments_and_blank_lines(self):
        tree = parse_text("# c\n\nmodel.stiffness = 5  # N m/rad\n")
        assert tree == {"model": {"stiffness": "5"}}

    def test_duplicate_key(self):
        with pytest.raises(ScenarioError, match="given twice"):
            parse_text("name = a\nname = b\n")

    def test_missing_equals(self):
        with pytest.raises(ScenarioError, match="line 1"):
            parse_text("model.stiffness 5\n")

    def test_unknown_key(self):
        with pytest.raises(ScenarioError, match="model.springiness"):
            validate(parse_text("model.springiness = 5"))

    def test_negative_inertia_names_field(self):
        with pytest.raises(ScenarioError, match=r"^model\.link_inertia: "):
            validate(parse_text("model.link_inertia = -0.031"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError, match="not found"):
            load_scenario(tmp_path / "nope.scn")

    def test_overrides_revalidate(self):
        sc = load_scenario("table1_k31")
        assert sc.with_overrides({"model.stiffness": "3.1"}).model.stiffness == 3.1
        with pytest.raises(ScenarioError):
            sc.with_overrides({"integrator.dt": "0"})


class TestRun:
    def test_golden_head(self, tmp_path):
        assert main(["run", "table1_k31", "--t-end", "0.01", "--out", str(tmp_path)]) == EXIT_OK
        header, rows = read_csv(tmp_path / "table1_k31.csv")
        g_header, golden = read_csv(DATA / "table1_k31_head.csv")
        assert header == g_header == CSV_HEADER
        np.testing.assert_allclose(rows[:10], golden, rtol=1e-12, atol=1e-15)

    def test_first_row_by_hand(self):
        # at t = 0 from rest: q_md = u_l / k with
        # u_l = M_l Lambda_l a + D_l a + K_ld a,  a = pi/4 (the reference velocity)
        _, golden = read_csv(DATA / "table1_k31_head.csv")
        a = np.pi / 4
        u_l = 0.031 * 10 * a + 0.2 * a + 0.6 * a
        assert golden[0, 8] == 0.0
        assert golden[0, 9] == pytest.approx(-u_l / 31, rel=1e-13)
        assert golden[0, 10] == pytest.approx(-0.031 * a, rel=1e-13)
        assert golden[0, 5] == pytest.approx(golden[0, 6] + golden[0, 7], rel=1e-14)

    def test_summary_written(self, tmp_path, capsys):
        main(["run", "table1_k3p1", "--t-end", "0.05", "--out", str(tmp_path)])
        text = (tmp_path / "table1_k3p1_summary.txt").read_text()
        assert "peak_u:" in text and "beta_hat:" in text and "transient_time:" in text
        assert "table1_k3p1" in capsys.readouterr().out

    def test_custom_scenario_file(self, tmp_path):
        path = write_scenario(tmp_path, "initial.q_l = 0.1")
        assert main(["run", str(path)]) == EXIT_OK
        _, rows = read_csv(tmp_path / "custom.csv")
        assert rows[0, 1] == 0.1

    def test_validation_exit(self, tmp_path, capsys):
        path = write_scenario(tmp_path, "model.link_inertia = -1")
        assert main(["run", str(path)]) == EXIT_VALIDATION
        assert "model.link_inertia" in capsys.readouterr().err

    def test_certificate_exit(self, tmp_path, capsys):
        path = write_scenario(tmp_path, "controller.link_rate = -1")
        assert main(["run", str(path)]) == EXIT_CERTIFICATE
        assert "contraction inequality" in capsys.readouterr().err

    def test_divergence_exit(self, tmp_path):
        path = write_scenario(tmp_path, "integrator.dt = 0.05\nintegrator.t_end = 5\ninitial.q_l = 0.5")
        assert main(["run", str(path)]) == EXIT_DIVERGENCE

    def test_dt_flag(self, tmp_path):
        main(["run", "table1_k31", "--t-end", "0.01", "--dt", "1e-3", "--out", str(tmp_path)])
        _, rows = read_csv(tmp_path / "table1_k31.csv")
        assert rows[1, 0] == pytest.approx(1e-2)


class TestVerify:
    def test_two_link(self, tmp_path, capsys):
        assert main(["verify", "--model", "two-link", "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "verify_two-link.json").exists()
        assert "overall: PASS" in capsys.readouterr().out

    def test_fault_fails(self, capsys):
        assert main(["verify", "--model", "two-link", "--fault", "gyroscopic-sign"]) == EXIT_CERTIFICATE
        assert "FAIL" in capsys.readouterr().out


class TestSweep:
    def test_link_damping(self, tmp_path):
        code = main(["sweep", "--param", "link_damping", "--values", "0.3,0.6,1.2", "table1_k31",
                     "--t-end", "0.5", "--out", str(tmp_path)])
        assert code == EXIT_OK
        with open(tmp_path / "table1_k31_sweep_link_damping.csv") as fh:
            header, *rows = list(csv.reader(fh))
        assert header == ["value", "beta", "beta_hat", "transient_time", "peak_u", "status"]
        assert [r[-1] for r in rows] == ["ok"] * 3
        table = np.array([r[:5] for r in rows], dtype=float)
        assert table[:, 0].tolist() == [0.3, 0.6, 1.2]
        assert np.all(np.diff(table[:, 1]) >= 0)
        # extra link damping speeds up the measured decay
        assert np.all(np.diff(table[:, 2]) > 0)

    def test_partial_failure_is_reported(self, tmp_path):
        code = main(["sweep", "--param", "controller.link_rate", "--values=-1,10", "table1_k31",
                     "--t-end", "0.05", "--out", str(tmp_path)])
        assert code == EXIT_OK
        text = (tmp_path / "table1_k31_sweep_link_rate.csv").read_text()
        assert "synthesis:" in text

    def test_all_fail(self, tmp_path):
        code = main(["sweep", "--param", "stiffness", "--values=-1,-2", "table1_k31", "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION

    def test_empty_values(self, tmp_path):
        assert main(["sweep", "--param", "stiffness", "--values", " , ", "table1_k31", "--out", str(tmp_path)]) == EXIT_VALIDATION

    def test_unknown_param(self, tmp_path):
        assert main(["sweep", "--param", "bogus", "--values", "1", "table1_k31", "--out", str(tmp_path)]) == EXIT_VALIDATION
