import csv
import json
from importlib import resources

import numpy as np
import pytest

from multicomb import cli
from multicomb.config import ConfigError, parse_config
from multicomb.model import fig2_spec

FIXTURES = ("fig1", "fig2", "fig4_opt1", "fig4_opt2", "fig3_weak", "fig3_strong")


def fixture_text(name):
    return resources.files("multicomb").joinpath("configs", f"{name}.cfg").read_text()


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def edit(text, **repl):
    for old, new in repl.items():
        text = "\n".join(new if line.split("=")[0].strip() == old else line for line in text.splitlines()) + "\n"
    return text


def run(tmp_path, verb, text, *extra):
    out = tmp_path / verb
    rc = cli.main([verb, "--config", write_cfg(tmp_path, text), "--out", str(out), *extra])
    return rc, out


def read_matrix(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0][1:], np.array([[float(x) for x in r[1:]] for r in rows[1:]])


TINY_PULSE = edit(fixture_text("fig3_weak"), length_cm="length_cm = 0.05", checkpoints_cm="checkpoints_cm = 0.02, 0.05",
                  i_lo="i_lo = 0", i_hi="i_hi = 1")


# --- config parsing -------------------------------------------------------------------


@pytest.mark.parametrize("name", FIXTURES)
def test_shipped_fixtures_parse_and_build(name):
    cfg = parse_config(fixture_text(name), name)
    if cfg.has("system"):
        spec = cfg.system_spec()
        assert spec.n_modes == (spec.n_sub + 1) * spec.J
    if cfg.has("optimize"):
        prob = cfg.optimization_problem()
        assert prob.budget == 500
    if cfg.has("pulse"):
        ph = cfg.pulse_physics()
        assert ph.n_envelopes == 6 and ph.length == pytest.approx(0.1)
        assert cfg.checkpoints(ph.length)[-1] == pytest.approx(0.1)


def test_fig2_fixture_matches_reference_spec():
    spec = parse_config(fixture_text("fig2")).system_spec()
    ref = fig2_spec()
    for name in ("Q_out", "Q_int", "pump_power", "Q_out_T", "Q_int_T"):
        np.testing.assert_array_equal(getattr(spec, name), getattr(ref, name))
    for name in ("i_lo", "i_hi", "J", "beta0", "crystal_length", "dk_offset"):
        assert getattr(spec, name) == getattr(ref, name)
    for name in ("lambda0", "omegaT0", "omega_m"):
        assert getattr(spec, name) == pytest.approx(getattr(ref, name), rel=1e-15)


def test_unknown_key_names_key_and_line():
    text = fixture_text("fig2").replace("lambda0_nm", "lambda0")
    with pytest.raises(ConfigError, match=r":\d+: unknown key \[system\] lambda0 \(did you mean lambda0_nm"):
        parse_config(text, "f.cfg")


def test_unknown_section_and_bad_value():
    with pytest.raises(ConfigError, match=r"unknown section \[sytem\]"):
        parse_config("[sytem]\nJ = 3\n")
    with pytest.raises(ConfigError, match=r"\[system\] J"):
        parse_config("[system]\nJ = three\n")


def with_system(extra):
    return fixture_text("fig2").replace("[system]\n", "[system]\n" + extra)


def test_per_line_tables():
    text = with_system("Q_out.-2 = 1e3, 2e3, 3e3\nQ_int.1 = 1e7\n")
    spec = parse_config(text).system_spec()
    np.testing.assert_array_equal(spec.Q_out[0], [1e3, 2e3, 3e3])
    np.testing.assert_array_equal(spec.Q_out[1:], 5e6)
    np.testing.assert_array_equal(spec.Q_int[3], 1e7)
    assert np.all(np.isinf(spec.Q_int[[0, 1, 2, 4]]))
    with pytest.raises(ConfigError, match=r"Q_out.-2 needs 1 or J=3 values"):
        parse_config(with_system("Q_out.-2 = 1, 2\n")).system_spec()
    with pytest.raises(ConfigError, match="outside i_lo..i_hi"):
        parse_config(with_system("Q_out.7 = 1e3\n")).system_spec()


# --- cavity verbs ---------------------------------------------------------------------


def test_malformed_key_exits_1(tmp_path, capsys):
    rc, _ = run(tmp_path, "steady", fixture_text("fig2").replace("lambda0_nm", "lambda0"))
    assert rc == cli.EXIT_CONFIG
    assert "lambda0" in capsys.readouterr().err


def test_missing_config_exits_1(tmp_path):
    assert cli.main(["steady", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_steady_fig2(tmp_path):
    rc, out = run(tmp_path, "steady", fixture_text("fig2"))
    assert rc == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["converged"] and s["residual"] < 1e-8
    assert all(s["populated_combs"][str(i)] for i in range(-2, 3))
    assert s["pump_depletion"] > 0
    with open(out / "steadystate.csv") as fh:
        assert len(list(csv.reader(fh))) == 19


def test_steady_linear_has_no_depletion(tmp_path):
    rc, out = run(tmp_path, "steady", edit(fixture_text("fig2"), beta0="beta0 = 0"))
    assert rc == 0
    assert abs(json.loads((out / "summary.json").read_text())["pump_depletion"]) < 1e-8


def test_steady_nonconvergence_exits_2(tmp_path, monkeypatch):
    real = cli.steady_state
    monkeypatch.setattr(cli, "steady_state", lambda m, seed=0: real(m, max_time=0.1 / m.kappa.min(), polish=False,
                                                                    diagnose=False))
    rc, out = run(tmp_path, "steady", fixture_text("fig2"))
    assert rc == cli.EXIT_UNCONVERGED
    assert not json.loads((out / "summary.json").read_text())["converged"]


def test_noise_linear_is_shot_noise(tmp_path):
    rc, out = run(tmp_path, "noise", edit(fixture_text("fig2"), beta0="beta0 = 0"))
    assert rc == 0
    _, db = read_matrix(out / "twinbeam_map.csv")
    dark = np.isnan(db)
    # undriven combs carry no light at beta0 = 0 and are masked
    assert dark.any() and not dark.all()
    np.testing.assert_allclose(db[~dark], 0.0, atol=1e-9)
    _, sigma = read_matrix(out / "covariance.csv")
    np.testing.assert_allclose(sigma, np.eye(36), atol=1e-10)
    assert (out / "twinbeam_map.png").stat().st_size > 0


def test_noise_fig2_and_reproducible(tmp_path):
    rc, out = run(tmp_path, "noise", fixture_text("fig2"))
    assert rc == 0
    labels, db = read_matrix(out / "twinbeam_map.csv")
    assert len(labels) == 18 and np.nanmin(db) <= -20
    first = {f: (out / f).read_bytes() for f in ("covariance.csv", "intensity_noise.csv", "twinbeam_map.csv")}
    rc = cli.main(["noise", "--config", str(tmp_path / "run.cfg"), "--out", str(out)])
    assert rc == 0
    assert all((out / f).read_bytes() == b for f, b in first.items())


def test_noise_instability_exits_3(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "stability", lambda drift: 12.5)
    rc, _ = run(tmp_path, "noise", fixture_text("fig2"))
    assert rc == cli.EXIT_UNSTABLE
    assert "spectral abscissa 12.5" in capsys.readouterr().err


def _bipartitions(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_entangle_linear_all_separable(tmp_path):
    rc, out = run(tmp_path, "entangle", edit(fixture_text("fig2"), beta0="beta0 = 0"))
    assert rc == 0
    rows = _bipartitions(out / "bipartitions.csv")
    np.testing.assert_allclose([float(r["nu_min"]) for r in rows], 1.0, atol=1e-10)


def test_entangle_fig2(tmp_path):
    rc, out = run(tmp_path, "entangle", fixture_text("fig2"))
    assert rc == 0
    rows = _bipartitions(out / "bipartitions.csv")
    assert len(rows) == 1000
    assert np.mean([float(r["nu_min"]) < 1 for r in rows]) > 0.5
    star = [r for r in rows if r["idler_star"] == "1"]
    assert len(star) == 1 and star[0]["labels"] == "T-1 T+0 T+1" and float(star[0]["nu_min"]) < 1
    assert json.loads((out / "entangle_summary.json").read_text())["n_modes"] == 18


# --- optimize -------------------------------------------------------------------------


def test_optimize_self_test(tmp_path):
    rc, out = run(tmp_path, "optimize", "[optimize]\nself_test = true\n")
    assert rc == 0
    assert json.loads((out / "opt_result.json").read_text())["max_error"] < 1e-3


def test_optimize_budget_zero_exits_1(tmp_path):
    rc, _ = run(tmp_path, "optimize", edit(fixture_text("fig4_opt1"), budget="budget = 0"))
    assert rc == cli.EXIT_CONFIG


def test_optimize_deterministic(tmp_path):
    text = edit(fixture_text("fig4_opt1"), budget="budget = 6", n_starts="n_starts = 2")
    rc, out = run(tmp_path, "optimize", text, "--seed", "7")
    assert rc == 0
    trace = (out / "opt_trace.csv").read_bytes()
    res = json.loads((out / "opt_result.json").read_text())
    assert res["n_evaluations"] == 6 and res["seed"] == 7
    assert res["best_value_db"] <= res["initial_value_db"]
    for tag in ("before", "after"):
        assert (out / f"twinbeam_{tag}.csv").exists()
    rc = cli.main(["optimize", "--config", str(tmp_path / "run.cfg"), "--out", str(out), "--seed", "7"])
    assert rc == 0 and (out / "opt_trace.csv").read_bytes() == trace


# --- pulse and qsa --------------------------------------------------------------------


def test_pulse_linear_reproduces_input_spectra(tmp_path):
    rc, out = run(tmp_path, "pulse", edit(TINY_PULSE, beta_L="beta_L = 0", gamma_L="gamma_L = 0"))
    assert rc == 0
    with open(out / "spectra.csv") as fh:
        rows = list(csv.DictReader(fh))
    z = np.array([float(r["z_m"]) for r in rows])
    psd = np.array([float(r["psd_w"]) for r in rows])
    zs = np.unique(z)
    np.testing.assert_allclose(zs, [0, 2e-4, 5e-4])
    ref = psd[z == 0]
    assert ref.max() > 0
    for zk in zs[1:]:
        np.testing.assert_allclose(psd[z == zk], ref, rtol=1e-9, atol=1e-12 * ref.max())


def test_qsa_outputs_and_symplectic_report(tmp_path):
    rc, out = run(tmp_path, "qsa", TINY_PULSE)
    assert rc == 0
    s = json.loads((out / "qsa_summary.json").read_text())
    assert s["max_symplectic_defect"] < 1e-6
    assert [c["z_m"] for c in s["checkpoints"]] == pytest.approx([2e-4, 5e-4])
    axes = json.loads((out / "qsa_bins.json").read_text())
    assert [a["count"] for a in axes["frequency"]] == [99, 99, 99]
    assert [a["count"] for a in axes["time"]] == [125, 125, 125]
    for dom in ("frequency", "time"):
        labels, db = read_matrix(out / f"qsa_{dom}_z0.05cm.csv")
        assert db.shape == (len(labels), len(labels))
        assert (out / f"qsa_{dom}_z0.05cm.png").exists()


def test_qsa_memory_refusal_exits_4(tmp_path, capsys):
    rc, _ = run(tmp_path, "qsa", edit(TINY_PULSE, memory_cap_gib="memory_cap_gib = 0.001"))
    assert rc == cli.EXIT_GRID
    assert "M<=" in capsys.readouterr().err


def test_output_directory_lock(tmp_path):
    out = tmp_path / "steady"
    out.mkdir()
    (out / cli.LOCK_NAME).write_text("1")
    rc, _ = run(tmp_path, "steady", fixture_text("fig2"))
    assert rc == cli.EXIT_CONFIG
    (out / cli.LOCK_NAME).unlink()
    rc, _ = run(tmp_path, "steady", fixture_text("fig2"))
    assert rc == 0 and not (out / cli.LOCK_NAME).exists()
