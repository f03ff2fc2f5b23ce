import math

import numpy as np
import pytest
from scipy.constants import hbar

from multicomb.pulse import (
    GridError, PulseGrid, PulsePhysics, PulseState, StepSizeError, build_initial_pulses, fwhm,
    gaussian_peak_power, photon_ledger, propagate, spectrum,
)

FLAT = "constant:2.2"  # dispersionless material


def cw_state(phys, grid, amps):
    f = np.zeros((phys.n_envelopes, grid.M), complex)
    for comb, a in amps.items():
        f[phys.envelope_index(comb)] = a
    return PulseState(f, grid, phys.carriers, phys.labels)


def test_peak_power_and_energy():
    assert gaussian_peak_power(1.0, 200e3, 210e-15) == pytest.approx(22.4e6, rel=2e-3)
    assert gaussian_peak_power(1.0, 200e3, 210e-15) == pytest.approx(0.94 * 5e-6 / 210e-15, rel=1e-3)
    phys = PulsePhysics()
    s = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 1.0, 0.01)
    e = s.energies()
    assert e[phys.envelope_index(0)] == pytest.approx(5e-6, rel=1e-9)
    assert e[phys.envelope_index(1)] == pytest.approx(50e-9, rel=1e-9)
    assert np.max(np.abs(s.fields[phys.envelope_index(0)]) ** 2) == pytest.approx(gaussian_peak_power(1, 200e3, 210e-15), rel=1e-3)
    zero = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 1.0, 0.0)
    assert not np.any(zero.fields[phys.envelope_index(1)])


def test_grid_refusals():
    phys = PulsePhysics()
    with pytest.raises(GridError):
        PulseGrid(100, 3e-12)
    with pytest.raises(GridError):
        build_initial_pulses(phys, PulseGrid(64, 3e-12))  # 4.5 samples per FWHM
    with pytest.raises(GridError):
        build_initial_pulses(phys, PulseGrid(256, 1.5e-12))  # window < 10 durations
    s = build_initial_pulses(phys, PulseGrid(512, 3e-12))
    with pytest.raises(GridError):
        propagate(phys, s, 1e-5, 1e-4)  # idler band reaches negative frequencies


def test_linear_dispersionless_identity():
    phys = PulsePhysics(beta_L=0, gamma_L=0, dispersion=FLAT)
    s = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 1.0, 0.5)
    out = propagate(phys, s, 1e-3, 0.05)
    # float cancellation in k(w + W) - k(w) - W k' leaves ~1e-10 rad of phase
    np.testing.assert_allclose(out.fields, s.fields, atol=1e-9 * np.abs(s.fields).max())


def test_spm_exact():
    phys = PulsePhysics(beta_L=0, self_steepening=False, dispersion=FLAT)
    s = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 1.0, 1.0)
    L = 0.1
    out = propagate(phys, s, 1e-3, L)
    gam = phys.kerr[:, None]
    ref = s.fields * np.exp(1j * gam * np.abs(s.fields) ** 2 * L)
    np.testing.assert_allclose(np.abs(out.fields), np.abs(s.fields), atol=1e-9 * np.abs(s.fields).max())
    assert np.max(np.abs(out.fields - ref)) <= 1e-8 * np.max(np.abs(ref))
    # the phase is not trivially small
    assert np.max(gam * np.abs(s.fields) ** 2 * L) > 0.5


def test_xpm_exact():
    phys = PulsePhysics(beta_L=0, self_steepening=False, dispersion=FLAT, xpm=True)
    s = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 1.0, 1.0)
    L = 0.05
    out = propagate(phys, s, 1e-3, L)
    P = np.abs(s.fields) ** 2
    phase = phys.kerr[:, None] * (P + 2 * (P.sum(axis=0) - P)) * L
    assert np.max(np.abs(out.fields - s.fields * np.exp(1j * phase))) <= 1e-8 * np.abs(s.fields).max()


@pytest.mark.parametrize("dkL", [0.0, 3.0, 7.0])
def test_undepleted_dfg_sinc(dkL):
    grid = PulseGrid(16, 1e-12)
    L = 1e-3
    phys = PulsePhysics(gamma_L=0, dispersion=FLAT, self_steepening=False, qpm={1: -dkL / L}, length=L)
    a0, a1 = 40.0, 20.0
    s = cw_state(phys, grid, {0: a0, 1: a1})
    out = propagate(phys, s, L / 200, L)
    kT = phys.kappa[0]
    assert kT * a0 * L < 0.05  # small-gain regime
    ref = kT * a0 * a1 * L * abs(np.sinc(dkL / 2 / np.pi))
    got = np.abs(out.fields[0])
    if dkL == 7.0:
        assert np.all(got < 0.5 * kT * a0 * a1 * L)
    np.testing.assert_allclose(got, ref, rtol=0.02, atol=0.02 * kT * a0 * a1 * L)


def _smooth_case():
    phys = PulsePhysics(frame="envelope", beta_L=6e-18, self_steepening=True)
    s = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 1.0, 0.3)
    return phys, s


def test_split_step_second_order():
    phys, s = _smooth_case()
    L = 4e-3
    ref = propagate(phys, s, L / 512, L).fields
    errs = []
    for n in (16, 32, 64):
        errs.append(np.linalg.norm(propagate(phys, s, L / n, L).fields - ref))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((orders > 1.8) & (orders < 2.2)), orders


def _scale(state):
    N = state.energies() / (hbar * state.carriers)
    return float(np.sum(N * (1 + np.abs([0] + [int(l) for l in state.labels[1:]]))))


@pytest.mark.parametrize("steep", [False, True])
def test_chi2_ledgers_conserved(steep):
    phys = PulsePhysics(gamma_L=0, frame="envelope", self_steepening=steep)
    s = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 1.0, 0.01)
    weighting = "absolute" if steep else "carrier"
    outs = propagate(phys, s, 5e-5, 0.02, checkpoints=[0.005, 0.01, 0.02])
    n0, q0 = photon_ledger(s, weighting)
    sc = _scale(s)
    for o in outs:
        n, q = photon_ledger(o, weighting)
        assert abs(n - n0) <= 1e-6 * n0
        assert abs(q - q0) <= 1e-6 * sc
    # strong conversion actually happened
    e = outs[-1].energies()
    assert e[phys.envelope_index(-2)] > 1e-3 * e.sum()
    if not steep:
        assert outs[-1].energies().sum() == pytest.approx(s.energies().sum(), rel=1e-9)


@pytest.mark.parametrize("steep", [False, True])
def test_kerr_only_conserves_each_envelope(steep):
    phys = PulsePhysics(beta_L=0, frame="pump", self_steepening=steep, gamma_L=1e-21)
    s = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 1.0, 1.0)
    out = propagate(phys, s, 2e-4, 0.05)
    w = "absolute" if steep else "carrier"
    for k in range(phys.n_envelopes):
        sub_in = s.with_fields(np.where(np.arange(phys.n_envelopes)[:, None] == k, s.fields, 0))
        sub_out = out.with_fields(np.where(np.arange(phys.n_envelopes)[:, None] == k, out.fields, 0))
        for a, b in zip(photon_ledger(sub_in, w), photon_ledger(sub_out, w)):
            assert b == pytest.approx(a, rel=1e-9, abs=1e-9 * max(abs(a), 1.0))


def test_parseval_and_zero_spectrum():
    phys = PulsePhysics()
    s = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 1.0, 0.0)
    f, psd = spectrum(s)
    np.testing.assert_allclose(psd.sum(axis=1) * s.grid.T_w, s.energies(), rtol=1e-12, atol=1e-30)
    assert np.all(psd[phys.envelope_index(1)] == 0)
    assert np.all(np.diff(f, axis=1) > 0)
    assert f[phys.envelope_index(0)][128] == pytest.approx(phys.omega0 / (2 * np.pi))


def test_time_bandwidth_product():
    phys = PulsePhysics()
    grid = PulseGrid(4096, 40e-12)
    s = build_initial_pulses(phys, grid, 1.0, 0.0)
    e = phys.envelope_index(0)
    dt_fwhm = fwhm(grid.t, np.abs(s.fields[e]) ** 2)
    f, psd = spectrum(s)
    df = fwhm(f[e], psd[e])
    assert dt_fwhm == pytest.approx(210e-15, rel=1e-3)
    assert dt_fwhm * df == pytest.approx(2 * math.log(2) / math.pi, rel=0.01)
    assert dt_fwhm * df == pytest.approx(0.441, rel=0.01)


def test_vacuum_ledger():
    phys = PulsePhysics()
    s = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 0.0, 0.0)
    assert photon_ledger(s) == (0.0, 0.0)
    assert photon_ledger(s, "absolute") == (0.0, 0.0)


def test_grid_shift_invariance():
    phys = PulsePhysics(frame="pump", xpm=True)
    grid = PulseGrid(256, 3.072e-12)
    s = build_initial_pulses(phys, grid, 1.0, 0.05)
    shift = 37
    moved = s.with_fields(np.roll(s.fields, shift, axis=1))
    a = propagate(phys, s, 5e-5, 2e-3)
    b = propagate(phys, moved, 5e-5, 2e-3)
    np.testing.assert_allclose(b.fields, np.roll(a.fields, shift, axis=1), atol=1e-10 * np.abs(a.fields).max())


def test_step_size_refusal():
    phys = PulsePhysics(frame="envelope")
    s = build_initial_pulses(phys, PulseGrid(256, 3.072e-12), 1.0, 0.01)
    with pytest.raises(StepSizeError) as err:
        propagate(phys, s, 1e-3, 1e-2)
    assert 0 < err.value.suggested_dz < 1e-3
    out = propagate(phys, s, err.value.suggested_dz, 2 * err.value.suggested_dz)
    assert np.all(np.isfinite(out.fields))


def test_checkpoints_match_direct_runs():
    phys, s = _smooth_case()
    outs = propagate(phys, s, 2e-4, 3e-3, checkpoints=[1e-3, 3e-3])
    assert [o.z for o in outs] == [1e-3, 3e-3]
    direct = propagate(phys, s, 2e-4, 1e-3)
    np.testing.assert_allclose(outs[0].fields, direct.fields, atol=1e-12 * np.abs(direct.fields).max())


def test_nonfinite_state_rejected():
    phys = PulsePhysics()
    grid = PulseGrid(256, 3.072e-12)
    f = np.zeros((phys.n_envelopes, grid.M), complex)
    f[0, 0] = np.nan
    with pytest.raises(ValueError):
        PulseState(f, grid, phys.carriers, phys.labels)
