import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from multicomb.fluct import CovarianceMatrix, output_amplitudes, output_covariance, symplectic_form
from multicomb.metrics import (
    NonPhysicalError, enumerate_bipartitions, intensity_noise, intensity_noise_all, ppt_min_symplectic,
    quadrature_noise, scan_bipartitions, symplectic_eigenvalues, total_bipartitions, twin_beam_map,
)


def tmsv(r):
    c, s = np.cosh(2 * r), np.sinh(2 * r)
    Z = np.diag([1.0, -1.0])
    return np.block([[c * np.eye(2), s * Z], [s * Z, c * np.eye(2)]])


def random_state(n, seed, thermal=True):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(2 * n, 2 * n)) * 0.4
    S = expm(symplectic_form(n) @ (H + H.T))
    nu = 1 + (rng.exponential(size=n) if thermal else np.zeros(n))
    return S @ np.diag(np.repeat(nu, 2)) @ S.T


def test_quadrature_noise_vacuum_and_squeezed():
    assert quadrature_noise(np.eye(2), 0, 0.3) == pytest.approx(1.0)
    r = 0.7
    sq = np.diag([np.exp(-2 * r), np.exp(2 * r)])
    assert quadrature_noise(sq, 0, 0.0) == pytest.approx(np.exp(-2 * r))
    for th in np.linspace(0, 3, 7):
        assert quadrature_noise(sq, 0, th) == pytest.approx(quadrature_noise(sq, 0, th + np.pi))


def test_intensity_noise_coherent_and_amplitude_squeezed():
    amps = np.array([3.0 * np.exp(0.4j), 2.0])
    assert intensity_noise(np.eye(4), amps, 0) == pytest.approx(0.0, abs=1e-12)
    # variance 1/2 along the mean-field direction of mode 0
    th = 0.4
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    blk = R @ np.diag([0.5, 2.0]) @ R.T
    sig = np.eye(4)
    sig[:2, :2] = blk
    assert intensity_noise(sig, amps, 0) == pytest.approx(10 * np.log10(0.5), abs=1e-12)
    assert intensity_noise(sig, amps, 0) == pytest.approx(-3.0103, abs=1e-4)


def test_dark_modes_masked():
    amps = np.array([1.0, 0.0])
    v = intensity_noise_all(np.eye(4), amps)
    assert v.mask[1] and not v.mask[0]
    assert np.isnan(intensity_noise(np.eye(4), amps, 1))
    tb = twin_beam_map(np.eye(4), amps)
    assert tb.mask[0, 1] and tb.mask[1, 0]


def test_twin_beam_limits():
    amps = np.array([2.0, 5.0 * 1j, 1.0])
    tb = twin_beam_map(np.eye(6), amps)
    off = ~np.eye(3, dtype=bool)
    np.testing.assert_allclose(tb.ratio[off], 1.0)
    np.testing.assert_allclose(tb.db[off], 0.0, atol=1e-12)
    # perfectly correlated intensity fluctuations of equal size
    u = np.zeros(4)
    u[0], u[2] = 1.0, 1.0
    sig = np.eye(4) * 1e-9 + 1e3 * np.outer(u, u)
    tb2 = twin_beam_map(sig, np.array([1.0, 1.0]))
    assert tb2.ratio[0, 1] < 1e-9


def test_ppt_vacuum():
    for sub in [(0,), (1,), (0, 2)]:
        assert ppt_min_symplectic(np.eye(8), sub).nu_min == pytest.approx(1.0, abs=1e-12)


def test_ppt_two_mode_squeezed_oracle():
    sig = tmsv(1.0)
    # independent route: eigenvalues of i Omega sigma~ built by hand
    pt = sig.copy()
    pt[1, :] *= -1
    pt[:, 1] *= -1
    Om = np.array([[0, 1, 0, 0], [-1, 0, 0, 0], [0, 0, 0, 1], [0, 0, -1, 0]], float)
    oracle = np.min(np.abs(np.linalg.eigvals(1j * Om @ pt)))
    assert oracle == pytest.approx(np.exp(-2), rel=1e-12)
    res = ppt_min_symplectic(sig, [0])
    assert abs(res.nu_min - np.exp(-2)) < 1e-10
    assert res.entangled and res.bitmask == 1


def test_ppt_product_state_not_entangled():
    sa, sb = random_state(2, 1), random_state(3, 2)
    sig = np.zeros((10, 10))
    sig[:4, :4], sig[4:, 4:] = sa, sb
    res = ppt_min_symplectic(sig, [0, 1])
    assert res.nu_min >= 1 - 1e-9 and not res.entangled


def test_ppt_rejects_unphysical():
    with pytest.raises(NonPhysicalError):
        ppt_min_symplectic(np.eye(4) * 0.5, [0])
    with pytest.raises(ValueError):
        ppt_min_symplectic(np.eye(4), [0, 1])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000), st.data())
def test_ppt_complement_symmetry(n, seed, data):
    sig = random_state(n, seed)
    k = data.draw(st.integers(1, n - 1))
    sub = tuple(sorted(data.draw(st.permutations(range(n)))[:k]))
    comp = tuple(m for m in range(n) if m not in sub)
    a = ppt_min_symplectic(sig, sub).nu_min
    b = ppt_min_symplectic(sig, comp).nu_min
    assert a == pytest.approx(b, rel=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000), st.floats(0, 2 * np.pi))
def test_twin_beam_phase_invariance(n, seed, phi):
    # rotating every mean field and every quadrature pair by the same phase
    sig = random_state(n, seed)
    rng = np.random.default_rng(seed)
    amps = rng.normal(size=n) + 1j * rng.normal(size=n)
    R = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    Rn = np.kron(np.eye(n), R)
    a = twin_beam_map(sig, amps)
    b = twin_beam_map(Rn @ sig @ Rn.T, amps * np.exp(1j * phi))
    np.testing.assert_allclose(a.ratio, b.ratio, rtol=1e-9, atol=1e-12)


def test_symplectic_eigenvalues_of_pure_state():
    np.testing.assert_allclose(symplectic_eigenvalues(random_state(4, 7, thermal=False)), 1.0, atol=1e-9)


def test_enumerate_small():
    assert enumerate_bipartitions(3) == [(0,), (1,), (2,)]
    four = enumerate_bipartitions(4)
    assert four == [(0,), (1,), (2,), (3,), (0, 1), (0, 2), (0, 3)]
    assert len(four) == 2 ** 3 - 1
    for n in range(2, 11):
        assert len(enumerate_bipartitions(n, limit=None)) == 2 ** (n - 1) - 1 == total_bipartitions(n)


def test_enumerate_eighteen_modes():
    assert total_bipartitions(18) == 2 ** 17 - 1 == 131071
    subs = enumerate_bipartitions(18, 1000, idler=[0, 1, 2])
    assert len(subs) == 1000
    assert (0, 1, 2) in subs
    assert all(len(s) <= 4 for s in subs)
    # idler subset appended when beyond the limit
    subs = enumerate_bipartitions(18, 10, idler=[3, 4, 5])
    assert len(subs) == 11 and subs[-1] == (3, 4, 5)


def test_linear_system_all_separable(fig2_linear):
    from multicomb.fluct import output_covariance
    m, ss, d = fig2_linear["model"], fig2_linear["steady"], fig2_linear["drift"]
    cov = output_covariance(d)
    res = scan_bipartitions(cov, enumerate_bipartitions(m.N, 200, idler=[0, 1, 2]))
    assert max(abs(r.nu_min - 1) for r in res) < 1e-10
    tb = twin_beam_map(cov, output_amplitudes(m, ss))
    off = ~np.eye(m.N, dtype=bool) & ~tb.mask
    np.testing.assert_allclose(tb.ratio[off], 1.0, atol=1e-9)
    # the undriven far subcombs are dark
    assert tb.mask.any()
