"""Coupled envelope propagation for the single-pass ultrafast cascade.

Envelopes ``A_e(t)`` (sqrt(W)) are carried for the idler pulse and the
subcomb pulses ``i_lo..i_hi`` on one shared periodic time grid. Envelope
order is ``[T, i_lo, ..., i_hi]``, matching the cavity mode order.

Per step of length ``h`` the propagator applies (symmetric splitting)::

    L(h/2)  K(h/2)  X(h)  K(h/2)  L(h/2)

``L`` is the exact all-order dispersion step in the frequency domain, ``K``
the exact Kerr phase rotation and ``X`` the three-wave mixing step, solved
with the implicit midpoint rule. With self-steepening enabled, the shock
operator ``1 + Omega/omega_e`` multiplies every nonlinear term, and Kerr is
folded into the midpoint step. Every substep is the flow, or a symplectic
discretisation, of a Hamiltonian. The step map therefore preserves the
canonical structure that the sensitivity analysis relies on.

Fourier convention: ``A(t) = fft(A~)`` and ``A~ = ifft(A)``. A component at
offset ``Omega`` oscillates as ``exp(-i Omega t)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.fft as sfft
from scipy.constants import c as C_LIGHT, hbar

from .dispersion import DispersionRangeError, get_dispersion, inverse_group_velocity, wavenumber

__all__ = [
    "GridError",
    "StepSizeError",
    "PropagationError",
    "PulseGrid",
    "PulsePhysics",
    "PulseState",
    "SplitStepper",
    "gaussian_peak_power",
    "build_initial_pulses",
    "propagate",
    "propagate_batch",
    "segment_steps",
    "spectrum",
    "photon_ledger",
    "fwhm",
    "MAX_NONLINEAR_PHASE",
]

MAX_NONLINEAR_PHASE = 0.05  # rad per step
# energy-to-peak factor of a Gaussian intensity profile, 2 sqrt(ln2 / pi) ~ 0.94
GAUSSIAN_PEAK_FACTOR = 2.0 * math.sqrt(math.log(2.0) / math.pi)
_FP_TOL = 1e-14
_FP_MAX_ITER = 60


class GridError(ValueError):
    """Grid cannot represent the requested pulses or frequencies."""


class StepSizeError(ValueError):
    """Propagation step too long for the nonlinear phase budget."""

    def __init__(self, msg, suggested_dz):
        super().__init__(msg)
        self.suggested_dz = suggested_dz


class PropagationError(RuntimeError):
    """Non-finite fields or a failed implicit solve during propagation."""

    def __init__(self, msg, z):
        super().__init__(msg)
        self.z = z


@dataclass(frozen=True)
class PulseGrid:
    """Periodic time grid of ``M`` samples spanning ``T_w`` seconds."""

    M: int
    T_w: float

    def __post_init__(self):
        if self.M < 2 or self.M & (self.M - 1):
            raise GridError(f"M must be a power of two, got {self.M}")
        if not self.T_w > 0:
            raise GridError("time window must be positive")

    @property
    def dt(self) -> float:
        return self.T_w / self.M

    @property
    def t(self) -> np.ndarray:
        return (np.arange(self.M) - self.M // 2) * self.dt

    @property
    def Omega(self) -> np.ndarray:
        """Angular frequency offsets in FFT order (rad/s)."""
        return 2.0 * np.pi * np.fft.fftfreq(self.M, self.dt)


@dataclass(frozen=True)
class PulsePhysics:
    """Material and coupling parameters of the crystal.

    Coupling rates scale with carrier frequency: ``kappa_e = beta_L omega_e``
    (1/(m sqrt(W))) and ``gamma_e = Gamma_L omega_e`` (1/(m W)).
    ``qpm="auto"`` adds a grating that cancels every carrier mismatch;
    ``None`` leaves the raw mismatch; a mapping ``{i: K}`` subtracts ``K``
    (1/m) from the mismatch of the pair (i-1 -> i). ``frame="pump"`` removes
    the pump group delay from every envelope; ``"envelope"`` removes each
    envelope's own group delay (no temporal walk-off).
    """

    beta_L: float = 6e-17
    gamma_L: float = 1e-22
    length: float = 0.1
    self_steepening: bool = True
    xpm: bool = False
    dispersion: str = "lithium_niobate_e"
    lambda0: float = 465e-9
    omegaT: float = 2 * np.pi * 73.7e12
    i_lo: int = -2
    i_hi: int = 2
    qpm: object = "auto"
    frame: str = "pump"

    def __post_init__(self):
        if self.beta_L < 0 or self.gamma_L < 0:
            raise ValueError("nonlinear coefficients must be >= 0")
        if not self.length > 0:
            raise ValueError("crystal length must be > 0")
        if not (self.i_lo <= 0 and self.i_hi >= 1):
            raise ValueError("envelope range must contain the pump (i=0) and seed (i=1)")
        if self.frame not in ("pump", "envelope"):
            raise ValueError("frame must be 'pump' or 'envelope'")
        get_dispersion(self.dispersion)

    @property
    def omega0(self) -> float:
        return 2 * np.pi * C_LIGHT / self.lambda0

    @property
    def subcombs(self) -> range:
        return range(self.i_lo, self.i_hi + 1)

    @property
    def n_envelopes(self) -> int:
        return self.i_hi - self.i_lo + 2

    @property
    def labels(self) -> tuple[str, ...]:
        return ("T",) + tuple(str(i) for i in self.subcombs)

    @property
    def carriers(self) -> np.ndarray:
        return np.array([self.omegaT] + [self.omega0 - i * self.omegaT for i in self.subcombs])

    def envelope_index(self, comb) -> int:
        if comb == "T":
            return 0
        i = int(comb)
        if not self.i_lo <= i <= self.i_hi:
            raise ValueError(f"no envelope for subcomb {i}")
        return 1 + i - self.i_lo

    @property
    def triplets(self) -> list[tuple[int, int, int]]:
        """(high, low, subcomb index of low) for each pair i-1 -> i + T."""
        return [(self.envelope_index(i - 1), self.envelope_index(i), i) for i in range(self.i_lo + 1, self.i_hi + 1)]

    def mismatch(self) -> np.ndarray:
        """Residual carrier mismatch k_high - k_low - k_T - K_qpm per triplet (1/m)."""
        w = self.carriers
        k = wavenumber(self.dispersion, w)
        out = []
        for hi, lo, i in self.triplets:
            dk = k[hi] - k[lo] - k[0]
            if self.qpm == "auto":
                dk = 0.0
            elif isinstance(self.qpm, dict):
                dk -= float(self.qpm.get(i, 0.0))
            elif self.qpm is not None:
                raise ValueError("qpm must be 'auto', None or a mapping {i: K}")
            out.append(dk)
        return np.array(out, dtype=float)

    @property
    def kappa(self) -> np.ndarray:
        return self.beta_L * self.carriers

    @property
    def kerr(self) -> np.ndarray:
        return self.gamma_L * self.carriers


@dataclass(frozen=True)
class PulseState:
    """Envelopes on a shared grid. ``fields`` has shape (E, M), order [T, i_lo..i_hi]."""

    fields: np.ndarray
    grid: PulseGrid
    carriers: np.ndarray
    labels: tuple
    z: float = 0.0

    def __post_init__(self):
        f = np.array(self.fields, dtype=complex)
        if f.ndim != 2 or f.shape[1] != self.grid.M or f.shape[0] != len(self.carriers):
            raise ValueError(f"fields must have shape (E, M) = ({len(self.carriers)}, {self.grid.M})")
        if not np.all(np.isfinite(f)):
            raise ValueError("non-finite field samples")
        f.setflags(write=False)
        object.__setattr__(self, "fields", f)
        c = np.array(self.carriers, dtype=float)
        c.setflags(write=False)
        object.__setattr__(self, "carriers", c)

    @property
    def n_envelopes(self) -> int:
        return self.fields.shape[0]

    def energies(self) -> np.ndarray:
        """Pulse energy per envelope (J)."""
        return np.sum(np.abs(self.fields) ** 2, axis=1) * self.grid.dt

    def with_fields(self, fields, z=None) -> "PulseState":
        return PulseState(fields, self.grid, self.carriers, self.labels, self.z if z is None else z)


def gaussian_peak_power(avg_power: float, f_rep: float, tau_fwhm: float) -> float:
    """Peak power of a Gaussian pulse train, ~0.94 E / tau with E = P_avg / f_rep."""
    return GAUSSIAN_PEAK_FACTOR * avg_power / (f_rep * tau_fwhm)


def build_initial_pulses(physics: PulsePhysics, grid: PulseGrid, pump_avg: float = 1.0, seed_avg: float = 1.0,
                         f_rep: float = 200e3, tau_fwhm: float = 210e-15, shape: str = "gaussian",
                         delay: float = 0.0) -> PulseState:
    """Pump (i=0) and seed (i=1) pulses centred at ``delay``; other envelopes empty."""
    if tau_fwhm / grid.dt < 16:
        raise GridError(f"grid under-resolves the pulse: {tau_fwhm / grid.dt:.1f} samples per FWHM (< 16)")
    if grid.T_w < 10 * tau_fwhm:
        raise GridError(f"window {grid.T_w:.3g} s shorter than 10 pulse durations")
    if pump_avg < 0 or seed_avg < 0:
        raise ValueError("average powers must be >= 0")
    t = grid.t - delay
    if shape == "gaussian":
        profile = np.exp(-2.0 * math.log(2.0) * (t / tau_fwhm) ** 2)
        peak = GAUSSIAN_PEAK_FACTOR
    elif shape == "sech":
        t0 = tau_fwhm / (2.0 * math.acosh(math.sqrt(2.0)))
        profile = 1.0 / np.cosh(t / t0)
        peak = tau_fwhm / (2.0 * t0)  # P_pk = E / (2 t0)
    else:
        raise ValueError("shape must be 'gaussian' or 'sech'")
    fields = np.zeros((physics.n_envelopes, grid.M), dtype=complex)
    for comb, avg in ((0, pump_avg), (1, seed_avg)):
        p_pk = peak * avg / (f_rep * tau_fwhm)
        fields[physics.envelope_index(comb)] = math.sqrt(p_pk) * profile
    return PulseState(fields, grid, physics.carriers, physics.labels, 0.0)


# --- split-step machinery -------------------------------------------------------------


def _expand(x, ndim):
    """Append singleton axes so (M, E) tables broadcast over trailing batch axes."""
    return x.reshape(x.shape + (1,) * (ndim - x.ndim))


class SplitStepper:
    """Step operators acting on arrays shaped (M, E, ...) with time on axis 0.

    Trailing axes carry independent batches of fields.
    """

    def __init__(self, physics: PulsePhysics, grid: PulseGrid, workers: int | None = None):
        self.physics = physics
        self.grid = grid
        self.workers = workers
        w = physics.carriers
        Om = grid.Omega
        absw = w[None, :] + Om[:, None]  # (M, E)
        if np.any(absw <= 0):
            raise GridError("grid half-width exceeds a carrier frequency (negative absolute frequencies)")
        try:
            k = wavenumber(physics.dispersion, absw)
            k0 = wavenumber(physics.dispersion, w)
            if physics.frame == "pump":
                k1 = np.full(len(w), inverse_group_velocity(physics.dispersion, physics.omega0))
            else:
                k1 = np.asarray(inverse_group_velocity(physics.dispersion, w), dtype=float)
        except DispersionRangeError as err:
            raise GridError(f"carrier +/- grid half-width outside the dispersion window: {err}") from None
        self.abs_omega = absw
        self.dispersion_op = k - k0[None, :] - Om[:, None] * k1[None, :]  # (M, E) 1/m
        self.shock = absw / w[None, :] if physics.self_steepening else None
        self.kappa = physics.kappa
        self.kerr = physics.kerr
        self.triplets = physics.triplets
        self.dk = physics.mismatch()
        E = physics.n_envelopes
        self.xpm_weights = np.where(np.eye(E, dtype=bool), 1.0, 2.0 if physics.xpm else 0.0)
        self.has_kerr = bool(np.any(self.kerr > 0))
        self.has_chi2 = bool(np.any(self.kappa > 0)) and len(self.triplets) > 0

    # fft helpers on axis 0
    def _fft(self, x):
        return sfft.fft(x, axis=0, workers=self.workers)

    def _ifft(self, x):
        return sfft.ifft(x, axis=0, workers=self.workers)

    def linear(self, Y, h):
        """Exact dispersion over length ``h``; complex-linear, so tangents use it too."""
        if h == 0.0:
            return Y
        ph = np.exp(1j * self.dispersion_op * h)
        return self._fft(self._ifft(Y) * _expand(ph, Y.ndim))

    def apply_shock(self, X):
        if self.shock is None:
            return X
        return self._fft(self._ifft(X) * _expand(self.shock, X.ndim))

    # --- nonlinear vector field -------------------------------------------------------

    def chi2(self, Y, z):
        out = np.zeros_like(Y)
        AT = Y[:, 0]
        for (hi, lo, _), dk in zip(self.triplets, self.dk):
            ph = np.exp(1j * dk * z)
            Ah, Al = Y[:, hi], Y[:, lo]
            out[:, lo] += 1j * self.kappa[lo] * ph * Ah * np.conj(AT)
            out[:, 0] += 1j * self.kappa[0] * ph * Ah * np.conj(Al)
            out[:, hi] += 1j * self.kappa[hi] * np.conj(ph) * Al * AT
        return out

    def kerr_rate(self, Y):
        """Kerr phase rate gamma_e (|A_e|^2 + x 2 sum_{f!=e} |A_f|^2), shape of Y."""
        P = np.abs(Y) ** 2
        tot = np.einsum("ef,mf...->me...", self.xpm_weights, P)
        return _expand(self.kerr[None, :], Y.ndim) * tot

    def field(self, Y, z, with_kerr):
        out = self.chi2(Y, z) if self.has_chi2 else np.zeros_like(Y)
        if with_kerr and self.has_kerr:
            out = out + 1j * self.kerr_rate(Y) * Y
        return self.apply_shock(out)

    def field_coeffs(self, Y, z, with_kerr):
        """Local (a, b), shape (M, E, E), with N'(Y)[d] = a d + b conj(d) before the shock operator."""
        M, E = Y.shape
        a = np.zeros((M, E, E), dtype=complex)
        b = np.zeros((M, E, E), dtype=complex)
        if self.has_chi2:
            AT = Y[:, 0]
            for (hi, lo, _), dk in zip(self.triplets, self.dk):
                ph = np.exp(1j * dk * z)
                Ah, Al = Y[:, hi], Y[:, lo]
                kl, kT, kh = self.kappa[lo], self.kappa[0], self.kappa[hi]
                a[:, lo, hi] += 1j * kl * ph * np.conj(AT)
                b[:, lo, 0] += 1j * kl * ph * Ah
                a[:, 0, hi] += 1j * kT * ph * np.conj(Al)
                b[:, 0, lo] += 1j * kT * ph * Ah
                a[:, hi, lo] += 1j * kh * np.conj(ph) * AT
                a[:, hi, 0] += 1j * kh * np.conj(ph) * Al
        if with_kerr and self.has_kerr:
            W = self.xpm_weights
            g = self.kerr
            rate = self.kerr_rate(Y)
            # d(rate_e A_e) = rate_e dA_e + i g_e A_e sum_f W_ef (A_f* dA_f + A_f dA_f*)
            a += 1j * g[None, :, None] * W[None] * Y[:, :, None] * np.conj(Y)[:, None, :]
            b += 1j * g[None, :, None] * W[None] * Y[:, :, None] * Y[:, None, :]
            idx = np.arange(E)
            a[:, idx, idx] += 1j * rate
        return a, b

    # --- substeps on the mean field ---------------------------------------------------

    def kerr_step(self, Y, h):
        """Exact Kerr rotation; |A_e| is invariant, so the phase is explicit."""
        return Y * np.exp(1j * self.kerr_rate(Y) * h)

    def midpoint(self, Y0, z, h, with_kerr):
        """Implicit midpoint for dY/dz = S N(Y, z). Returns (Y1, Ymid)."""
        zm = z + 0.5 * h
        Y1 = Y0 + h * self.field(Y0, z, with_kerr)
        scale = max(float(np.max(np.abs(Y0))), 1e-300)
        for _ in range(_FP_MAX_ITER):
            Ym = 0.5 * (Y0 + Y1)
            Y_new = Y0 + h * self.field(Ym, zm, with_kerr)
            err = float(np.max(np.abs(Y_new - Y1)))
            Y1 = Y_new
            if err <= _FP_TOL * scale:
                break
        else:
            raise PropagationError(f"implicit midpoint did not converge at z={z:.6g} m (reduce dz)", z)
        return Y1, 0.5 * (Y0 + Y1)

    def nonlinear_rate(self, Y) -> float:
        """Bound on the local nonlinear rate (1/m) used for the step-size check."""
        A = np.abs(Y)
        r = np.zeros(A.shape[0])
        k = self.kappa
        for hi, lo, _ in self.triplets:
            r = np.maximum(r, np.sqrt(k[lo] * k[0]) * A[:, hi])
            r = np.maximum(r, np.sqrt(k[hi] * k[lo]) * A[:, 0])
            r = np.maximum(r, np.sqrt(k[hi] * k[0]) * A[:, lo])
        r = r + np.max(self.kerr_rate(Y), axis=1)
        return float(np.max(r)) if r.size else 0.0

    def step(self, Y, z, h):
        """One symmetric step; returns (Y, record) with the states the nonlinear substeps were linearized at."""
        Y = self.linear(Y, 0.5 * h)
        rec = {}
        if self.shock is None:
            if self.has_kerr:
                rec["k1"] = Y
                Y = self.kerr_step(Y, 0.5 * h)
            if self.has_chi2:
                Y, rec["mid"] = self.midpoint(Y, z, h, with_kerr=False)
            if self.has_kerr:
                rec["k2"] = Y
                Y = self.kerr_step(Y, 0.5 * h)
        elif self.has_chi2 or self.has_kerr:
            Y, rec["mid"] = self.midpoint(Y, z, h, with_kerr=True)
        Y = self.linear(Y, 0.5 * h)
        if not np.all(np.isfinite(Y)):
            raise PropagationError(f"non-finite field at z={z + h:.6g} m", z + h)
        return Y, rec

    def check_step(self, Y, dz):
        rate = self.nonlinear_rate(Y)
        if rate * dz > MAX_NONLINEAR_PHASE:
            suggested = MAX_NONLINEAR_PHASE / rate
            raise StepSizeError(
                f"nonlinear phase per step {rate * dz:.3g} rad exceeds {MAX_NONLINEAR_PHASE}; use dz <= {suggested:.3g} m",
                suggested,
            )


def segment_steps(dz: float, z_start: float, z_targets: Sequence[float]) -> list[tuple[float, int]]:
    """Split each segment into equal steps no longer than ``dz``: [(h, n), ...]."""
    out = []
    z = z_start
    for zt in z_targets:
        seg = zt - z
        if seg < -1e-15:
            raise ValueError("checkpoints must be increasing")
        n = int(math.ceil(seg / dz - 1e-9)) if seg > 0 else 0
        out.append((seg / n if n else 0.0, n))
        z = zt
    return out


def propagate(physics: PulsePhysics, state: PulseState, dz: float, L: float | None = None,
              checkpoints: Sequence[float] | None = None, workers: int | None = None):
    """Propagate ``state`` to ``z = L`` (default: crystal length).

    Returns the final state, or a list of states at ``checkpoints`` (absolute
    z values, the last one being the end point) when given.
    """
    L = physics.length if L is None else L
    if not 0 < dz <= L - state.z + 1e-15:
        raise ValueError("need 0 < dz <= remaining length")
    stepper = SplitStepper(physics, state.grid, workers)
    Y = np.ascontiguousarray(state.fields.T)
    stepper.check_step(Y, dz)
    targets = list(checkpoints) if checkpoints is not None else [L]
    if targets and targets[-1] > L + 1e-12:
        raise ValueError("checkpoints beyond the crystal end")
    z = state.z
    outs = []
    for (h, n), zt in zip(segment_steps(dz, z, targets), targets):
        for _ in range(n):
            Y, _ = stepper.step(Y, z, h)
            z += h
        z = zt
        outs.append(state.with_fields(Y.T, z))
    return outs if checkpoints is not None else outs[-1]


def propagate_batch(physics: PulsePhysics, grid: PulseGrid, fields: np.ndarray, dz: float, L: float,
                    z0: float = 0.0, workers: int | None = None) -> np.ndarray:
    """Propagate a batch of field sets shaped (B, E, M); returns the same shape."""
    stepper = SplitStepper(physics, grid, workers)
    Y = np.ascontiguousarray(np.transpose(fields, (2, 1, 0)))
    ((h, n),) = segment_steps(dz, z0, [L])
    z = z0
    for _ in range(n):
        Y, _ = stepper.step(Y, z, h)
        z += h
    return np.transpose(Y, (2, 1, 0))


def spectrum(state: PulseState):
    """Per-envelope spectra on absolute frequency axes, sorted ascending.

    Returns ``(freq_hz, psd)`` with shape (E, M) each. ``psd`` is |A~|^2 in W
    per frequency bin, so ``psd.sum()`` of an envelope is its energy / T_w.
    """
    At = sfft.ifft(state.fields, axis=1)
    f_off = np.fft.fftfreq(state.grid.M, state.grid.dt)
    order = np.argsort(f_off)
    freq = state.carriers[:, None] / (2 * np.pi) + f_off[order][None, :]
    return freq, np.abs(At[:, order]) ** 2


def photon_ledger(state: PulseState, weighting: str = "carrier") -> tuple[float, float]:
    """(sum of subcomb photons, N_T - sum_i i N_i).

    ``weighting="carrier"`` counts energy / (hbar omega_e); ``"absolute"``
    weights each spectral bin by its own frequency, which is the invariant
    once self-steepening is on.
    """
    if weighting == "carrier":
        N = state.energies() / (hbar * state.carriers)
    elif weighting == "absolute":
        At = sfft.ifft(state.fields, axis=1)
        absw = state.carriers[:, None] + state.grid.Omega[None, :]
        N = state.grid.T_w * np.sum(np.abs(At) ** 2 / (hbar * absw), axis=1)
    else:
        raise ValueError("weighting must be 'carrier' or 'absolute'")
    labels = state.labels
    idx = [int(l) for l in labels[1:]]
    n_sub = float(np.sum(N[1:]))
    q = float(N[0] - np.sum(np.array(idx) * N[1:]))
    return n_sub, q


def fwhm(x: np.ndarray, y: np.ndarray) -> float:
    """Full width at half maximum of a single-peaked sampled profile (linear interpolation)."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    k = int(np.argmax(y))
    half = 0.5 * y[k]
    above = y >= half
    lo = k
    while lo > 0 and above[lo - 1]:
        lo -= 1
    hi = k
    while hi < len(y) - 1 and above[hi + 1]:
        hi += 1
    if lo == 0 or hi == len(y) - 1:
        raise ValueError("profile does not fall below half maximum inside the window")
    xl = np.interp(half, [y[lo - 1], y[lo]], [x[lo - 1], x[lo]])
    xr = np.interp(half, [y[hi + 1], y[hi]], [x[hi + 1], x[hi]])
    return float(xr - xl)
