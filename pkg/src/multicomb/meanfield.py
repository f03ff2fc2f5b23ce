"""Mean-field dynamics of the cascaded three-wave-mixing cavity.

The equations of motion are written per process: a photon in mode ``high``
converts into one photon in ``low`` plus one idler photon,

    d a_idler/dt += r a_low^* a_high
    d a_low/dt   += r a_idler^* a_high
    d a_high/dt  -= r a_low a_idler

plus linear decay ``-(gamma + mu) a`` and forcing ``sqrt(2 gamma) s``. For
the comb system this is exactly the subcomb/idler equation pair with
``beta^+_{i-1,j-k,k} = beta^-_{ijk}``.

Integration uses an adaptive Dormand-Prince 8(5,3) scheme compiled with
numba; the Butcher tableau is taken from scipy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.constants import hbar
from scipy.integrate._ivp import dop853_coefficients as _dop

from .model import CavityModel

__all__ = [
    "FieldState",
    "Trajectory",
    "SteadyState",
    "IntegrationError",
    "rhs",
    "jacobian_blocks",
    "real_jacobian",
    "integrate",
    "linear_fixed_point",
    "initial_state",
    "steady_state",
    "conserved_quantities",
    "pump_depletion",
]

log = logging.getLogger(__name__)

_NS = _dop.N_STAGES
_A = np.ascontiguousarray(_dop.A[:_NS, :_NS])
_B = np.ascontiguousarray(_dop.B)
_E3 = np.ascontiguousarray(_dop.E3)
_E5 = np.ascontiguousarray(_dop.E5)

# integrator status codes
DONE, CONVERGED, UNDERFLOW, MAX_STEPS, NONFINITE = range(5)


class IntegrationError(RuntimeError):
    """Integration failed; ``state`` holds the last valid state."""

    def __init__(self, msg, t, state):
        super().__init__(msg)
        self.t = t
        self.state = state


@dataclass(frozen=True)
class FieldState:
    a: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        a = np.array(self.a, dtype=complex)
        if not np.all(np.isfinite(a)):
            raise ValueError("field state has non-finite entries")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    a: np.ndarray  # (n_samples, N)
    n_steps: int
    status: int


@dataclass(frozen=True)
class SteadyState:
    state: FieldState
    residual: float
    time: float
    converged: bool
    tolerance: float
    oscillation_frequency: float | None = None  # rad/s, set when not converged
    newton_polished: bool = False
    info: dict = field(default_factory=dict, compare=False)

    @property
    def a(self) -> np.ndarray:
        return self.state.a


@numba.njit(cache=True)
def _rhs_kernel(a, kappa, force, hi, lo, idl, rate, out):
    for m in range(a.shape[0]):
        out[m] = force[m] - kappa[m] * a[m]
    for n in range(rate.shape[0]):
        r = rate[n]
        p = a[hi[n]]
        s = a[lo[n]]
        t = a[idl[n]]
        out[idl[n]] += r * np.conj(s) * p
        out[lo[n]] += r * np.conj(t) * p
        out[hi[n]] -= r * s * t


@numba.njit(cache=True)
def _norm(x):
    s = 0.0
    for v in x:
        s += v.real * v.real + v.imag * v.imag
    return np.sqrt(s)


@numba.njit(cache=True)
def _dop853(y0, t0, t_out, rtol, atol, h0, max_steps, conv_tol, kscale,
            kappa, force, hi, lo, idl, rate, A, B, E3, E5):
    n = y0.shape[0]
    ns = B.shape[0]
    K = np.empty((ns + 1, n), dtype=np.complex128)
    ys = np.zeros((t_out.shape[0], n), dtype=np.complex128)
    y = y0.copy()
    ytmp = np.empty(n, dtype=np.complex128)
    ynew = np.empty(n, dtype=np.complex128)
    f = np.empty(n, dtype=np.complex128)
    _rhs_kernel(y, kappa, force, hi, lo, idl, rate, f)
    t = t0
    h = h0
    iout = 0
    while iout < t_out.shape[0] and t_out[iout] <= t0:
        ys[iout] = y
        iout += 1
    status = 0
    steps = 0
    residual = np.inf
    while iout < t_out.shape[0]:
        if steps >= max_steps:
            status = 3
            break
        target = t_out[iout]
        clipped = False
        h_saved = h
        if t + h >= target:
            h = target - t
            clipped = True
        min_step = 10.0 * np.abs(np.nextafter(t, np.inf) - t)
        if h < min_step:
            status = 2
            break
        K[0] = f
        for s in range(1, ns):
            for m in range(n):
                acc = 0j
                for q in range(s):
                    acc += A[s, q] * K[q, m]
                ytmp[m] = y[m] + h * acc
            _rhs_kernel(ytmp, kappa, force, hi, lo, idl, rate, K[s])
        for m in range(n):
            acc = 0j
            for q in range(ns):
                acc += B[q] * K[q, m]
            ynew[m] = y[m] + h * acc
        _rhs_kernel(ynew, kappa, force, hi, lo, idl, rate, K[ns])
        e5 = 0.0
        e3 = 0.0
        finite = True
        for m in range(n):
            sc = atol + max(np.abs(y[m]), np.abs(ynew[m])) * rtol
            a5 = 0j
            a3 = 0j
            for q in range(ns + 1):
                a5 += E5[q] * K[q, m]
                a3 += E3[q] * K[q, m]
            a5 /= sc
            a3 /= sc
            e5 += a5.real * a5.real + a5.imag * a5.imag
            e3 += a3.real * a3.real + a3.imag * a3.imag
            if not np.isfinite(ynew[m].real) or not np.isfinite(ynew[m].imag):
                finite = False
        if not finite:
            status = 4
            break
        if e5 == 0.0 and e3 == 0.0:
            err = 0.0
        else:
            err = h * e5 / np.sqrt((e5 + 0.01 * e3) * n)
        if err < 1.0:
            steps += 1
            t = target if clipped else t + h
            y[:] = ynew
            f[:] = K[ns]
            fac = 10.0 if err == 0.0 else min(10.0, 0.9 * err ** (-1.0 / 8.0))
            if clipped:
                ys[iout] = y
                iout += 1
                h = max(h * fac, h_saved)
            else:
                h = h * fac
            if conv_tol > 0.0:
                ny = _norm(y)
                if ny > 0.0:
                    residual = _norm(f) / (ny * kscale)
                    if residual < conv_tol:
                        status = 1
                        break
        else:
            h = h * max(0.2, 0.9 * err ** (-1.0 / 8.0))
    return ys, t, y, status, steps, residual, iout


def _params(model: CavityModel):
    return (
        np.ascontiguousarray(model.kappa, dtype=float),
        np.ascontiguousarray(model.drive_term, dtype=complex),
        np.ascontiguousarray(model.high, dtype=np.int64),
        np.ascontiguousarray(model.low, dtype=np.int64),
        np.ascontiguousarray(model.idler, dtype=np.int64),
        np.ascontiguousarray(model.rate, dtype=float),
    )


def rhs(model: CavityModel, a) -> np.ndarray:
    """Time derivative of the mean field at amplitudes ``a``."""
    a = np.ascontiguousarray(a, dtype=complex)
    out = np.empty_like(a)
    _rhs_kernel(a, *_params(model), out)
    return out


def jacobian_blocks(model: CavityModel, a):
    """Complex Jacobian split as d(da/dt) = A da + B da^*."""
    a = np.asarray(a, dtype=complex)
    N = model.N
    A = np.zeros((N, N), complex)
    B = np.zeros((N, N), complex)
    A[np.diag_indices(N)] = -model.kappa
    for p, s, t, r in zip(model.high, model.low, model.idler, model.rate):
        A[t, p] += r * np.conj(a[s])
        B[t, s] += r * a[p]
        A[s, p] += r * np.conj(a[t])
        B[s, t] += r * a[p]
        A[p, t] -= r * a[s]
        A[p, s] -= r * a[t]
    return A, B


def real_jacobian(model: CavityModel, a) -> np.ndarray:
    """Jacobian on interleaved (Re a_1, Im a_1, Re a_2, ...) coordinates."""
    A, B = jacobian_blocks(model, a)
    P, Q = A + B, A - B
    N = model.N
    M = np.empty((2 * N, 2 * N))
    M[0::2, 0::2] = P.real
    M[0::2, 1::2] = -Q.imag
    M[1::2, 0::2] = P.imag
    M[1::2, 1::2] = Q.real
    return M


def _initial_step(model, a0, t_span):
    f = rhs(model, a0)
    na = np.linalg.norm(a0)
    nf = np.linalg.norm(f)
    rate = np.max(model.kappa) if np.any(model.kappa > 0) else 0.0
    if nf > 0 and na > 0:
        rate = max(rate, nf / na)
    if rate == 0:
        return t_span
    return min(t_span, 1e-3 / rate)


def integrate(model: CavityModel, initial, t_end: float, rtol: float = 1e-10, atol: float = 1e-12,
              t_eval=None, max_steps: int = 50_000_000) -> Trajectory:
    """Integrate from ``initial`` (FieldState or array) to ``t_end``.

    Samples are returned at ``t_eval`` (default: start and end). Step-size
    underflow or non-finite values raise :class:`IntegrationError`.
    """
    if isinstance(initial, FieldState):
        a0, t0 = initial.a, initial.t
    else:
        a0, t0 = np.asarray(initial, dtype=complex), 0.0
    if not np.all(np.isfinite(a0)):
        raise ValueError("initial state must be finite")
    t_eval = np.array([t0, t_end] if t_eval is None else t_eval, dtype=float)
    if np.any(np.diff(t_eval) < 0) or t_eval[-1] < t0:
        raise ValueError("t_eval must be sorted and end after the initial time")
    h0 = _initial_step(model, a0, max(t_end - t0, 0.0) or 1.0)
    ys, t, y, status, steps, _, _ = _dop853(
        np.ascontiguousarray(a0, dtype=complex), float(t0), t_eval, rtol, atol, h0, max_steps,
        0.0, 1.0, *_params(model), _A, _B, _E3, _E5,
    )
    if status in (UNDERFLOW, NONFINITE, MAX_STEPS):
        why = {UNDERFLOW: "step size underflow", NONFINITE: "non-finite state", MAX_STEPS: "step budget exhausted"}
        raise IntegrationError(f"integration diverged at t={t:.6g}: {why[status]}", t, FieldState(y, t))
    return Trajectory(t=t_eval, a=ys, n_steps=int(steps), status=int(status))


def linear_fixed_point(model: CavityModel) -> np.ndarray:
    """sqrt(2 gamma) s / (gamma + mu); zero for undriven or lossless modes."""
    k = model.kappa
    out = np.zeros(model.N, complex)
    ok = k > 0
    out[ok] = model.drive_term[ok] / k[ok]
    return out


def initial_state(model: CavityModel, seed_photons: float = 1e-6, seed: int = 0) -> np.ndarray:
    """Linear fixed point plus a small fixed-phase seed in every mode."""
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, model.N)
    return linear_fixed_point(model) + np.sqrt(seed_photons) * np.exp(1j * phases)


def _residual(model, a, kscale):
    na = np.linalg.norm(a)
    if na == 0:
        return 0.0 if np.linalg.norm(rhs(model, a)) == 0 else np.inf
    return float(np.linalg.norm(rhs(model, a)) / (na * kscale))


def _newton(model, a, kscale, iters=8):
    """Damped Newton on rhs(a) = 0; each accepted step lowers the residual."""
    x = a.copy()
    r = _residual(model, x, kscale)
    for _ in range(iters):
        f = rhs(model, x)
        fr = np.empty(2 * model.N)
        fr[0::2], fr[1::2] = f.real, f.imag
        try:
            dx = np.linalg.solve(real_jacobian(model, x), -fr)
        except np.linalg.LinAlgError:
            break
        step = dx[0::2] + 1j * dx[1::2]
        lam = 1.0
        for _ in range(12):
            cand = x + lam * step
            rc = _residual(model, cand, kscale)
            if rc < r:
                break
            lam *= 0.5
        else:
            break
        x, r = cand, rc
        if r < 1e-15:
            break
    return x, r


def _is_stable(model, a) -> bool:
    return bool(np.max(np.linalg.eigvals(real_jacobian(model, a)).real) < 0)


def _dominant_frequency(model, a, t0, span, n=2048, rtol=1e-8, atol=0.0):
    ts = t0 + np.linspace(0.0, span, n)
    try:
        traj = integrate(model, FieldState(a, t0), ts[-1], rtol=rtol, atol=atol, t_eval=ts)
    except IntegrationError:
        return None
    signal = np.sum(np.abs(traj.a) ** 2, axis=1)
    signal = signal - signal.mean()
    if not np.any(signal):
        return 0.0
    spec = np.abs(np.fft.rfft(signal * np.hanning(n)))
    freqs = 2 * np.pi * np.fft.rfftfreq(n, d=ts[1] - ts[0])
    return float(freqs[1 + np.argmax(spec[1:])])


def steady_state(model: CavityModel, seed_state=None, max_time: float | None = None,
                 tol: float = 1e-8, rtol: float = 1e-9, atol: float | None = None,
                 seed_photons: float = 1e-6, seed: int = 0, polish: bool = True,
                 max_steps: int = 50_000_000, diagnose: bool = True) -> SteadyState:
    """Integrate to a dynamically stable fixed point.

    Stops once ``|da/dt| / (|a| max(gamma + mu)) < tol`` and then refines the
    point with Newton iterations on the analytic Jacobian. Limit cycles and
    other non-stationary behaviour come back with ``converged=False`` and the
    dominant frequency of the total photon number (skipped when ``diagnose``
    is False).
    """
    if np.any(model.kappa <= 0):
        raise ValueError("steady state requires every mode to be damped (gamma + mu > 0)")
    kscale = float(np.max(model.kappa))
    if max_time is None:
        max_time = 2e4 / float(np.min(model.kappa))
    a0 = initial_state(model, seed_photons, seed) if seed_state is None else np.asarray(
        seed_state.a if isinstance(seed_state, FieldState) else seed_state, dtype=complex)
    if atol is None:
        scale = max(np.max(np.abs(linear_fixed_point(model))), np.max(np.abs(a0)), 1.0)
        atol = 1e-3 * rtol * scale
    h0 = _initial_step(model, a0, max_time)
    _, t, y, status, steps, residual, _ = _dop853(
        np.ascontiguousarray(a0), 0.0, np.array([max_time]), rtol, atol, h0, int(max_steps),
        tol, kscale, *_params(model), _A, _B, _E3, _E5,
    )
    info = {"steps": int(steps), "status": int(status)}
    if status in (UNDERFLOW, NONFINITE):
        raise IntegrationError(f"steady-state search diverged at t={t:.6g}", t, None)
    residual = _residual(model, y, kscale)
    polished = False
    if status == CONVERGED and polish:
        ya, ra = _newton(model, y, kscale)
        near = np.linalg.norm(ya - y) <= 1e-2 * max(np.linalg.norm(y), 1e-300)
        if ra < residual and near and _is_stable(model, ya):
            y, residual, polished = ya, ra, True
    if status != CONVERGED and polish:
        # stiff or slowly settling runs: finish with Newton, keep only stable roots
        ya, ra = _newton(model, y, kscale, iters=40)
        if ra < tol and _is_stable(model, ya):
            y, residual, polished = ya, ra, True
            info["newton_rescue"] = True
    converged = residual < tol
    osc = None
    if not converged and diagnose:
        osc = _dominant_frequency(model, y, t, 200.0 / float(np.min(model.kappa)))
        log.warning("steady state not reached: residual %.3g, dominant frequency %s rad/s", residual, osc)
    return SteadyState(FieldState(y, t), residual, float(t), bool(converged), tol, osc, polished, info)


def conserved_quantities(model: CavityModel, a):
    """(N_sub, Q_ladder, E_total) for amplitudes ``a`` (last axis = modes)."""
    n = np.abs(np.asarray(a)) ** 2
    sub = ~np.asarray(model.is_idler)
    n_sub = np.sum(n[..., sub], axis=-1)
    q = np.sum(n[..., ~sub], axis=-1) - np.sum(n[..., sub] * np.asarray(model.comb)[sub], axis=-1)
    e = np.sum(hbar * np.asarray(model.omega) * n, axis=-1)
    return n_sub, q, e


def pump_depletion(model: CavityModel, states, pump_mode: int | None = None) -> np.ndarray:
    """1 - |a_pump|^2 / |a_pump(beta0 = 0)|^2 for each state (last axis = modes)."""
    if pump_mode is None:
        if model.table is None:
            raise ValueError("pump_mode must be given for models without a mode table")
        pump_mode = model.table.index(0, 0)
    ref = np.abs(linear_fixed_point(model)[pump_mode]) ** 2
    if ref == 0:
        raise ValueError("pump depletion is undefined: the pump mode is not driven")
    if isinstance(states, (Trajectory, FieldState, SteadyState)):
        states = states.a
    a = np.asarray(states)
    return 1.0 - np.abs(a[..., pump_mode]) ** 2 / ref
