"""Quantum sensitivity analysis of the ultrafast cascade.

The Jacobian of the split-step map is carried alongside the mean field as
complex tangent columns, one per real input quadrature. Coordinates are
canonical photon units:

    b_k = A~_k sqrt(T_w / (hbar w_k)),   c = fft(b) / sqrt(M)

``w_k`` is the absolute frequency of the bin. Without self-steepening it is
the carrier, so ``c_n = A_n sqrt(dt / (hbar w_e))``. The ``c_n`` are
orthonormal temporal modes with vacuum covariance equal to the identity, in
the same quadrature convention as the cavity module: ``p = dc + dc^dag``,
``q = -i (dc - dc^dag)``, ordered (p, q) per mode, with modes ordered by
envelope and then by sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft as sfft
from numba import njit
from scipy.constants import hbar

from .fluct import CovarianceMatrix, symplectic_form
from .metrics import NoiseMap, ratio_map_from_moments
from .pulse import (
    GridError, PropagationError, PulseGrid, PulsePhysics, PulseState, SplitStepper, propagate_batch, segment_steps,
)

__all__ = [
    "MemoryCapError",
    "JacobianState",
    "BinSpec",
    "BinnedNoiseMap",
    "TIME_BINS",
    "FREQUENCY_BINS",
    "canonical_weights",
    "to_canonical",
    "from_canonical",
    "propagate_with_jacobian",
    "output_covariance_ultrafast",
    "symplectic_defect",
    "bin_operators",
    "binned_intensity_map",
    "frequency_covariance",
    "monte_carlo_bin_moments",
    "correlated_fraction",
    "DEFAULT_MEMORY_CAP",
]

DEFAULT_MEMORY_CAP = 3 * 1024**3  # bytes
DARK_PHOTONS = 1e-6
_TAN_TOL = 1e-13
_TAN_MAX_ITER = 60
_BLOCK_BYTES = 1 << 20


class MemoryCapError(GridError):
    """Jacobian would exceed the configured memory cap."""


@dataclass(frozen=True)
class JacobianState:
    """Real Jacobian of the output quadratures with respect to the input quadratures."""

    J: np.ndarray  # (2EM, 2EM)
    state: PulseState  # mean field at z
    z: float
    self_steepening: bool

    @property
    def n_modes(self) -> int:
        return self.J.shape[0] // 2


def canonical_weights(grid: PulseGrid, carriers, self_steepening: bool) -> np.ndarray:
    """sqrt(T_w / (hbar w)) per (envelope, frequency bin), shape (E, M), bins in fftfreq order."""
    w = np.asarray(carriers, dtype=float)[:, None]
    if self_steepening:
        w = w + grid.Omega[None, :]
    return np.sqrt(grid.T_w / (hbar * np.broadcast_to(w, (w.shape[0], grid.M))))


def to_canonical(X, W, workers=None):
    """Fields (..., E, M) in sqrt(W) -> canonical amplitudes c (..., E, M)."""
    M = X.shape[-1]
    b = sfft.ifft(X, axis=-1, workers=workers) * W
    return sfft.fft(b, axis=-1, workers=workers) / math.sqrt(M)


def from_canonical(C, W, workers=None):
    M = C.shape[-1]
    b = sfft.ifft(C, axis=-1, workers=workers) * math.sqrt(M)
    return sfft.fft(b / W, axis=-1, workers=workers)


def _identity_columns(E, M, start=0, stop=None):
    """Canonical input directions (K, E, M): column 2n is dc_n = 1, column 2n+1 is dc_n = i, n = e M + m."""
    K = 2 * E * M
    stop = K if stop is None else stop
    cols = np.arange(start, stop)
    D = np.zeros((len(cols), E, M), dtype=complex)
    n = cols // 2
    D[np.arange(len(cols)), n // M, n % M] = np.where(cols % 2 == 0, 1.0, 1j)
    return D


def _to_real_rows(C):
    """Canonical tangents (K, E, M) -> real Jacobian (2EM, K), rows interleaved Re/Im by mode e*M+m."""
    K, E, M = C.shape
    flat = C.reshape(K, E * M).T
    J = np.empty((2 * E * M, K))
    J[0::2] = flat.real
    J[1::2] = flat.imag
    return J


# --- tangent maps -----------------------------------------------------------------------


@njit(cache=True)
def _local_apply(ia, ca, ib, cb, D, out):
    """out[k, e] = sum_f a_ef D[k, f] + b_ef conj(D[k, f]) per sample, over packed nonzero (e, f)."""
    kb, E, M = D.shape
    for k in range(kb):
        for e in range(E):
            for m in range(M):
                out[k, e, m] = 0.0
        for p in range(ia.shape[0]):
            e = ia[p, 0]
            f = ia[p, 1]
            for m in range(M):
                out[k, e, m] += ca[p, m] * D[k, f, m]
        for p in range(ib.shape[0]):
            e = ib[p, 0]
            f = ib[p, 1]
            for m in range(M):
                out[k, e, m] += cb[p, m] * D[k, f, m].conjugate()


@njit(cache=True)
def _fp_update(U, rhs, X, c):
    """U <- rhs + c X in place; returns (max change, max magnitude) in the max(|re|, |im|) norm."""
    u = U.reshape(-1)
    r = rhs.reshape(-1)
    x = X.reshape(-1)
    err = 0.0
    scale = 0.0
    for i in range(u.size):
        new = r[i] + c * x[i]
        d = new - u[i]
        err = max(err, abs(d.real), abs(d.imag))
        scale = max(scale, abs(new.real), abs(new.imag))
        u[i] = new
    return err, scale


def _pack(a, b):
    """(M, E, E) coefficient pair -> index/coefficient arrays of the nonzero entries."""
    out = []
    for x in (a, b):
        idx = np.argwhere(np.any(x != 0, axis=0)).astype(np.int64)
        out += [idx, np.ascontiguousarray(x[:, idx[:, 0], idx[:, 1]].T)]
    return tuple(out)


def _real_form(a, b):
    """(M, E, E) complex pair -> (M, 2E, 2E) real map on [Re; Im]."""
    return np.block([[np.real(a + b), -np.imag(a - b)], [np.imag(a + b), np.real(a - b)]])


def _complex_form(R):
    E = R.shape[1] // 2
    R11, R12, R21, R22 = R[:, :E, :E], R[:, :E, E:], R[:, E:, :E], R[:, E:, E:]
    return 0.5 * ((R11 + R22) + 1j * (R21 - R12)), 0.5 * ((R11 - R22) + 1j * (R21 + R12))


class _TangentMaps:
    """Exact linearization of :class:`SplitStepper` steps, applied to tangent blocks (kb, E, M)."""

    def __init__(self, stepper: SplitStepper, tol: float = _TAN_TOL):
        self.s = stepper
        self.tol = tol
        self.dispT = np.ascontiguousarray(stepper.dispersion_op.T)
        self.shockT = None if stepper.shock is None else np.ascontiguousarray(stepper.shock.T)
        self.E = stepper.physics.n_envelopes
        self._phase = {}

    def linear(self, D, h):
        if h == 0.0:
            return D
        ph = self._phase.get(h)
        if ph is None:
            ph = self._phase[h] = np.exp(1j * self.dispT * h)
        w = self.s.workers
        X = sfft.ifft(D, axis=-1, workers=w)
        X *= ph
        return sfft.fft(X, axis=-1, workers=w, overwrite_x=True)

    def _kerr_coeffs(self, Y, h):
        s = self.s
        rate = s.kerr_rate(Y)
        rot = np.exp(1j * rate * h)
        coef = 1j * h * (rot * Y)[:, :, None] * s.kerr[None, :, None] * s.xpm_weights[None]
        a = coef * np.conj(Y)[:, None, :]
        b = coef * Y[:, None, :]
        idx = np.arange(self.E)
        a[:, idx, idx] += rot
        return a, b

    def operator(self, rec, z, h):
        """Packed linearization of one nonlinear stage: ("local", packed) or ("implicit", packed)."""
        s = self.s
        if s.shock is not None:
            if "mid" not in rec:
                return None
            return ("implicit", _pack(*s.field_coeffs(rec["mid"], z + 0.5 * h, True)))
        n = 2 * self.E
        T = np.broadcast_to(np.eye(n), (s.grid.M, n, n))
        if "k1" in rec:
            T = _real_form(*self._kerr_coeffs(rec["k1"], 0.5 * h))
        if "mid" in rec:
            R = _real_form(*s.field_coeffs(rec["mid"], z + 0.5 * h, False))
            I = np.eye(n)[None]
            T = np.linalg.solve(I - 0.5 * h * R, I + 0.5 * h * R) @ T
        if "k2" in rec:
            T = _real_form(*self._kerr_coeffs(rec["k2"], 0.5 * h)) @ T
        if not rec:
            return None
        return ("local", _pack(*_complex_form(T)))

    def nonlinear(self, op, D, z, h):
        if op is None:
            return D
        kind, packed = op
        out = np.empty_like(D)
        if kind == "local":
            _local_apply(*packed, D, out)
            return out
        # (I - h/2 S N') U = 2 D by fixed-point iteration; the step result is U - D
        w = self.s.workers
        rhs = 2.0 * D
        U = rhs.copy()
        for _ in range(_TAN_MAX_ITER):
            _local_apply(*packed, U, out)
            X = sfft.ifft(out, axis=-1, workers=w, overwrite_x=True)
            X *= self.shockT
            X = sfft.fft(X, axis=-1, workers=w, overwrite_x=True)
            err, scale = _fp_update(U, rhs, X, 0.5 * h)
            if err <= self.tol * max(scale, 1e-300):
                U -= D
                return U
        raise PropagationError(f"tangent solve did not converge at z={z:.6g} m", z)


def jacobian_memory(M: int, E: int, n_steps: int = 0, n_checkpoints: int = 1) -> int:
    """Approximate peak bytes for a Jacobian run."""
    K = 2 * E * M
    per_cp = K * E * M * 16 + K * K * 8
    coeffs = n_steps * (2 * E * E * M * 16 + 3 * E * M * 16)
    return int(n_checkpoints * per_cp + coeffs + K * K * 8)


def propagate_with_jacobian(physics: PulsePhysics, initial: PulseState, dz: float, L: float | None = None,
                            checkpoints: Sequence[float] | None = None, memory_cap: int = DEFAULT_MEMORY_CAP,
                            workers: int | None = None, tol: float = _TAN_TOL, block: int | None = None):
    """Propagate the mean field and the Jacobian together.

    The mean field is propagated first, keeping the states each nonlinear
    substep was linearized at. Tangent columns are then pushed through the
    same step sequence in cache-sized blocks. Returns
    ``(PulseState, JacobianState)`` at ``L``, or a list of such pairs at
    ``checkpoints``.
    """
    L = physics.length if L is None else L
    grid = initial.grid
    M, E = grid.M, initial.n_envelopes
    K = 2 * E * M
    if not 0 < dz <= L - initial.z + 1e-15:
        raise ValueError("need 0 < dz <= remaining length")
    targets = list(checkpoints) if checkpoints is not None else [L]
    if targets[-1] > L + 1e-12:
        raise ValueError("checkpoints beyond the crystal end")
    segments = segment_steps(dz, initial.z, targets)
    n_steps = sum(n for _, n in segments)
    need = jacobian_memory(M, E, n_steps, len(targets))
    if need > memory_cap:
        m_ok = M
        while m_ok > 2 and jacobian_memory(m_ok, E, n_steps, len(targets)) > memory_cap:
            m_ok //= 2
        raise MemoryCapError(
            f"Jacobian for M={M}, E={E} needs ~{need / 2**30:.2f} GiB > cap {memory_cap / 2**30:.2f} GiB; "
            f"reduce to M<={m_ok} samples, fewer checkpoints or fewer envelopes"
        )
    stepper = SplitStepper(physics, grid, workers)
    maps = _TangentMaps(stepper, tol)
    Y = np.ascontiguousarray(initial.fields.T)
    stepper.check_step(Y, dz)

    # mean-field pass
    ops, states = [], []
    z = initial.z
    cp_after = {}  # step index -> checkpoint indices reached after it
    for c, ((h, n), zt) in enumerate(zip(segments, targets)):
        for _ in range(n):
            Y, rec = stepper.step(Y, z, h)
            ops.append((z, h, maps.operator(rec, z, h)))
            z += h
        z = zt
        cp_after.setdefault(len(ops) - 1, []).append(c)
        states.append(initial.with_fields(Y.T, z))

    # tangent pass, block by block
    W = canonical_weights(grid, initial.carriers, physics.self_steepening)
    kb = block or max(1, _BLOCK_BYTES // (E * M * 16))
    outs = [np.empty((K, E, M), dtype=complex) for _ in targets]
    for start in range(0, K, kb):
        stop = min(K, start + kb)
        D = from_canonical(_identity_columns(E, M, start, stop), W, workers)
        for c in cp_after.get(-1, []):
            outs[c][start:stop] = D
        pend = 0.0
        for n, (zs, h, op) in enumerate(ops):
            D = maps.linear(D, pend + 0.5 * h)
            D = maps.nonlinear(op, D, zs, h)
            pend = 0.5 * h
            for c in cp_after.get(n, ()):
                outs[c][start:stop] = maps.linear(D, pend)
    result = []
    for c, st in enumerate(states):
        J = _to_real_rows(to_canonical(outs[c], W, workers))
        outs[c] = None
        result.append((st, JacobianState(J, st, st.z, physics.self_steepening)))
    return result if checkpoints is not None else result[-1]


def output_covariance_ultrafast(jac: JacobianState | np.ndarray) -> CovarianceMatrix:
    """sigma_out = J J^T for vacuum (identity) input covariance."""
    J = jac.J if isinstance(jac, JacobianState) else np.asarray(jac, dtype=float)
    return CovarianceMatrix(J @ J.T, "ultrafast")


def symplectic_defect(J) -> float:
    """max |J Omega J^T - Omega|."""
    J = J.J if isinstance(J, JacobianState) else np.asarray(J)
    Om = symplectic_form(J.shape[0] // 2)
    return float(np.max(np.abs(J @ Om @ J.T - Om)))


# --- binning ------------------------------------------------------------------------------


@dataclass(frozen=True)
class BinSpec:
    """Bins of ``resolution`` spanning +/- ``half_width`` around each envelope centre.

    Bin widths are whole numbers of grid samples; the realised width is
    reported in the bin axes.
    """

    domain: str  # "time" (seconds) or "frequency" (Hz)
    half_width: float
    resolution: float
    envelopes: tuple | None = None  # envelope labels to include; None = all

    def __post_init__(self):
        if self.domain not in ("time", "frequency"):
            raise ValueError("domain must be 'time' or 'frequency'")
        if not (self.half_width > 0 and self.resolution > 0):
            raise ValueError("bin widths must be positive")


TIME_BINS = BinSpec("time", 0.75e-12, 0.012e-12)
FREQUENCY_BINS = BinSpec("frequency", 32e12, 0.52e12)


@dataclass(frozen=True)
class BinnedNoiseMap:
    noise: NoiseMap
    axes: tuple  # one dict per envelope: label, domain, center, width, count
    photons: np.ndarray  # mean photons per bin
    intensity_noise_db: np.ma.MaskedArray  # per-bin variance / shot noise

    @property
    def ratio(self):
        return self.noise.ratio

    @property
    def db(self):
        return self.noise.db

    def envelope_slices(self) -> dict:
        out, start = {}, 0
        for ax in self.axes:
            out[ax["label"]] = slice(start, start + ax["count"])
            start += ax["count"]
        return out

    def block(self, a, b) -> np.ma.MaskedArray:
        sl = self.envelope_slices()
        return self.db[sl[a], sl[b]]


def _bin_layout(spec: BinSpec, grid: PulseGrid):
    step = grid.dt if spec.domain == "time" else 1.0 / grid.T_w
    n_r = max(1, int(round(spec.resolution / step)))
    width = n_r * step
    n_side = int(math.floor(spec.half_width / width + 1e-9))
    count = 2 * n_side + 1
    if count * n_r > grid.M:
        raise GridError(f"{spec.domain} bins span {count * n_r} samples > grid size {grid.M}")
    return n_r, n_side, count, width


def _centroid_sample(c_env: np.ndarray) -> int:
    """Sample index of the intensity centroid on a periodic grid (grid centre if dark)."""
    M = len(c_env)
    p = np.abs(c_env) ** 2
    if not np.any(p > 0):
        return M // 2
    ang = 2 * np.pi * np.arange(M) / M
    phi = np.angle(np.sum(p * np.exp(1j * ang)))
    return int(round(phi / (2 * np.pi) * M)) % M


def bin_operators(state: PulseState, spec: BinSpec, self_steepening: bool, route: str = "direct"):
    """Linearized bin photon-number rows on the canonical output quadratures.

    Returns ``(U, photons, axes)``: ``U`` has shape (n_bins, 2EM) with
    ``dN_bin = U x``. In the frequency domain, ``route="direct"`` builds the
    rows on the frequency quadratures and maps them back through the unitary
    transform; ``route="sigma"`` returns the rows on frequency quadratures,
    to be used with :func:`frequency_covariance`.
    """
    grid = state.grid
    M, E = grid.M, state.n_envelopes
    W = canonical_weights(grid, state.carriers, self_steepening)
    c_bar = to_canonical(state.fields, W)  # (E, M)
    n_r, n_side, count, width = _bin_layout(spec, grid)
    labels = list(state.labels)
    chosen = labels if spec.envelopes is None else [str(x) for x in spec.envelopes]
    rows, photons, axes = [], [], []
    for lab in chosen:
        e = labels.index(lab)
        if spec.domain == "time":
            amp = c_bar[e]
            centre = _centroid_sample(amp)
            centre_val = float(grid.t[centre])
        else:
            amp = np.fft.fftshift(np.fft.ifft(c_bar[e]) * math.sqrt(M))  # b_k, ascending frequency
            centre = M // 2
            centre_val = float(state.carriers[e] / (2 * np.pi))
        axes.append(dict(label=lab, domain=spec.domain, center=centre_val, width=width, count=count))
        for j in range(-n_side, n_side + 1):
            idx = (centre + j * n_r - n_r // 2 + np.arange(n_r)) % M
            row = np.zeros((M, 2))
            row[idx, 0] = amp[idx].real
            row[idx, 1] = amp[idx].imag
            photons.append(float(np.sum(np.abs(amp[idx]) ** 2)))
            full = np.zeros((E, M, 2))
            full[e] = row
            rows.append(full.reshape(-1))
    U = np.array(rows)
    if spec.domain == "frequency" and route == "direct":
        U = U @ _frequency_transform(M, E)
    return U, np.array(photons), tuple(axes)


def _frequency_transform(M: int, E: int) -> np.ndarray:
    """Real (2EM, 2EM) map from time-sample quadratures to shifted frequency-bin quadratures."""
    F = np.fft.fftshift(np.fft.ifft(np.eye(M), axis=0) * math.sqrt(M), axes=0)  # b = F c, unitary
    R = np.zeros((2 * M, 2 * M))
    R[0::2, 0::2], R[0::2, 1::2] = F.real, -F.imag
    R[1::2, 0::2], R[1::2, 1::2] = F.imag, F.real
    T = np.zeros((2 * E * M, 2 * E * M))
    for e in range(E):
        s = slice(2 * e * M, 2 * (e + 1) * M)
        T[s, s] = R
    return T


def frequency_covariance(sigma, M: int, E: int) -> np.ndarray:
    """Covariance on (fftshifted) frequency-bin quadratures, R sigma R^T."""
    s = sigma.matrix if isinstance(sigma, CovarianceMatrix) else np.asarray(sigma, dtype=float)
    if s.shape != (2 * E * M, 2 * E * M):
        raise ValueError("covariance size does not match the grid")
    T = _frequency_transform(M, E)
    return T @ s @ T.T


def binned_intensity_map(state: PulseState, sigma, spec: BinSpec, self_steepening: bool,
                         dark_threshold: float = DARK_PHOTONS, route: str = "direct") -> BinnedNoiseMap:
    """Pairwise twin-beam ratios between all bins of the chosen envelopes."""
    s = sigma.matrix if isinstance(sigma, CovarianceMatrix) else np.asarray(sigma, dtype=float)
    U, photons, axes = bin_operators(state, spec, self_steepening, route)
    if spec.domain == "frequency" and route == "sigma":
        s = frequency_covariance(s, state.grid.M, state.n_envelopes)
    V = U @ s @ U.T
    dark = photons < dark_threshold
    labels = [f"{ax['label']}:{k}" for ax in axes for k in range(ax["count"])]
    nm = ratio_map_from_moments(V, dark, labels)
    with np.errstate(divide="ignore", invalid="ignore"):
        rin = 10 * np.log10(np.where(dark, 1.0, np.diag(V) / np.where(dark, 1.0, photons)))
    return BinnedNoiseMap(nm, axes, photons, np.ma.array(rin, mask=dark))


def correlated_fraction(bmap: BinnedNoiseMap, threshold_db: float = -3.0, inter_envelope: bool = False) -> float:
    """Fraction of defined off-diagonal bin pairs below ``threshold_db``."""
    n = len(bmap.photons)
    iu = np.triu_indices(n, 1)
    keep = ~bmap.noise.mask[iu]
    if inter_envelope:
        env = np.concatenate([[k] * ax["count"] for k, ax in enumerate(bmap.axes)])
        keep &= env[iu[0]] != env[iu[1]]
    vals = bmap.noise.ratio[iu][keep]
    if vals.size == 0:
        return 0.0
    return float(np.mean(10 * np.log10(np.maximum(vals, 1e-300)) < threshold_db))


def monte_carlo_bin_moments(physics: PulsePhysics, initial: PulseState, dz: float, L: float, spec: BinSpec,
                            n_samples: int = 10_000, eps: float = 1e-3, seed: int = 0, batch: int = 2_000):
    """Linearized Monte-Carlo estimate of the bin photon-number covariance.

    Vacuum quadrature noise is drawn in canonical input coordinates and
    pushed through the nonlinear propagator by central differences of
    amplitude ``eps`` (canonical units), independently of the Jacobian code.

    Returns
    -------
    samples : ndarray, shape (n_samples, n_bins)
        Linearized bin photon-number fluctuations.
    photons : ndarray
        Mean photons per bin of the unperturbed output.
    final : PulseState
        Unperturbed output state.
    """
    grid = initial.grid
    M, E = grid.M, initial.n_envelopes
    W = canonical_weights(grid, initial.carriers, physics.self_steepening)
    out = propagate_batch(physics, grid, initial.fields[None], dz, L, initial.z)[0]
    final = initial.with_fields(out, L)
    U, photons, _ = bin_operators(final, spec, physics.self_steepening)
    rng = np.random.default_rng(seed)
    chunks = []
    done = 0
    while done < n_samples:
        B = min(batch, n_samples - done)
        x = rng.standard_normal((B, 2 * E * M))
        dc = ((x[:, 0::2] + 1j * x[:, 1::2]) / 2.0).reshape(B, E, M)  # Var(p) = Var(q) = 1
        dA = from_canonical(dc, W)
        base = initial.fields[None]
        plus = propagate_batch(physics, grid, base + eps * dA, dz, L, initial.z)
        minus = propagate_batch(physics, grid, base - eps * dA, dz, L, initial.z)
        flat = to_canonical((plus - minus) / (2 * eps), W).reshape(B, E * M)
        xo = np.empty((B, 2 * E * M))
        xo[:, 0::2] = 2 * flat.real
        xo[:, 1::2] = 2 * flat.imag
        chunks.append(xo @ U.T)
        done += B
    return np.concatenate(chunks), photons, final
