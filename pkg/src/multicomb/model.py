"""Mode grid, phase matching and coupling coefficients of the cascaded comb cavity.

Amplitudes are normalized so that ``|a|^2`` is the intracavity photon number
and drives ``s`` are photon-flux amplitudes, ``|s|^2 = P / (hbar omega)``.
Decay rates are amplitude rates, ``gamma = omega / (2 Q)``.

Canonical mode order: idler modes first (k ascending), then the subcombs
(i ascending, j ascending).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.constants import c as C_LIGHT
from scipy.constants import hbar

from .dispersion import get_dispersion, wavenumber

__all__ = [
    "CombSystemSpec",
    "ModeTable",
    "CouplingTable",
    "CavityModel",
    "SpecError",
    "build_mode_table",
    "phase_matching",
    "phase_matching_matrix",
    "build_coupling_table",
    "build_cavity",
]


class SpecError(ValueError):
    """Invalid physical system description."""


def _table(value, shape, name):
    arr = np.array(value, dtype=float)
    try:
        arr = np.broadcast_to(arr, shape).copy()
    except ValueError:
        raise SpecError(f"{name}: cannot broadcast shape {arr.shape} to {shape}") from None
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CombSystemSpec:
    """Physical description of the multimode cavity.

    Per-mode tables (``Q_out``, ``Q_int``, ``pump_power``) have shape
    ``(n_sub, J)`` with rows ordered by subcomb index ``i_lo..i_hi``; scalars
    and per-row values broadcast. Idler tables (``Q_out_T``, ``Q_int_T``) have
    shape ``(J,)``. ``Q = inf`` means no loss through that port.
    """

    i_lo: int
    i_hi: int
    J: int
    lambda0: float
    omegaT0: float
    omega_m: float
    beta0: float
    crystal_length: float
    Q_out: object = 5e6
    Q_int: object = np.inf
    Q_out_T: object = 1e5
    Q_int_T: object = np.inf
    pump_power: object = 0.0
    dispersion: str = "lithium_niobate_e"
    eta_cutoff: float = 1e-6
    # 'auto' cancels the carrier mismatch of every adjacent comb pair,
    # None disables; a mapping {i: dk} offsets the pair (i, i+1) in 1/m.
    dk_offset: object = "auto"

    def __post_init__(self):
        if self.J < 1 or self.J % 2 == 0:
            raise SpecError(f"J must be a positive odd integer, got {self.J}")
        if not (self.i_lo <= 0 and self.i_hi >= 1):
            raise SpecError("subcomb range must contain i=0 (pump) and i=1 (seed)")
        shape = (self.n_sub, self.J)
        object.__setattr__(self, "Q_out", _table(self.Q_out, shape, "Q_out"))
        object.__setattr__(self, "Q_int", _table(self.Q_int, shape, "Q_int"))
        object.__setattr__(self, "pump_power", _table(self.pump_power, shape, "pump_power"))
        object.__setattr__(self, "Q_out_T", _table(self.Q_out_T, (self.J,), "Q_out_T"))
        object.__setattr__(self, "Q_int_T", _table(self.Q_int_T, (self.J,), "Q_int_T"))
        if np.any(self.pump_power[[i - self.i_lo for i in self.subcombs if i not in (0, 1)]] != 0):
            raise SpecError("only subcombs i=0 and i=1 may be driven")
        for name in ("Q_out", "Q_int"):
            if np.any(~(getattr(self, name) > 0)):
                raise SpecError(f"{name} factors must be > 0")
        if np.any(~(self.Q_out_T > 0)) or np.any(~(self.Q_int_T > 0)):
            raise SpecError("idler Q factors must be > 0")
        if np.any(self.pump_power < 0) or not np.all(np.isfinite(self.pump_power)):
            raise SpecError("pump powers must be finite and >= 0")
        if not self.crystal_length > 0:
            raise SpecError("crystal_length must be > 0")
        if not self.beta0 >= 0:
            raise SpecError("beta0 must be >= 0")
        if not (self.omega_m > 0 and self.omegaT0 > 0 and self.lambda0 > 0):
            raise SpecError("lambda0, omegaT0 and omega_m must be positive")
        if not self.omega_m < self.omegaT0 / (2 * self.J):
            raise SpecError("omega_m must be < omegaT0 / (2J): subcombs would overlap")
        lowest = self.omega00 - self.i_hi * self.omegaT0 - self.half * self.omega_m
        lowest_idler = self.omegaT0 - self.half * self.omega_m
        if lowest <= 0 or lowest_idler <= 0:
            raise SpecError("all mode frequencies must be strictly positive")

    @property
    def n_sub(self) -> int:
        return self.i_hi - self.i_lo + 1

    @property
    def half(self) -> int:
        return (self.J - 1) // 2

    @property
    def subcombs(self) -> range:
        return range(self.i_lo, self.i_hi + 1)

    @property
    def n_modes(self) -> int:
        return (self.n_sub + 1) * self.J

    @property
    def omega00(self) -> float:
        return 2 * np.pi * C_LIGHT / self.lambda0

    def omega(self, i, j):
        return self.omega00 - i * self.omegaT0 - j * self.omega_m

    def omega_idler(self, k):
        return self.omegaT0 + k * self.omega_m


@dataclass(frozen=True)
class ModeTable:
    """Flattened mode records in canonical order."""

    is_idler: np.ndarray
    comb: np.ndarray  # subcomb index i; 0 for idler rows (see is_idler)
    line: np.ndarray  # j for subcomb modes, k for idler modes
    omega: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray
    drive: np.ndarray  # |s| in sqrt(photons/s)
    i_lo: int
    J: int

    @property
    def N(self) -> int:
        return len(self.omega)

    @property
    def half(self) -> int:
        return (self.J - 1) // 2

    def index(self, i: int, j: int) -> int:
        h = self.half
        n_sub = (self.N // self.J) - 1
        if not (self.i_lo <= i < self.i_lo + n_sub and -h <= j <= h):
            raise IndexError(f"no subcomb mode ({i}, {j})")
        return self.J + (i - self.i_lo) * self.J + (j + h)

    def idler_index(self, k: int) -> int:
        h = self.half
        if not -h <= k <= h:
            raise IndexError(f"no idler mode k={k}")
        return k + h

    def label(self, n: int) -> str:
        if self.is_idler[n]:
            return f"T{self.line[n]:+d}"
        return f"{self.comb[n]},{self.line[n]:+d}"

    @property
    def labels(self) -> list[str]:
        return [self.label(n) for n in range(self.N)]

    def comb_modes(self, comb) -> np.ndarray:
        """Indices of every mode of subcomb ``comb`` (or the idler comb for 'T')."""
        if comb in ("T", "t", "idler"):
            return np.flatnonzero(self.is_idler)
        return np.flatnonzero(~self.is_idler & (self.comb == int(comb)))


def build_mode_table(spec: CombSystemSpec) -> ModeTable:
    J, h = spec.J, spec.half
    ks = np.arange(-h, h + 1)
    is_idler = [True] * J
    comb = [0] * J
    line = list(ks)
    omega = list(spec.omega_idler(ks))
    q_out = list(spec.Q_out_T)
    q_int = list(spec.Q_int_T)
    power = [0.0] * J
    for r, i in enumerate(spec.subcombs):
        for c, j in enumerate(ks):
            is_idler.append(False)
            comb.append(i)
            line.append(j)
            omega.append(spec.omega(i, j))
            q_out.append(spec.Q_out[r, c])
            q_int.append(spec.Q_int[r, c])
            power.append(spec.pump_power[r, c])
    omega = np.array(omega, dtype=float)
    if np.any(omega <= 0):
        raise SpecError("negative or zero mode frequency")
    gamma = omega / (2.0 * np.array(q_out))
    mu = omega / (2.0 * np.array(q_int))
    drive = np.sqrt(np.array(power) / (hbar * omega))
    arrays = dict(
        is_idler=np.array(is_idler),
        comb=np.array(comb, dtype=int),
        line=np.array(line, dtype=int),
        omega=omega,
        gamma=gamma,
        mu=mu,
        drive=drive,
    )
    for a in arrays.values():
        a.setflags(write=False)
    return ModeTable(**arrays, i_lo=spec.i_lo, J=J)


def _offsets(spec: CombSystemSpec) -> dict[int, float]:
    if spec.dk_offset is None or spec.dk_offset == "none":
        return {}
    if isinstance(spec.dk_offset, str):
        if spec.dk_offset != "auto":
            raise SpecError(f"dk_offset must be 'auto', 'none' or a mapping, got {spec.dk_offset!r}")
        out = {}
        for i in range(spec.i_lo, spec.i_hi):
            wa, wb = spec.omega(i, 0), spec.omega(i + 1, 0)
            out[i] = float(
                wavenumber(spec.dispersion, wa) - wavenumber(spec.dispersion, wb) - (wa - wb) / C_LIGHT
            )
        return out
    return {int(k): float(v) for k, v in dict(spec.dk_offset).items()}


def _wavevector_mismatch(spec, table: ModeTable, offsets, a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    wa, wb = table.omega[a], table.omega[b]
    dk = wavenumber(spec.dispersion, wa) - wavenumber(spec.dispersion, wb) - (wa - wb) / C_LIGHT
    if offsets:
        sub = ~table.is_idler[a] & ~table.is_idler[b]
        ia, ib = table.comb[a], table.comb[b]
        off = np.zeros(np.broadcast(a, b).shape)
        for i, d in offsets.items():
            off = np.where(sub & (ia == i) & (ib == i + 1), d, off)
            off = np.where(sub & (ia == i + 1) & (ib == i), -d, off)
        dk = dk - off
    return dk


def _abs_sinc(x):
    # np.sinc(y) = sin(pi y)/(pi y), removable singularity handled
    return np.abs(np.sinc(np.asarray(x) / np.pi))


def phase_matching(spec: CombSystemSpec, mode_a: int, mode_b: int, table: ModeTable | None = None) -> float:
    """eta = |sinc(dk L)| between two modes of the table."""
    table = table if table is not None else build_mode_table(spec)
    for m in (mode_a, mode_b):
        if not 0 <= m < table.N:
            raise IndexError(f"mode index {m} out of range")
    dk = _wavevector_mismatch(spec, table, _offsets(spec), mode_a, mode_b)
    return float(_abs_sinc(dk * spec.crystal_length))


def phase_matching_matrix(spec: CombSystemSpec, table: ModeTable | None = None) -> np.ndarray:
    table = table if table is not None else build_mode_table(spec)
    idx = np.arange(table.N)
    dk = _wavevector_mismatch(spec, table, _offsets(spec), idx[:, None], idx[None, :])
    eta = _abs_sinc(dk * spec.crystal_length)
    return 0.5 * (eta + eta.T)


@dataclass(frozen=True)
class CouplingTable:
    """Three-wave coupling rates.

    ``beta_minus[i - i_lo, j + h, k + h]`` couples a_ij to a_{i-1, j-k} and the
    idler a^T_{-k}; ``beta_plus`` couples a_ij to a_{i+1, j+k}. Undefined
    entries (missing partner mode) are zero. ``triplets`` lists every
    process (high, low, idler, rate) once, with mode indices in canonical
    order: one photon in ``high`` converts to one in ``low`` plus one idler.
    """

    beta_minus: np.ndarray
    beta_plus: np.ndarray
    eta: np.ndarray
    high: np.ndarray
    low: np.ndarray
    idler: np.ndarray
    rate: np.ndarray
    i_lo: int
    J: int

    def _ix(self, i, j, k):
        h = (self.J - 1) // 2
        return i - self.i_lo, j + h, k + h

    def bminus(self, i, j, k) -> float:
        return float(self.beta_minus[self._ix(i, j, k)])

    def bplus(self, i, j, k) -> float:
        return float(self.beta_plus[self._ix(i, j, k)])


def build_coupling_table(spec: CombSystemSpec, table: ModeTable | None = None) -> CouplingTable:
    table = table if table is not None else build_mode_table(spec)
    h = spec.half
    n_sub = spec.n_sub
    offsets = _offsets(spec)
    bm = np.zeros((n_sub, spec.J, spec.J))
    bp = np.zeros((n_sub, spec.J, spec.J))
    high, low, idl, rate = [], [], [], []
    eta_all = np.zeros((table.N, table.N))

    def coeff(n_a, n_b, n_t):
        eta = float(_abs_sinc(_wavevector_mismatch(spec, table, offsets, n_a, n_b) * spec.crystal_length))
        eta_all[n_a, n_b] = eta_all[n_b, n_a] = eta
        if eta < spec.eta_cutoff:
            return 0.0
        w = table.omega
        return spec.beta0 * eta * np.sqrt(hbar * w[n_a] * w[n_b] * w[n_t])

    for i in spec.subcombs:
        for j in range(-h, h + 1):
            for k in range(-h, h + 1):
                n_ij = table.index(i, j)
                n_t = table.idler_index(k)
                if i - 1 >= spec.i_lo and -h <= j - k <= h:
                    n_hi = table.index(i - 1, j - k)
                    b = coeff(n_ij, n_hi, n_t)
                    bm[i - spec.i_lo, j + h, k + h] = b
                    if b != 0.0:
                        high.append(n_hi)
                        low.append(n_ij)
                        idl.append(n_t)
                        rate.append(b)
                if i + 1 <= spec.i_hi and -h <= j + k <= h:
                    bp[i - spec.i_lo, j + h, k + h] = coeff(n_ij, table.index(i + 1, j + k), n_t)
    arrays = dict(
        beta_minus=bm,
        beta_plus=bp,
        eta=eta_all,
        high=np.array(high, dtype=np.int64),
        low=np.array(low, dtype=np.int64),
        idler=np.array(idl, dtype=np.int64),
        rate=np.array(rate, dtype=float),
    )
    for a in arrays.values():
        a.setflags(write=False)
    return CouplingTable(**arrays, i_lo=spec.i_lo, J=spec.J)


@dataclass(frozen=True)
class CavityModel:
    """Everything the dynamics need: per-mode rates, drives and the process list.

    Built from a :class:`CombSystemSpec` by :func:`build_cavity`, or directly
    from explicit triplets for small test systems.
    """

    omega: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray
    drive: np.ndarray  # complex s per mode, sqrt(photons/s)
    high: np.ndarray
    low: np.ndarray
    idler: np.ndarray
    rate: np.ndarray
    is_idler: np.ndarray
    comb: np.ndarray
    labels: tuple = ()
    table: ModeTable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        n = len(self.omega)
        for name in ("gamma", "mu", "drive", "is_idler", "comb"):
            if len(getattr(self, name)) != n:
                raise SpecError(f"{name} must have one entry per mode")
        if np.any(np.asarray(self.gamma) < 0) or np.any(np.asarray(self.mu) < 0):
            raise SpecError("loss rates must be >= 0")

    @property
    def N(self) -> int:
        return len(self.omega)

    @property
    def kappa(self) -> np.ndarray:
        return np.asarray(self.gamma) + np.asarray(self.mu)

    @property
    def drive_term(self) -> np.ndarray:
        """sqrt(2 gamma) s, the coherent forcing in the equations of motion."""
        return np.sqrt(2.0 * np.asarray(self.gamma)) * np.asarray(self.drive, dtype=complex)

    @classmethod
    def from_triplets(
        cls,
        omega: Sequence[float],
        gamma: Sequence[float],
        mu: Sequence[float],
        triplets: Sequence[tuple[int, int, int, float]],
        drive: Sequence[complex] | None = None,
        is_idler: Sequence[bool] | None = None,
        comb: Sequence[int] | None = None,
    ) -> "CavityModel":
        n = len(omega)
        trip = np.array(triplets, dtype=float).reshape(-1, 4)
        return cls(
            omega=np.asarray(omega, dtype=float),
            gamma=np.asarray(gamma, dtype=float),
            mu=np.asarray(mu, dtype=float),
            drive=np.zeros(n, complex) if drive is None else np.asarray(drive, dtype=complex),
            high=trip[:, 0].astype(np.int64),
            low=trip[:, 1].astype(np.int64),
            idler=trip[:, 2].astype(np.int64),
            rate=trip[:, 3].copy(),
            is_idler=np.zeros(n, bool) if is_idler is None else np.asarray(is_idler, dtype=bool),
            comb=np.zeros(n, int) if comb is None else np.asarray(comb, dtype=int),
            labels=tuple(str(m) for m in range(n)),
        )

    def with_rates(self, rate) -> "CavityModel":
        from dataclasses import replace

        return replace(self, rate=np.asarray(rate, dtype=float))

    def undriven_lossless(self) -> "CavityModel":
        from dataclasses import replace

        z = np.zeros(self.N)
        return replace(self, gamma=z, mu=z.copy(), drive=np.zeros(self.N, complex))


def build_cavity(spec: CombSystemSpec) -> CavityModel:
    table = build_mode_table(spec)
    coup = build_coupling_table(spec, table)
    return CavityModel(
        omega=table.omega,
        gamma=table.gamma,
        mu=table.mu,
        drive=table.drive.astype(complex),
        high=coup.high,
        low=coup.low,
        idler=coup.idler,
        rate=coup.rate,
        is_idler=table.is_idler,
        comb=table.comb,
        labels=tuple(table.labels),
        table=table,
    )


def fig2_spec(**overrides) -> CombSystemSpec:
    """The five-subcomb, three-line operating point used throughout the examples."""
    params = dict(
        i_lo=-2,
        i_hi=2,
        J=3,
        lambda0=465e-9,
        omegaT0=2 * np.pi * 73.7e12,
        omega_m=2 * np.pi * 100e6,
        beta0=3e-4,
        crystal_length=1e-2,
        Q_out=5e6,
        Q_out_T=1e5,
        pump_power=_fig2_power(-2, 2, 3, 1e4, 1e-3),
    )
    params.update(overrides)
    return CombSystemSpec(**params)


def _fig2_power(i_lo, i_hi, J, p_pump, p_seed):
    p = np.zeros((i_hi - i_lo + 1, J))
    p[0 - i_lo] = p_pump
    p[1 - i_lo] = p_seed
    return p


def drive_table(i_lo: int, i_hi: int, J: int, pump: float, seed: float) -> np.ndarray:
    """Per-mode power table with uniform pump (i=0) and seed (i=1) combs."""
    return _fig2_power(i_lo, i_hi, J, pump, seed)


__all__ += ["fig2_spec", "drive_table"]
