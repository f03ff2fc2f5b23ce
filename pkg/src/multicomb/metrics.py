"""Noise observables and entanglement witnesses computed from covariance matrices."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb as n_choose
from typing import Iterable, Sequence

import numpy as np

from .fluct import CovarianceMatrix, symplectic_form

__all__ = [
    "NoiseMap",
    "BipartitionResult",
    "NonPhysicalError",
    "quadrature_noise",
    "intensity_noise",
    "intensity_noise_all",
    "twin_beam_map",
    "symplectic_eigenvalues",
    "ppt_min_symplectic",
    "enumerate_bipartitions",
    "scan_bipartitions",
    "ENTANGLEMENT_EPS",
]

ENTANGLEMENT_EPS = 1e-9


class NonPhysicalError(ValueError):
    """Covariance matrix violates the uncertainty principle."""


def _matrix(sigma) -> np.ndarray:
    return sigma.matrix if isinstance(sigma, CovarianceMatrix) else np.asarray(sigma, dtype=float)


def quadrature_noise(sigma, mode: int, theta: float = 0.0) -> float:
    """Variance of cos(theta) dp + sin(theta) dq for one mode; vacuum gives 1."""
    s = _matrix(sigma)
    u = np.array([np.cos(theta), np.sin(theta)])
    blk = s[2 * mode:2 * mode + 2, 2 * mode:2 * mode + 2]
    return float(u @ blk @ u)


def _intensity_vectors(out_amps, n_modes):
    """Rows u_k with dP_k = u_k . x (x = output quadratures)."""
    amps = np.asarray(out_amps, dtype=complex)
    U = np.zeros((n_modes, 2 * n_modes))
    idx = np.arange(n_modes)
    U[idx, 2 * idx] = np.abs(amps) * np.cos(np.angle(amps))
    U[idx, 2 * idx + 1] = np.abs(amps) * np.sin(np.angle(amps))
    return U


def intensity_noise_all(sigma, out_amps, dark_threshold: float = 1e-6) -> np.ma.MaskedArray:
    """Relative intensity noise of every mode in dB re shot noise; dark modes masked."""
    s = _matrix(sigma)
    amps = np.asarray(out_amps, dtype=complex)
    n = len(amps)
    U = _intensity_vectors(amps, n)
    var = np.einsum("ki,ij,kj->k", U, s, U)
    shot = np.abs(amps) ** 2
    dark = shot < dark_threshold
    with np.errstate(divide="ignore", invalid="ignore"):
        db = 10 * np.log10(np.where(dark, 1.0, var / np.where(dark, 1.0, shot)))
    return np.ma.array(db, mask=dark)


def intensity_noise(sigma, out_amps, mode: int, dark_threshold: float = 1e-6) -> float:
    """Intensity noise of one mode in dB re shot noise, NaN for a dark mode."""
    v = intensity_noise_all(sigma, out_amps, dark_threshold)[mode]
    return float("nan") if v is np.ma.masked else float(v)


@dataclass(frozen=True)
class NoiseMap:
    """Pairwise twin-beam ratios <(dP_i - dP_j)^2> / <dP_i^2 + dP_j^2>.

    The diagonal is 0 by convention; ``mask`` is True where a ratio is
    undefined (a dark mode or bin in the pair).
    """

    ratio: np.ndarray
    mask: np.ndarray
    labels: tuple = ()

    @property
    def db(self) -> np.ma.MaskedArray:
        off = ~np.eye(len(self.ratio), dtype=bool)
        with np.errstate(divide="ignore"):
            vals = np.where(off, 10 * np.log10(np.where(self.mask, 1.0, self.ratio)), 0.0)
        return np.ma.array(vals, mask=self.mask)

    def off_diagonal_db(self) -> np.ndarray:
        """Defined off-diagonal entries in dB (upper triangle)."""
        iu = np.triu_indices(len(self.ratio), 1)
        keep = ~self.mask[iu]
        return 10 * np.log10(self.ratio[iu][keep])

    def min_db(self) -> float:
        vals = self.off_diagonal_db()
        return float(np.min(vals)) if vals.size else float("nan")


def ratio_map_from_moments(V: np.ndarray, dark: np.ndarray, labels=()) -> NoiseMap:
    """Twin-beam ratios from the covariance ``V`` of intensity fluctuations."""
    var = np.diag(V)
    denom = var[:, None] + var[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        R = (denom - 2.0 * V) / denom
    mask = dark[:, None] | dark[None, :]
    np.fill_diagonal(mask, False)
    R = np.where(mask, np.nan, np.maximum(R, 0.0))
    np.fill_diagonal(R, 0.0)
    R = 0.5 * (R + R.T)
    return NoiseMap(R, mask, tuple(labels))


def twin_beam_map(sigma, out_amps, dark_threshold: float = 1e-6, labels=()) -> NoiseMap:
    s = _matrix(sigma)
    amps = np.asarray(out_amps, dtype=complex)
    U = _intensity_vectors(amps, len(amps))
    V = U @ s @ U.T
    dark = np.abs(amps) ** 2 < dark_threshold
    return ratio_map_from_moments(V, dark, labels)


def symplectic_eigenvalues(sigma) -> np.ndarray:
    """Symplectic spectrum (one value per mode, ascending)."""
    s = _matrix(sigma)
    n = s.shape[0] // 2
    ev = np.abs(np.linalg.eigvals(1j * symplectic_form(n) @ s))
    return np.sort(ev)[::2]


@dataclass(frozen=True)
class BipartitionResult:
    subset: tuple
    nu_min: float

    @property
    def entangled(self) -> bool:
        return self.nu_min < 1.0 - ENTANGLEMENT_EPS

    @property
    def bitmask(self) -> int:
        return sum(1 << m for m in self.subset)


def _check_physical(s, tol=1e-6):
    nu = symplectic_eigenvalues(s)
    if nu[0] < 1.0 - tol:
        raise NonPhysicalError(f"covariance violates uncertainty: symplectic eigenvalue {nu[0]:.6g} < 1")


def _partial_transpose(s, subset):
    flip = np.ones(s.shape[0])
    flip[2 * np.asarray(subset, dtype=int) + 1] = -1.0
    return s * flip[:, None] * flip[None, :]


def ppt_min_symplectic(sigma, subset: Iterable[int], check: bool = True) -> BipartitionResult:
    """Minimum symplectic eigenvalue of the covariance partially transposed on ``subset``."""
    s = _matrix(sigma)
    n = s.shape[0] // 2
    subset = tuple(sorted(set(int(m) for m in subset)))
    if not subset or len(subset) >= n or subset[0] < 0 or subset[-1] >= n:
        raise ValueError("bipartition subset must be a nonempty proper subset of the modes")
    if check:
        _check_physical(s)
    nu = symplectic_eigenvalues(_partial_transpose(s, subset))
    return BipartitionResult(subset, float(nu[0]))


def enumerate_bipartitions(N: int, limit: int | None = 1000, idler: Sequence[int] | None = None) -> list[tuple]:
    """Bipartitions of N modes, smallest side first, lexicographic within a size.

    Each bipartition appears once: for even N, a half-size subset is kept only
    when it contains mode 0. ``idler`` (e.g. the idler-comb modes) is appended
    when it is not already among the first ``limit``.
    """
    if N < 2:
        return []
    if N > 63:
        raise ValueError("bipartition encoding supports N <= 63")
    out = []
    for size in range(1, N // 2 + 1):
        for sub in combinations(range(N), size):
            if 2 * size == N and sub[0] != 0:
                continue
            out.append(sub)
            if limit is not None and len(out) >= limit:
                break
        if limit is not None and len(out) >= limit:
            break
    if idler is not None:
        target = tuple(sorted(idler))
        comp = tuple(m for m in range(N) if m not in target)
        if target not in out and comp not in out:
            out.append(target)
    return out


def total_bipartitions(N: int) -> int:
    return sum(n_choose(N, s) for s in range(1, N // 2 + 1)) - (n_choose(N, N // 2) // 2 if N % 2 == 0 else 0)


def scan_bipartitions(sigma, subsets: Iterable[Sequence[int]]) -> list[BipartitionResult]:
    s = _matrix(sigma)
    _check_physical(s)
    return [ppt_min_symplectic(s, sub, check=False) for sub in subsets]


__all__ += ["ratio_map_from_moments", "total_bipartitions"]
