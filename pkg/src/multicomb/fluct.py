"""Linearized quantum fluctuations about a mean-field steady state.

Quadratures are ``p = da + da^dag`` and ``q = -i (da - da^dag)``, ordered
``(p_1, q_1, ..., p_N, q_N)``; vacuum has covariance identity. Every mode
couples to two vacuum ports: the output coupler (rate gamma) and intrinsic
loss (rate mu).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .meanfield import SteadyState, real_jacobian
from .model import CavityModel

__all__ = [
    "DriftModel",
    "CovarianceMatrix",
    "UnstableError",
    "linearize",
    "stability",
    "intracavity_covariance",
    "transfer_matrix",
    "output_covariance",
    "output_amplitudes",
    "symplectic_form",
]


class UnstableError(RuntimeError):
    """The linearized dynamics have no stationary state."""

    def __init__(self, abscissa):
        super().__init__(f"drift matrix is unstable: spectral abscissa {abscissa:.6g} >= 0")
        self.abscissa = abscissa


def symplectic_form(n_modes: int) -> np.ndarray:
    return np.kron(np.eye(n_modes), np.array([[0.0, 1.0], [-1.0, 0.0]]))


@dataclass(frozen=True)
class DriftModel:
    M: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray
    amplitudes: np.ndarray

    @property
    def n_modes(self) -> int:
        return len(self.gamma)

    def port_matrices(self):
        """Input couplings (2N x 2N each) for the gamma and mu ports."""
        Bg = np.diag(np.repeat(np.sqrt(2.0 * self.gamma), 2))
        Bm = np.diag(np.repeat(np.sqrt(2.0 * self.mu), 2))
        return Bg, Bm


@dataclass(frozen=True)
class CovarianceMatrix:
    matrix: np.ndarray
    context: str  # "intracavity" | "output" | "ultrafast" | "given"
    omega: float | None = None
    normalization: str = "vacuum=identity"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] % 2:
            raise ValueError("covariance must be a square matrix of even size")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n_modes(self) -> int:
        return self.matrix.shape[0] // 2


def linearize(model: CavityModel, steady: SteadyState) -> DriftModel:
    """Analytic drift matrix of the fluctuations at ``steady``."""
    if not steady.converged:
        raise ValueError(
            f"cannot linearize about an unconverged state (residual {steady.residual:.3g})"
        )
    a = np.asarray(steady.a)
    return DriftModel(
        M=real_jacobian(model, a),
        gamma=np.asarray(model.gamma, dtype=float),
        mu=np.asarray(model.mu, dtype=float),
        amplitudes=a.copy(),
    )


def stability(drift: DriftModel) -> float:
    """Spectral abscissa (largest real part of the eigenvalues of M)."""
    return float(np.max(np.linalg.eigvals(drift.M).real))


def intracavity_covariance(drift: DriftModel, include_intrinsic: bool = True) -> CovarianceMatrix:
    """Stationary covariance from M s + s M^T + D = 0."""
    ab = stability(drift)
    if ab >= 0:
        raise UnstableError(ab)
    rates = drift.gamma + (drift.mu if include_intrinsic else 0.0)
    D = np.diag(np.repeat(2.0 * rates, 2))
    sigma = sla.solve_continuous_lyapunov(drift.M, -D)
    return CovarianceMatrix(sigma, "intracavity")


def transfer_matrix(drift: DriftModel, omega: float = 0.0, include_intrinsic: bool = True) -> np.ndarray:
    """Output quadratures per input quadrature, shape (2N, 4N): [gamma ports | mu ports].

    out = sqrt(2 gamma) x - x_in(gamma), with x = (-i Omega - M)^-1 (B_g x_g + B_m x_m).
    """
    n2 = drift.M.shape[0]
    Bg, Bm = drift.port_matrices()
    if not include_intrinsic:
        Bm = np.zeros_like(Bm)
    G = np.linalg.solve(-1j * omega * np.eye(n2) - drift.M, np.hstack([Bg, Bm]))
    T = Bg @ G
    T[:, :n2] -= np.eye(n2)
    return T


def output_covariance(drift: DriftModel, omega: float = 0.0, include_intrinsic: bool = True) -> CovarianceMatrix:
    """Symmetrized output spectral covariance at analysis frequency ``omega`` (rad/s)."""
    ab = stability(drift)
    if ab >= 0:
        raise UnstableError(ab)
    T = transfer_matrix(drift, omega, include_intrinsic)
    sigma = (T @ T.conj().T).real
    return CovarianceMatrix(sigma, "output", float(omega))


def output_amplitudes(model: CavityModel, steady) -> np.ndarray:
    """Mean output fields sqrt(2 gamma) a - s_in, in sqrt(photons/s)."""
    a = np.asarray(steady.a if hasattr(steady, "a") else steady)
    return np.sqrt(2.0 * np.asarray(model.gamma)) * a - np.asarray(model.drive)
