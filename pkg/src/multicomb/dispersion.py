"""Refractive-index models for the nonlinear crystal.

Each model is a three-term Sellmeier form

    n^2(lambda) - 1 = sum_m B_m lambda^2 / (lambda^2 - C_m)

with lambda in micrometres, plus a declared validity window. Evaluating
outside the window raises :class:`DispersionRangeError`; there is no
silent extrapolation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.constants import c as C_LIGHT

__all__ = [
    "Sellmeier",
    "DispersionRangeError",
    "get_dispersion",
    "refractive_index",
    "group_index",
    "wavenumber",
    "inverse_group_velocity",
    "DISPERSION_MODELS",
]


class DispersionRangeError(ValueError):
    """Frequency outside the validity window of a dispersion model."""


@dataclass(frozen=True)
class Sellmeier:
    name: str
    B: tuple[float, ...]
    C: tuple[float, ...]  # um^2
    lambda_min_um: float
    lambda_max_um: float
    n_const: float | None = None  # dispersionless model when set

    def _check(self, lam_um):
        lam = np.asarray(lam_um, dtype=float)
        if self.n_const is not None:
            return lam
        bad = (lam < self.lambda_min_um) | (lam > self.lambda_max_um) | ~np.isfinite(lam)
        if np.any(bad):
            lo = float(np.min(lam[bad])) if np.ndim(lam) else float(lam)
            raise DispersionRangeError(
                f"{self.name}: wavelength {lo:.6g} um outside validity window "
                f"[{self.lambda_min_um}, {self.lambda_max_um}] um"
            )
        return lam

    def n_of_lambda(self, lam_um):
        lam = self._check(lam_um)
        if self.n_const is not None:
            return np.full_like(lam, self.n_const, dtype=float)
        l2 = lam * lam
        n2 = 1.0
        for b, cc in zip(self.B, self.C):
            n2 = n2 + b * l2 / (l2 - cc)
        return np.sqrt(n2)

    def dn_dlambda(self, lam_um):
        """Analytic derivative dn/dlambda in 1/um."""
        lam = self._check(lam_um)
        if self.n_const is not None:
            return np.zeros_like(lam, dtype=float)
        l2 = lam * lam
        d = 0.0
        for b, cc in zip(self.B, self.C):
            d = d - 2.0 * b * cc * lam / (l2 - cc) ** 2
        return d / (2.0 * self.n_of_lambda(lam))


# Congruent lithium niobate, extraordinary and ordinary axes, and 5% MgO-doped
# extraordinary axis. Measured range is 0.4-5 um; the window is extended to
# 0.32-10 um so the UV subcombs and the idler sidebands can be evaluated.
DISPERSION_MODELS: dict[str, Sellmeier] = {
    "lithium_niobate_e": Sellmeier(
        "lithium_niobate_e", (2.9804, 0.5981, 8.9543), (0.02047, 0.0666, 416.08), 0.32, 10.0
    ),
    "lithium_niobate_o": Sellmeier(
        "lithium_niobate_o", (2.6734, 1.2290, 12.614), (0.01764, 0.05914, 474.60), 0.32, 10.0
    ),
    "mgo_lithium_niobate_e": Sellmeier(
        "mgo_lithium_niobate_e", (2.2454, 1.3005, 6.8972), (0.01242, 0.0513, 331.33), 0.32, 10.0
    ),
    "vacuum": Sellmeier("vacuum", (), (), 0.0, np.inf, n_const=1.0),
}


def get_dispersion(model) -> Sellmeier:
    if isinstance(model, Sellmeier):
        return model
    if isinstance(model, str) and model.startswith("constant:"):
        n0 = float(model.split(":", 1)[1])
        return Sellmeier(model, (), (), 0.0, np.inf, n_const=n0)
    try:
        return DISPERSION_MODELS[model]
    except KeyError:
        raise ValueError(
            f"unknown dispersion model {model!r}; known: {sorted(DISPERSION_MODELS)} or 'constant:<n>'"
        ) from None


def _lambda_um(omega):
    omega = np.asarray(omega, dtype=float)
    with np.errstate(divide="ignore"):
        return 2.0 * np.pi * C_LIGHT / omega * 1e6


def refractive_index(dispersion, omega):
    """Phase index n(omega) for angular frequency ``omega`` in rad/s."""
    model = get_dispersion(dispersion)
    n = model.n_of_lambda(_lambda_um(omega))
    return float(n) if np.ndim(n) == 0 else n


def group_index(dispersion, omega):
    """n_g = n - lambda dn/dlambda."""
    model = get_dispersion(dispersion)
    lam = _lambda_um(omega)
    ng = model.n_of_lambda(lam) - lam * model.dn_dlambda(lam)
    return float(ng) if np.ndim(ng) == 0 else ng


def wavenumber(dispersion, omega):
    """k(omega) = n(omega) omega / c in 1/m."""
    return refractive_index(dispersion, omega) * np.asarray(omega, dtype=float) / C_LIGHT


def inverse_group_velocity(dispersion, omega):
    """dk/domega in s/m."""
    return group_index(dispersion, omega) / C_LIGHT
