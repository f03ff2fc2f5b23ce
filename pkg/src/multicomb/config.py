"""INI run configuration with explicit units in every key.

Sections: ``[system]`` (cavity), ``[run]``, ``[optimize]``, ``[pulse]``,
``[qsa]`` and ``[output]``. Unknown sections or keys are errors. Frequencies
given in Hz/THz are ordinary frequencies; they are multiplied by 2 pi before
reaching the physics modules, which work in rad/s.

Per-subcomb tables use a dotted suffix: ``Q_out = 5e6`` sets every subcomb
line, ``Q_out.-2 = 1e3`` sets the row of subcomb -2 and ``Q_out.-2 = 1e3, 5e6,
5e6`` sets its lines individually (ordered j = -h..h). Idler tables
(``Q_out_T``, ``Q_int_T``) take a scalar or J values. ``pump_w.<i>`` follows
the same rule for drive powers.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CombSystemSpec
from .optimizer import OptimizationProblem, Parameter, default_parameters
from .pulse import PulseGrid, PulsePhysics
from .qsa import DEFAULT_MEMORY_CAP, BinSpec

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]

TWO_PI = 2 * math.pi


class ConfigError(ValueError):
    """Bad config file; the message names the offending key and line."""


def _float(s):
    v = float(s)
    if math.isnan(v):
        raise ValueError("NaN is not allowed")
    return v


def _int(s):
    return int(s, 0)


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _floats(s):
    return [_float(x) for x in s.replace(",", " ").split()]


def _words(s):
    return [x for x in s.replace(",", " ").split()]


def _str(s):
    return s.strip()


# key -> parser; None marks a dotted table family
SCHEMA = {
    "system": {
        "i_lo": _int, "i_hi": _int, "J": _int,
        "lambda0_nm": _float, "omegaT_thz": _float, "omega_m_hz": _float,
        "beta0": _float, "crystal_length_m": _float,
        "Q_out": None, "Q_int": None, "pump_w": None,
        "Q_out_T": _floats, "Q_int_T": _floats,
        "dispersion": _str, "dk_offset": _str, "eta_cutoff": _float,
    },
    "run": {
        "analysis_omega_hz": _float, "dark_threshold_photons": _float,
        "bipartition_limit": _int, "include_intrinsic": _bool,
    },
    "optimize": {
        "objective": _str, "targets": _words, "budget": _int, "n_starts": _int,
        "q_mode": _str, "self_test": _bool,
        "Q_first_bounds": _floats, "Q_last_bounds": _floats, "seed_power_w_bounds": _floats,
    },
    "pulse": {
        "M": _int, "T_w_ps": _float, "i_lo": _int, "i_hi": _int,
        "lambda0_nm": _float, "omegaT_thz": _float,
        "beta_L": _float, "gamma_L": _float, "length_cm": _float,
        "self_steepening": _bool, "xpm": _bool, "frame": _str, "qpm": _str, "dispersion": _str,
        "pump_avg_w": _float, "seed_avg_w": _float, "f_rep_khz": _float, "tau_fwhm_fs": _float,
        "shape": _str, "dz_um": _float, "max_phase_rad": _float, "checkpoints_cm": _floats,
    },
    "qsa": {
        "domains": _words, "freq_half_thz": _float, "freq_res_thz": _float,
        "time_half_ps": _float, "time_res_ps": _float, "memory_cap_gib": _float,
        "threshold_db": _float, "dark_threshold_photons": _float,
    },
    "output": {"dir": _str, "images": _bool},
}

_TABLE_KEY = re.compile(r"^(Q_out|Q_int|pump_w)\.(-?\d+)$")


@dataclass
class RunConfig:
    """Parsed configuration; physics objects are built on demand."""

    values: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    source: str = "<string>"

    def has(self, section: str) -> bool:
        return section in self.values

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def require(self, section: str, key: str):
        v = self.get(section, key)
        if v is None:
            raise ConfigError(f"{self.source}: missing required key [{section}] {key}")
        return v

    # --- cavity -----------------------------------------------------------------------

    def system_spec(self) -> CombSystemSpec:
        s = "system"
        i_lo, i_hi, J = (self.require(s, k) for k in ("i_lo", "i_hi", "J"))
        n_sub = i_hi - i_lo + 1
        if n_sub < 2 or J < 1:
            raise ConfigError(f"{self.source}: [system] needs i_lo <= 0 < i_hi and J >= 1")
        kw = dict(
            i_lo=i_lo, i_hi=i_hi, J=J,
            lambda0=self.require(s, "lambda0_nm") * 1e-9,
            omegaT0=TWO_PI * self.require(s, "omegaT_thz") * 1e12,
            omega_m=TWO_PI * self.require(s, "omega_m_hz"),
            beta0=self.require(s, "beta0"),
            crystal_length=self.get(s, "crystal_length_m", 1e-2),
            Q_out=self._table("Q_out", i_lo, n_sub, J, 5e6),
            Q_int=self._table("Q_int", i_lo, n_sub, J, np.inf),
            pump_power=self._table("pump_w", i_lo, n_sub, J, 0.0),
            Q_out_T=self._idler("Q_out_T", J, 1e5),
            Q_int_T=self._idler("Q_int_T", J, np.inf),
            dispersion=self.get(s, "dispersion", "lithium_niobate_e"),
            eta_cutoff=self.get(s, "eta_cutoff", 1e-6),
        )
        dk = self.get(s, "dk_offset", "auto")
        if dk not in ("auto", "none"):
            raise ConfigError(f"{self.source}: [system] dk_offset must be 'auto' or 'none', got {dk!r}")
        kw["dk_offset"] = None if dk == "none" else "auto"
        return CombSystemSpec(**kw)

    def _table(self, name, i_lo, n_sub, J, default):
        fam = self.tables.get(name, {})
        base = fam.get(None, [default])
        tab = np.empty((n_sub, J))
        tab[:] = self._row(name, base, J)
        for i, vals in fam.items():
            if i is None:
                continue
            if not 0 <= i - i_lo < n_sub:
                raise ConfigError(f"{self.source}: [system] {name}.{i} names a subcomb outside i_lo..i_hi")
            tab[i - i_lo] = self._row(f"{name}.{i}", vals, J)
        return tab

    def _row(self, key, vals, J):
        if len(vals) not in (1, J):
            raise ConfigError(f"{self.source}: [system] {key} needs 1 or J={J} values, got {len(vals)}")
        return np.asarray(vals, dtype=float)

    def _idler(self, name, J, default):
        return self._row(name, self.get("system", name, [default]), J)

    def analysis_omega(self) -> float:
        return TWO_PI * self.get("run", "analysis_omega_hz", 0.0)

    def optimization_problem(self, seed: int = 0, omega: float | None = None) -> OptimizationProblem:
        s = "optimize"
        budget = self.get(s, "budget", 500)
        if budget < 1:
            raise ConfigError(f"{self.source}: [optimize] budget must be >= 1, got {budget}")
        objective = self.get(s, "objective", "pair")
        raw = self.get(s, "targets", ["0", "3"])
        if objective == "pair":
            targets = tuple(int(t) for t in raw)
        else:
            targets = tuple(t if t == "T" else int(t) for t in raw)
        pars = []
        for p in default_parameters():
            key = "seed_power_w_bounds" if p.name == "seed_power" else f"{p.name}_bounds"
            b = self.get(s, key)
            if b is not None and len(b) != 2:
                raise ConfigError(f"{self.source}: [optimize] {key} needs two values")
            pars.append(p if b is None else Parameter(p.name, b[0], b[1], p.log))
        try:
            return OptimizationProblem(
                self.system_spec(), objective, targets, tuple(pars), budget,
                self.get(s, "n_starts", 8), seed, self.get(s, "q_mode", "mode"),
                self.analysis_omega() if omega is None else omega,
            )
        except ValueError as e:
            raise ConfigError(f"{self.source}: [optimize] {e}") from e

    # --- pulse ------------------------------------------------------------------------

    def pulse_physics(self) -> PulsePhysics:
        s = "pulse"
        d = PulsePhysics()
        qpm = self.get(s, "qpm", "auto")
        if qpm not in ("auto", "none"):
            raise ConfigError(f"{self.source}: [pulse] qpm must be 'auto' or 'none', got {qpm!r}")
        lam = self.get(s, "lambda0_nm")
        wT = self.get(s, "omegaT_thz")
        L = self.get(s, "length_cm")
        try:
            return PulsePhysics(
                beta_L=self.get(s, "beta_L", d.beta_L),
                gamma_L=self.get(s, "gamma_L", d.gamma_L),
                length=d.length if L is None else L * 1e-2,
                self_steepening=self.get(s, "self_steepening", d.self_steepening),
                xpm=self.get(s, "xpm", d.xpm),
                dispersion=self.get(s, "dispersion", d.dispersion),
                lambda0=d.lambda0 if lam is None else lam * 1e-9,
                omegaT=d.omegaT if wT is None else TWO_PI * wT * 1e12,
                i_lo=self.get(s, "i_lo", d.i_lo),
                i_hi=self.get(s, "i_hi", d.i_hi),
                qpm=None if qpm == "none" else "auto",
                frame=self.get(s, "frame", "envelope"),
            )
        except ValueError as e:
            raise ConfigError(f"{self.source}: [pulse] {e}") from e

    def pulse_grid(self) -> PulseGrid:
        return PulseGrid(self.get("pulse", "M", 256), self.get("pulse", "T_w_ps", 3.072) * 1e-12)

    def pulse_inputs(self) -> dict:
        s = "pulse"
        return dict(
            pump_avg=self.get(s, "pump_avg_w", 1.0),
            seed_avg=self.get(s, "seed_avg_w", 1.0),
            f_rep=self.get(s, "f_rep_khz", 200.0) * 1e3,
            tau_fwhm=self.get(s, "tau_fwhm_fs", 210.0) * 1e-15,
            shape=self.get(s, "shape", "gaussian"),
        )

    def checkpoints(self, length: float) -> list[float]:
        cps = self.get("pulse", "checkpoints_cm")
        if cps is None:
            return [length]
        z = [c * 1e-2 for c in cps]
        if any(b <= a for a, b in zip(z, z[1:])) or z[0] <= 0 or z[-1] > length * (1 + 1e-12):
            raise ConfigError(f"{self.source}: [pulse] checkpoints_cm must increase within (0, length]")
        return z

    def bin_specs(self) -> list[BinSpec]:
        s = "qsa"
        out = []
        for dom in self.get(s, "domains", ["frequency", "time"]):
            if dom == "frequency":
                out.append(BinSpec("frequency", self.get(s, "freq_half_thz", 32.0) * 1e12,
                                   self.get(s, "freq_res_thz", 0.52) * 1e12))
            elif dom == "time":
                out.append(BinSpec("time", self.get(s, "time_half_ps", 0.75) * 1e-12,
                                   self.get(s, "time_res_ps", 0.012) * 1e-12))
            else:
                raise ConfigError(f"{self.source}: [qsa] unknown domain {dom!r}")
        return out

    def memory_cap(self) -> int:
        v = self.get("qsa", "memory_cap_gib")
        return DEFAULT_MEMORY_CAP if v is None else int(v * (1 << 30))


def _line_of(text: str, section: str, key: str) -> int | None:
    cur = None
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            cur = stripped[1:-1].strip()
        elif cur == section and re.match(rf"^{re.escape(key)}\s*[=:]", stripped):
            return n
    return None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse and validate INI text; raises :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    cfg = RunConfig(source=source)
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        schema = SCHEMA[sec]
        vals = cfg.values.setdefault(sec, {})
        for key, raw in cp.items(sec):
            where = _line_of(text, sec, key)
            loc = f"{source}:{where}" if where else source
            m = _TABLE_KEY.match(key)
            if sec == "system" and (m or schema.get(key, 0) is None):
                name, idx = (m.group(1), int(m.group(2))) if m else (key, None)
                try:
                    cfg.tables.setdefault(name, {})[idx] = _floats(raw)
                except ValueError as e:
                    raise ConfigError(f"{loc}: [{sec}] {key}: {e}") from e
                continue
            if key not in schema:
                hint = ""
                close = [k for k in schema if k and k.split("_")[0] == key.split("_")[0]]
                if close:
                    hint = f" (did you mean {', '.join(close)}?)"
                raise ConfigError(f"{loc}: unknown key [{sec}] {key}{hint}")
            try:
                vals[key] = schema[key](raw)
            except ValueError as e:
                raise ConfigError(f"{loc}: [{sec}] {key}: {e}") from e
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    return parse_config(text, str(p))
