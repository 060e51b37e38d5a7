"""Run configuration: a YAML file with bath, fit, system, method and output sections."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .bath import BathSpec, LorentzianNoise, SpectralDensity
from .fpheom import SystemSpec, Truncation
from .integrate import IntegratorConfig
from .modefit import FrequencyWindow
from .models import NAMED_OPERATORS, pure_dephasing, spin_boson

__all__ = ["ConfigError", "RunConfig", "load_config", "METHODS"]

METHODS = ("fp-heom", "lindblad", "alt-lindblad", "conventional-heom", "redfield-plus", "redfield", "sln", "hops")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; the message names the key."""


def _num(section: dict, key: str, where: str, default=None, required=False) -> Optional[float]:
    if key not in section or section[key] is None:
        if required:
            raise ConfigError(f"{where}.{key}: missing required value")
        return default
    v = section[key]
    try:
        # YAML 1.1 reads "1e-9" as a string, so coerce explicitly
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}: expected a number, got {v!r}") from None


def _int(section: dict, key: str, where: str, default=None, required=False) -> Optional[int]:
    v = _num(section, key, where, default, required)
    if v is None:
        return None
    if v != int(v):
        raise ConfigError(f"{where}.{key}: expected an integer, got {v!r}")
    return int(v)


def _matrix(value, where: str, N: Optional[int] = None) -> np.ndarray:
    if isinstance(value, str):
        if value.lower() in NAMED_OPERATORS:
            m = NAMED_OPERATORS[value.lower()]
        else:
            raise ConfigError(f"{where}: unknown named operator {value!r}")
    else:
        try:
            m = np.array([[complex(str(x).replace(" ", "")) if isinstance(x, str) else complex(x) for x in row]
                          for row in value], dtype=complex)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: not a matrix literal") from None
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigError(f"{where}: matrix must be square")
    if N is not None and m.shape != (N, N):
        raise ConfigError(f"{where}: expected a {N}x{N} matrix, got {m.shape[0]}x{m.shape[1]}")
    return m


@dataclass
class RunConfig:
    """Parsed configuration.

    Only the sections a command needs are validated when it asks for them,
    so a decompose-only file does not need a system section.
    """

    raw: Dict[str, Any]
    base_dir: str = "."

    def section(self, name: str, required: bool = True) -> dict:
        sec = self.raw.get(name)
        if sec is None:
            if required:
                raise ConfigError(f"{name}: missing section")
            return {}
        if not isinstance(sec, dict):
            raise ConfigError(f"{name}: section must be a mapping")
        return sec

    def path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    # bath ---------------------------------------------------------------
    def bath(self):
        sec = self.section("bath")
        fam = sec.get("family")
        if fam is None:
            raise ConfigError("bath.family: missing required value")
        if fam == "lorentzian-noise":
            peaks = sec.get("peaks")
            if not peaks:
                raise ConfigError("bath.peaks: lorentzian-noise needs [re_d, im_d, gamma, omega] rows")
            try:
                rows = tuple((complex(float(p[0]), float(p[1])), float(p[2]), float(p[3])) for p in peaks)
            except (TypeError, ValueError, IndexError):
                raise ConfigError("bath.peaks: rows must be [re_d, im_d, gamma, omega]") from None
            return LorentzianNoise(rows)
        where = "bath"
        beta = _num(sec, "beta", where)
        temp = _num(sec, "temperature", where)
        if beta is None:
            beta = math.inf if temp in (None, 0.0) else 1.0 / temp
        try:
            if fam in ("ohmic-exponential-cutoff", "sub-ohmic-exponential-cutoff"):
                dens = SpectralDensity(fam, alpha=_num(sec, "alpha", where, required=True),
                                       omega_c=_num(sec, "omega_c", where, required=True),
                                       eta=_num(sec, "eta", where, 1.0))
            elif fam == "lorentzian-sum":
                dens = SpectralDensity(fam, lorentzians=tuple(tuple(float(x) for x in p) for p in sec.get("lorentzians", [])))
            elif fam == "tabulated":
                path = sec.get("table")
                if not path:
                    raise ConfigError("bath.table: tabulated family needs a file path")
                data = np.loadtxt(self.path(path))
                if data.ndim != 2 or data.shape[1] != 2:
                    raise ConfigError("bath.table: file must hold two columns (omega, J)")
                dens = SpectralDensity(fam, table=(data[:, 0], data[:, 1]), extrapolate=bool(sec.get("extrapolate", False)))
            else:
                raise ConfigError(f"bath.family: unknown family {fam!r}")
            return BathSpec(dens, beta)
        except ConfigError:
            raise
        except (ValueError, OSError) as exc:
            raise ConfigError(f"bath: {exc}") from None

    # fit ----------------------------------------------------------------
    def fit_params(self):
        sec = self.section("fit")
        eps = sec.get("omega_eps")
        if eps is None:
            raise ConfigError("fit.omega_eps: missing required value")
        eps_list = [float(e) for e in eps] if isinstance(eps, (list, tuple)) else [float(eps)]
        omega_D = _num(sec, "omega_D", "fit", required=True)
        delta = _num(sec, "delta", "fit", 1e-9)
        ppd = _int(sec, "points_per_decade", "fit", 20)
        K_max = _int(sec, "K_max", "fit", 200)
        for e in eps_list:
            if not 0 < e < omega_D:
                raise ConfigError(f"fit.omega_eps: {e} must lie in (0, omega_D)")
        return eps_list, omega_D, delta, ppd, K_max

    def window(self) -> FrequencyWindow:
        eps, omega_D, _, ppd, _ = self.fit_params()
        return FrequencyWindow(eps[0], omega_D, ppd)

    def modes_file(self) -> Optional[str]:
        for name in ("method", "fit"):
            sec = self.section(name, required=False)
            if sec.get("modes_file"):
                return self.path(sec["modes_file"])
        return None

    # system -------------------------------------------------------------
    def system(self) -> SystemSpec:
        sec = self.section("system")
        preset = sec.get("preset")
        obs_spec = self.section("output", required=False).get("observables", sec.get("observables"))
        try:
            if preset == "spin-boson":
                sys_ = spin_boson(_num(sec, "delta", "system", 1.0), _num(sec, "epsilon", "system", 0.0))
            elif preset == "pure-dephasing":
                sys_ = pure_dephasing(_num(sec, "epsilon", "system", 1.0))
            elif preset is None:
                for key in ("H", "q", "rho0"):
                    if key not in sec:
                        raise ConfigError(f"system.{key}: missing required value")
                H = _matrix(sec["H"], "system.H")
                N = H.shape[0]
                if "N" in sec and _int(sec, "N", "system") != N:
                    raise ConfigError("system.N: does not match the size of system.H")
                sys_ = SystemSpec(H, _matrix(sec["q"], "system.q", N), _matrix(sec["rho0"], "system.rho0", N))
            else:
                raise ConfigError(f"system.preset: unknown preset {preset!r}")
            if obs_spec:
                if not isinstance(obs_spec, dict):
                    raise ConfigError("output.observables: must map names to matrices")
                sys_.observables = {k: _matrix(v, f"output.observables.{k}", sys_.N) for k, v in obs_spec.items()}
            return sys_
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"system: {exc}") from None

    # method -------------------------------------------------------------
    def methods(self) -> List[dict]:
        """The method section, or the list under ``compare.methods``."""
        cmp_ = self.raw.get("compare")
        if cmp_ and cmp_.get("methods"):
            base = dict(self.section("method", required=False))
            return [{**base, **m} for m in cmp_["methods"]]
        return [self.section("method")]

    @staticmethod
    def method_name(m: dict) -> str:
        name = m.get("name")
        if name not in METHODS:
            raise ConfigError(f"method.name: expected one of {', '.join(METHODS)}, got {name!r}")
        return name

    @staticmethod
    def truncation(m: dict) -> Truncation:
        L = _int(m, "L", "method", 4)
        caps = m.get("caps")
        if isinstance(caps, list):
            caps = tuple(int(c) for c in caps)
        elif caps is not None:
            caps = int(caps)
        if L < 0:
            raise ConfigError("method.L: must be >= 0")
        return Truncation(L, caps)

    @staticmethod
    def integrator(m: dict) -> IntegratorConfig:
        integ = m.get("integrator", "rk4")
        if integ not in ("rk4", "rk45"):
            raise ConfigError(f"method.integrator: expected rk4 or rk45, got {integ!r}")
        return IntegratorConfig(method=integ, dt=_num(m, "dt", "method"), atol=_num(m, "atol", "method", 1e-10),
                                rtol=_num(m, "rtol", "method", 1e-8), n_samples=_int(m, "n_samples", "method", 101))

    @staticmethod
    def t_final(m: dict) -> float:
        t = _num(m, "t_final", "method", required=True)
        if t <= 0:
            raise ConfigError("method.t_final: must be positive")
        return t

    def output(self) -> dict:
        return self.section("output", required=False)


def load_config(path: str) -> RunConfig:
    """Read and minimally validate a configuration file."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    known = {"bath", "fit", "system", "method", "output", "compare"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    return RunConfig(raw, os.path.dirname(os.path.abspath(path)))
