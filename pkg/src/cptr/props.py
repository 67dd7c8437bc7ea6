"""Fluid and rock property correlations with analytic p/T derivatives.

All functions take SI inputs (Pa, K) and return SI outputs.  Unit conversions
to the field units of the water correlations happen inside each function.
Every correlation is vectorised over numpy arrays.
"""
from dataclasses import dataclass, field, replace

import numpy as np

KELVIN_OFFSET = 273.15
PA_PER_MPA = 1.0e6
PA_S_PER_CP = 1.0e-3


class PropertyRangeError(ValueError):
    """A correlation was evaluated outside the range it is defined on."""


@dataclass(frozen=True)
class PropEval:
    """A property value with its partial derivatives in pressure and temperature."""
    value: np.ndarray
    d_dp: np.ndarray
    d_dT: np.ndarray


@dataclass(frozen=True)
class PropertyConfig:
    # specific heats, J/(K kg)
    c_v_oil: float = 2093.4
    c_v_water: float = 4181.3
    c_v_rock: float = 920.0
    rho_rock: float = 2650.0
    # thermal conductivities, W/(m K)
    k_T_oil: float = 0.15
    k_T_water: float = 0.6005638
    k_T_rock: float = 1.7295772056
    # water viscosity, cp with T in degF
    visc_A: float = 2.1850
    visc_B: float = 0.04012
    visc_C: float = 5.1547e-6
    # water density (Kell/Trangenstein), degC and MPa
    kell_E: tuple = field(default=(999.83952, 16.955176, -7.987e-3, -46.170461e-6,
                                   105.56302e-9, -280.54353e-12, 16.87985e-3, 10.2))
    kell_Cw: float = 3.98854e-4
    # oil density
    rho_ref: float = 999.83952
    c_compress: float = 5.0e-10
    beta_expand: float = 5.0e-4
    p_ref: float = 101325.0
    T_ref_rho: float = 288.706
    # oil viscosity
    mu_ref: float = 1.0
    b_visc: float = 9000.0
    T_ref_mu: float = 288.706
    coupling_factor: float = 1.0

    def __post_init__(self):
        positive = ("c_v_oil", "c_v_water", "c_v_rock", "rho_rock", "k_T_oil",
                    "k_T_water", "k_T_rock", "rho_ref", "mu_ref")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.coupling_factor < 1:
            raise ValueError("coupling_factor must be >= 1")

    def with_coupling(self, factor):
        return replace(self, coupling_factor=float(factor))


DEFAULT_PROPS = PropertyConfig()

WATER_VISCOSITY_RANGE = (273.0, 500.0)


def water_viscosity(T, props=DEFAULT_PROPS):
    T = np.asarray(T, dtype=float)
    lo, hi = WATER_VISCOSITY_RANGE
    if np.any(T < lo) or np.any(T > hi) or np.any(~np.isfinite(T)):
        raise PropertyRangeError(f"water viscosity correlation valid on [{lo}, {hi}] K")
    T_F = (T - KELVIN_OFFSET) * 1.8 + 32.0
    den = -1.0 + props.visc_B * T_F + props.visc_C * T_F ** 2
    mu = props.visc_A / den * PA_S_PER_CP
    dmu_dTF = -props.visc_A * (props.visc_B + 2.0 * props.visc_C * T_F) / den ** 2 * PA_S_PER_CP
    return PropEval(mu, np.zeros_like(mu), dmu_dTF * 1.8)


def water_density(p, T, props=DEFAULT_PROPS):
    p = np.asarray(p, dtype=float)
    T = np.asarray(T, dtype=float)
    T_C = T - KELVIN_OFFSET
    if np.any(T_C < 0) or np.any(~np.isfinite(T_C)):
        raise PropertyRangeError("water density correlation needs T >= 0 degC")
    E0, E1, E2, E3, E4, E5, E6, E7 = props.kell_E
    num = E0 + T_C * (E1 + T_C * (E2 + T_C * (E3 + T_C * (E4 + T_C * E5))))
    dnum = E1 + T_C * (2 * E2 + T_C * (3 * E3 + T_C * (4 * E4 + T_C * 5 * E5)))
    den = 1.0 + E6 * T_C
    expo = np.exp(props.kell_Cw * (p / PA_PER_MPA - E7))
    rho = num / den * expo
    d_dT = (dnum * den - num * E6) / den ** 2 * expo
    d_dp = rho * props.kell_Cw / PA_PER_MPA
    return PropEval(rho, d_dp, d_dT)


def oil_viscosity(T, props=DEFAULT_PROPS):
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise PropertyRangeError("oil viscosity needs T > 0 K")
    mu = props.mu_ref * np.exp(props.b_visc * (1.0 / T - 1.0 / props.T_ref_mu))
    return PropEval(mu, np.zeros_like(mu), -props.b_visc / T ** 2 * mu)


def oil_density(p, T, props=DEFAULT_PROPS, coupling_factor=None):
    f = props.coupling_factor if coupling_factor is None else coupling_factor
    p = np.asarray(p, dtype=float)
    T = np.asarray(T, dtype=float)
    c = f * props.c_compress
    beta = f * props.beta_expand
    rho = props.rho_ref * np.exp(c * (p - props.p_ref) - beta * (T - props.T_ref_rho))
    return PropEval(rho, c * rho, -beta * rho)


def clamp_saturation(S_o):
    """Clip saturation to [0, 1]; also return the mask of clipped entries."""
    S_o = np.asarray(S_o, dtype=float)
    return np.clip(S_o, 0.0, 1.0), (S_o < 0.0) | (S_o > 1.0)


def rel_perm(S_o):
    """Linear relative permeabilities ``(k_ro, k_rw)``.  Out-of-range input is clamped."""
    S, _ = clamp_saturation(S_o)
    return S, 1.0 - S


def thermal_conductivity(phi, S_o, props=DEFAULT_PROPS):
    phi = np.asarray(phi, dtype=float)
    S_o = np.asarray(S_o, dtype=float)
    if np.any((phi < 0) | (phi > 1)) or np.any((S_o < 0) | (S_o > 1)):
        raise ValueError("porosity and saturation must lie in [0, 1]")
    k = ((1.0 - phi) * props.k_T_rock
         + phi * (S_o * props.k_T_oil + (1.0 - S_o) * props.k_T_water))
    return k[()] if k.ndim == 0 else k
