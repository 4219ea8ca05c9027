"""Link gains, received power, noise and SINR.

All interference arithmetic happens in linear milliwatts; dBm appears only at
I/O boundaries. The channel gain of a link is h = g * xi * alpha where alpha
is the deterministic pathloss gain, xi a median-1 log-normal shadowing term
and g an optional unit-mean fast fading term. Every sampling function accepts
scalars or numpy arrays of distances and is deterministic given the RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Union

import numpy as np

THERMAL_NOISE_DBM_PER_HZ = -174.0

ArrayLike = Union[float, np.ndarray]


def db_to_linear(db: ArrayLike) -> ArrayLike:
    """dB (or dBm) to linear ratio (or mW)."""
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0) if isinstance(db, np.ndarray) else 10.0 ** (db / 10.0)


def linear_to_db(x: ArrayLike) -> ArrayLike:
    """Linear ratio (or mW) to dB (or dBm)."""
    return 10.0 * np.log10(x) if isinstance(x, np.ndarray) else 10.0 * math.log10(x)


@dataclass(frozen=True)
class PowerLaw:
    """alpha = constant * d^(-exponent)."""

    constant: float = 1.0
    exponent: float = 2.0

    def __post_init__(self) -> None:
        if self.exponent <= 0:
            raise ValueError("pathloss exponent must be > 0")


@dataclass(frozen=True)
class WinnerB1Los:
    """Winner+ B1 LOS below-breakpoint sub-model.

    PL_dB = 22.7*log10(d) + 41.0 + 20*log10(f_c / 5.0), f_c in GHz.
    """

    carrier_ghz: float = 5.9


class FastFading(Enum):
    NONE = "none"
    RAYLEIGH_UNIT_MEAN = "rayleigh"


@dataclass(frozen=True)
class ChannelParams:
    pathloss: PowerLaw | WinnerB1Los
    shadowing_sigma_db: float = 0.0
    fast_fading: FastFading = FastFading.NONE

    def __post_init__(self) -> None:
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing_sigma_db must be >= 0")


@dataclass(frozen=True)
class LinkBudget:
    tx_power_dbm: float = 23.0
    tx_gain_dbi: float = 3.0
    rx_gain_dbi: float = 3.0
    noise_figure_db: float = 9.0
    bandwidth_hz: float = 20e6

    def __post_init__(self) -> None:
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth_hz must be > 0")

    def eirp_dbm(self) -> float:
        return self.tx_power_dbm + self.tx_gain_dbi + self.rx_gain_dbi


def pathloss_gain(distance_m: ArrayLike, params: ChannelParams) -> ArrayLike:
    """Deterministic linear power gain alpha at the given distance(s)."""
    d = np.asarray(distance_m, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance_m must be > 0")
    model = params.pathloss
    if isinstance(model, PowerLaw):
        gain = model.constant * d ** (-model.exponent)
    else:
        pl_db = 22.7 * np.log10(d) + 41.0 + 20.0 * np.log10(model.carrier_ghz / 5.0)
        gain = 10.0 ** (-pl_db / 10.0)
    return float(gain) if np.isscalar(distance_m) else gain


def sample_channel_gain(
    rng: np.random.Generator, distance_m: ArrayLike, params: ChannelParams
) -> ArrayLike:
    """One realization h = g * xi * alpha.

    xi is log-normal with median 1 and std shadowing_sigma_db in the dB
    domain; g is exponential with unit mean under Rayleigh fading. With
    sigma = 0 and fading off, h equals the pathloss gain exactly.
    """
    alpha = pathloss_gain(distance_m, params)
    shape = np.shape(np.asarray(distance_m, dtype=float))
    h = np.asarray(alpha, dtype=float).copy()
    if params.shadowing_sigma_db > 0:
        shadow_db = rng.normal(0.0, params.shadowing_sigma_db, size=shape)
        h = h * 10.0 ** (shadow_db / 10.0)
    if params.fast_fading is FastFading.RAYLEIGH_UNIT_MEAN:
        h = h * rng.exponential(1.0, size=shape)
    return float(h) if np.isscalar(distance_m) else h


def noise_power_dbm(budget: LinkBudget) -> float:
    """Thermal noise floor plus noise figure over the budget bandwidth."""
    return THERMAL_NOISE_DBM_PER_HZ + 10.0 * math.log10(budget.bandwidth_hz) + budget.noise_figure_db


def sinr_linear(signal_mw: float, interferer_mw: Iterable[float], noise_mw: float) -> float:
    """signal / (noise + sum of co-cell interferer powers), all linear."""
    if noise_mw <= 0:
        raise ValueError("noise_mw must be > 0")
    total_interference = 0.0
    for p in interferer_mw:
        if p < 0:
            raise ValueError("interferer powers must be >= 0")
        total_interference += p
    if signal_mw < 0:
        raise ValueError("signal_mw must be >= 0")
    return signal_mw / (noise_mw + total_interference)
