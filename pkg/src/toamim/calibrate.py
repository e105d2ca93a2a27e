"""Radiometric calibration of 14-band L1B-style digital numbers.

Reflective bands go DN -> reflectance (percent) -> fraction.  Thermal bands
go DN -> spectral radiance -> brightness temperature (inverse Planck) ->
temperature-corrected BT -> min-max scaled value.

Wavelength convention: the band constant ``wn`` is the effective central
*wavelength* in meters, radiance is in W m^-2 sr^-1 m^-1, and the radiation
constants are c1 = 2 h c^2 and c2 = h c / k.  With that convention the inverse
Planck expression ``c2 / (wn * ln(c1 / (L * wn**5) + 1))`` is the exact inverse
of :func:`planck_radiance`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateRangeError, DomainError, KindMismatchError, ParameterError

REFLECTIVE = "reflective"
THERMAL = "thermal"

N_BANDS = 14
DN_FILL = 65535
DN_VALID_MAX = 32767

# (index, instrument band number, kind, central wavelength in micrometers)
BAND_TABLE: tuple[tuple[int, int, str, float], ...] = (
    (0, 1, REFLECTIVE, 0.659),
    (1, 2, REFLECTIVE, 0.865),
    (2, 3, REFLECTIVE, 0.47),
    (3, 6, REFLECTIVE, 1.64),
    (4, 7, REFLECTIVE, 2.13),
    (5, 21, THERMAL, 3.96),
    (6, 26, REFLECTIVE, 1.375),
    (7, 27, THERMAL, 6.72),
    (8, 28, THERMAL, 7.33),
    (9, 29, THERMAL, 8.55),
    (10, 30, THERMAL, 9.73),
    (11, 31, THERMAL, 11.03),
    (12, 32, THERMAL, 12.20),
    (13, 33, THERMAL, 13.34),
)

REFLECTIVE_BANDS: tuple[int, ...] = tuple(b[0] for b in BAND_TABLE if b[2] == REFLECTIVE)
THERMAL_BANDS: tuple[int, ...] = tuple(b[0] for b in BAND_TABLE if b[2] == THERMAL)


@dataclass(frozen=True)
class PhysicalConstants:
    """SI constants; ``c1`` and ``c2`` are always derived, never supplied."""

    h: float = 6.62607015e-34
    c: float = 299792458.0
    k: float = 1.380649e-23
    c1: float = field(init=False)
    c2: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "c1", 2.0 * self.h * self.c**2)
        object.__setattr__(self, "c2", self.h * self.c / self.k)


CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class BandCalibration:
    band_id: int
    kind: str
    wn: float  # effective central wavelength, meters
    reflectance_scale: float = 1.0
    reflectance_offset: float = 0.0
    radiance_scale: float = 1.0
    radiance_offset: float = 0.0
    tcs: float = 1.0
    tci: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in (REFLECTIVE, THERMAL):
            raise ParameterError(f"unknown band kind {self.kind!r}")
        if not (0 <= self.band_id < N_BANDS):
            raise ParameterError(f"band_id {self.band_id} outside 0..{N_BANDS - 1}")
        if self.reflectance_scale <= 0 or self.radiance_scale <= 0:
            raise ParameterError("calibration scales must be positive")
        if self.wn <= 0:
            raise ParameterError("wn must be positive")
        if self.tcs <= 0:
            raise ParameterError("tcs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScalingConstants:
    bt_min: float = 180.0
    bt_max: float = 340.0
    reflectance_factor: float = 0.01

    def __post_init__(self) -> None:
        if self.reflectance_factor != 0.01:
            raise ParameterError("reflectance_factor is fixed at 0.01")
        if not np.isfinite(self.bt_min) or not np.isfinite(self.bt_max):
            raise ParameterError("bt_min/bt_max must be finite")

    def to_dict(self) -> dict:
        return asdict(self)


def _require(cal: BandCalibration, kind: str) -> None:
    if cal.kind != kind:
        raise KindMismatchError(f"band {cal.band_id} is {cal.kind}, expected {kind}")


def dn_to_reflectance(dn, cal: BandCalibration):
    """TOA reflectance in percent: (DN - offset) * scale * 100."""
    _require(cal, REFLECTIVE)
    return (np.asarray(dn, dtype=np.float64) - cal.reflectance_offset) * cal.reflectance_scale * 100.0


def dn_to_radiance(dn, cal: BandCalibration):
    """Spectral radiance (DN - offset) * scale.  Non-positive results are returned as-is."""
    _require(cal, THERMAL)
    return (np.asarray(dn, dtype=np.float64) - cal.radiance_offset) * cal.radiance_scale


def planck_radiance(t, wn: float, const: PhysicalConstants = CONSTANTS):
    """Blackbody spectral radiance at wavelength ``wn`` (m) and temperature ``t`` (K)."""
    t = np.asarray(t, dtype=np.float64)
    if wn <= 0 or np.any(t <= 0):
        raise DomainError("planck_radiance needs t > 0 and wn > 0")
    # expm1 keeps precision when c2/(wn t) is small; overflow to inf gives 0
    with np.errstate(over="ignore"):
        return const.c1 / (wn**5 * np.expm1(const.c2 / (wn * t)))


def radiance_to_bt(radiance, cal: BandCalibration, const: PhysicalConstants = CONSTANTS):
    """Brightness temperature from spectral radiance (inverse Planck)."""
    radiance = np.asarray(radiance, dtype=np.float64)
    if np.any(~(radiance > 0)):
        raise DomainError("radiance must be > 0 for a brightness temperature")
    wn = cal.wn
    return const.c2 / (wn * np.log1p(const.c1 / (radiance * wn**5)))


def bt_correct(bt, cal: BandCalibration):
    """Apply the linear temperature correction (BT - tci) / tcs."""
    _require(cal, THERMAL)
    return (np.asarray(bt, dtype=np.float64) - cal.tci) / cal.tcs


def minmax_scale(v, sc: ScalingConstants):
    if not sc.bt_max > sc.bt_min:
        raise DegenerateRangeError(f"bt_max ({sc.bt_max}) must exceed bt_min ({sc.bt_min})")
    scaled = (np.asarray(v, dtype=np.float64) - sc.bt_min) / (sc.bt_max - sc.bt_min)
    return np.clip(scaled, 0.0, 1.0)


def default_calibrations(
    reflective_offset: float = 316.97,
    reflective_scale: float = 1.0 / 30000.0,
    thermal_offset: float = 2730.0,
    t_ceiling: float = 345.0,
    tcs: float = 1.0,
    tci: float = 0.0,
) -> tuple[BandCalibration, ...]:
    """Synthetic calibration table for the 14 bands.

    Thermal radiance scales are chosen so that a ``t_ceiling`` blackbody lands
    on the top of the valid DN range.
    """
    cals = []
    for idx, _band, kind, wl_um in BAND_TABLE:
        wn = wl_um * 1e-6
        if kind == REFLECTIVE:
            cals.append(BandCalibration(idx, kind, wn,
                                        reflectance_scale=reflective_scale,
                                        reflectance_offset=reflective_offset))
        else:
            raw_ceiling = t_ceiling * tcs + tci
            scale = float(planck_radiance(raw_ceiling, wn)) / (DN_VALID_MAX - thermal_offset)
            cals.append(BandCalibration(idx, kind, wn, radiance_scale=scale,
                                        radiance_offset=thermal_offset, tcs=tcs, tci=tci))
    return tuple(cals)


def _check_cals(cals: Sequence[BandCalibration]) -> None:
    if len(cals) != N_BANDS or any(c.band_id != i for i, c in enumerate(cals)):
        raise ParameterError("calibrations must list all 14 bands in index order")


def dn_valid(dn) -> np.ndarray:
    dn = np.asarray(dn)
    return (dn >= 0) & (dn <= DN_VALID_MAX)


def corrected_bt(dn, cal: BandCalibration) -> np.ndarray:
    """DN -> corrected brightness temperature with NaN wherever undefined."""
    rad = dn_to_radiance(dn, cal)
    ok = (rad > 0) & dn_valid(dn)
    out = np.full(rad.shape, np.nan)
    if np.any(ok):
        out[ok] = bt_correct(radiance_to_bt(rad[ok], cal), cal)
    return out


def calibrate_pixel(dn_vec, cals: Sequence[BandCalibration], sc: ScalingConstants) -> np.ndarray:
    """Calibrate and scale DN vectors of shape (..., 14) to [0, 1].

    Bands whose DN is fill/out of range, or whose radiance is non-positive,
    come back as NaN (the fill marker) instead of raising.
    """
    _check_cals(cals)
    dn = np.asarray(dn_vec)
    if dn.shape[-1] != N_BANDS:
        raise ParameterError(f"expected trailing dimension {N_BANDS}, got {dn.shape}")
    out = np.full(dn.shape, np.nan, dtype=np.float64)
    for cal in cals:
        b = cal.band_id
        d = dn[..., b]
        valid = dn_valid(d)
        if cal.kind == REFLECTIVE:
            refl = dn_to_reflectance(d, cal) * sc.reflectance_factor
            out[..., b] = np.where(valid, np.clip(refl, 0.0, 1.0), np.nan)
        else:
            bt = corrected_bt(d, cal)
            scaled = np.where(np.isfinite(bt), minmax_scale(np.nan_to_num(bt), sc), np.nan)
            out[..., b] = scaled
    return out


def fit_scaling(bt_values) -> ScalingConstants:
    """Global min/max over every finite corrected thermal BT in a corpus."""
    arr = np.asarray(bt_values, dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        raise DomainError("no finite brightness temperatures to fit scaling constants")
    lo, hi = float(arr.min()), float(arr.max())
    if not hi > lo:
        raise DegenerateRangeError("corpus brightness temperatures are constant")
    return ScalingConstants(bt_min=lo, bt_max=hi)


def calibration_document(cals: Sequence[BandCalibration], sc: ScalingConstants) -> dict:
    """Dataset-metadata block: calibration constants keyed by band_id plus scaling."""
    return {
        "bands": {str(c.band_id): c.to_dict() for c in cals},
        "scaling": sc.to_dict(),
        "constants": {"h": CONSTANTS.h, "c": CONSTANTS.c, "k": CONSTANTS.k,
                      "c1": CONSTANTS.c1, "c2": CONSTANTS.c2},
    }


def calibrations_from_document(doc: dict) -> tuple[tuple[BandCalibration, ...], ScalingConstants]:
    cals = tuple(BandCalibration(**doc["bands"][str(i)]) for i in range(N_BANDS))
    return cals, ScalingConstants(**doc["scaling"])


def calibration_digest(cals: Sequence[BandCalibration], sc: ScalingConstants) -> str:
    blob = json.dumps(calibration_document(cals, sc), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
