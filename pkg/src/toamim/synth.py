"""Synthetic scenes, swath granules and curtain-labelled chips.

Every generator is a pure function of ``(seed, params)``.  Scenes hold
geophysical fields (surface reflectance, surface temperature, a single cloud
layer); a small monotone band model turns them into top-of-atmosphere
reflectance and brightness temperature, and :func:`gen_swath` runs the
calibration chain backwards to produce 16-bit digital numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage, special

from . import calibrate as cal_mod
from .calibrate import (BandCalibration, ScalingConstants, DN_FILL, DN_VALID_MAX,
                        REFLECTIVE_BANDS, THERMAL_BANDS, N_BANDS)
from .chipper import ImageChip
from .errors import EmptyGranuleError, ParameterError

EARTH_RADIUS_KM = 6371.0
KM_PER_DEG = 111.195

# Reflective band model, in REFLECTIVE_BANDS order (bands 1, 2, 3, 6, 7, 26).
_OCEAN_REFL = np.array([0.04, 0.02, 0.07, 0.01, 0.008, 0.005])
_LAND_REFL_BARE = np.array([0.14, 0.22, 0.09, 0.28, 0.20, 0.01])
_LAND_REFL_VEG_SLOPE = np.array([-0.08, 0.22, -0.05, 0.04, -0.07, 0.0])
_CLOUD_WHITE = np.array([0.80, 0.78, 0.82, 0.60, 0.45, 0.70])

# Thermal band model, in THERMAL_BANDS order (bands 21, 27, 28, 29, 30, 31, 32, 33):
# band BT = gain * effective emitting temperature + offset.
_THERMAL_GAIN = np.array([1.0, 0.55, 0.7, 1.0, 0.9, 1.0, 1.0, 0.8])
_THERMAL_OFFSET = np.array([3.0, 105.0, 80.0, -1.0, 10.0, 0.0, -1.5, 40.0])
BT_CLIP = (185.0, 335.0)
LAPSE_RATE = 6.5e-3  # K per meter


@dataclass(frozen=True)
class SceneParams:
    width: int = 64
    height: int = 64
    corr_length: float = 8.0
    cloud_cover: float = 0.4
    tau_max: float = 40.0
    cloud_top_range: tuple[float, float] = (1000.0, 12000.0)
    surface_temp: float = 288.0
    temp_spread: float = 8.0
    lat_gradient: float = 40.0
    land_fraction: float = 0.35
    # lat_min, lat_max, lon_min, lon_max
    bounds: tuple[float, float, float, float] = (-90.0, 90.0, -180.0, 180.0)

    def validate(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ParameterError(f"scene must be at least 16x16, got {self.height}x{self.width}")
        if not self.corr_length > 0:
            raise ParameterError("corr_length must be positive")
        if not 0.0 <= self.cloud_cover <= 1.0:
            raise ParameterError("cloud_cover must lie in [0, 1]")
        lat0, lat1, lon0, lon1 = self.bounds
        if not (-90 <= lat0 < lat1 <= 90 and -180 <= lon0 < lon1 <= 180):
            raise ParameterError(f"invalid geographic bounds {self.bounds}")


@dataclass(frozen=True, eq=False)
class Scene:
    width: int
    height: int
    surface_field: np.ndarray  # (H, W, 6) reflective-band surface reflectance
    temp_field: np.ndarray  # (H, W) kelvin
    optical_depth: np.ndarray  # (H, W)
    cloud_top: np.ndarray  # (H, W) meters
    cloud_bottom: np.ndarray  # (H, W) meters
    seed: int
    bounds: tuple[float, float, float, float] = (-90.0, 90.0, -180.0, 180.0)

    def cell_lat(self) -> np.ndarray:
        lat0, lat1, _, _ = self.bounds
        return lat1 - (np.arange(self.height) + 0.5) * (lat1 - lat0) / self.height

    def cell_lon(self) -> np.ndarray:
        _, _, lon0, lon1 = self.bounds
        return lon0 + (np.arange(self.width) + 0.5) * (lon1 - lon0) / self.width

    def with_clouds(self, optical_depth, cloud_top, cloud_bottom) -> "Scene":
        shape = (self.height, self.width)
        return replace(
            self,
            optical_depth=np.broadcast_to(np.asarray(optical_depth, float), shape).copy(),
            cloud_top=np.broadcast_to(np.asarray(cloud_top, float), shape).copy(),
            cloud_bottom=np.broadcast_to(np.asarray(cloud_bottom, float), shape).copy(),
        )


def _smooth_field(rng: np.random.Generator, shape, corr: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=corr, mode="wrap")
    std = f.std()
    return (f - f.mean()) / (std if std > 0 else 1.0)


def gen_scene(seed: int, params: SceneParams = SceneParams()) -> Scene:
    params.validate()
    rng = np.random.default_rng(seed)
    shape = (params.height, params.width)
    corr = params.corr_length

    land_f = _smooth_field(rng, shape, 2.0 * corr)
    veg_f = _smooth_field(rng, shape, corr)
    texture = _smooth_field(rng, shape, max(corr / 4.0, 0.5))
    temp_f = _smooth_field(rng, shape, 1.5 * corr)
    cloud_f = _smooth_field(rng, shape, corr)
    top_f = _smooth_field(rng, shape, 1.5 * corr)
    thick_f = _smooth_field(rng, shape, corr)

    land = land_f > np.quantile(land_f, 1.0 - params.land_fraction)
    veg = special.ndtr(veg_f)[..., None]
    land_refl = _LAND_REFL_BARE + _LAND_REFL_VEG_SLOPE * veg
    surface = np.where(land[..., None], land_refl, _OCEAN_REFL)
    surface = np.clip(surface * (1.0 + 0.08 * texture[..., None]), 0.0, 0.6)

    lat0, lat1, _, _ = params.bounds
    lat = lat1 - (np.arange(params.height) + 0.5) * (lat1 - lat0) / params.height
    temp = (params.surface_temp
            - params.lat_gradient * np.sin(np.radians(lat))[:, None] ** 2
            + params.temp_spread * temp_f
            + 3.0 * land)

    if params.cloud_cover > 0:
        thr = np.quantile(cloud_f, 1.0 - params.cloud_cover)
        excess = np.clip(cloud_f - thr, 0.0, None)
    else:
        excess = np.zeros(shape)
    tau = params.tau_max * excess / (excess + 1.0)
    cloudy = tau > 0
    lo, hi = params.cloud_top_range
    top = lo + (hi - lo) * special.ndtr(top_f)
    thickness = 300.0 + 3500.0 * np.sqrt(tau / params.tau_max) * (1.0 + 0.3 * special.erf(thick_f))
    bottom = np.clip(top - thickness, 0.0, None)
    top = np.where(cloudy, top, 0.0)
    bottom = np.where(cloudy, bottom, 0.0)

    return Scene(params.width, params.height, surface, temp, tau, top, bottom, int(seed), params.bounds)


def toa_physical(scene: Scene) -> np.ndarray:
    """Top-of-atmosphere signal (H, W, 14): reflectance fraction or corrected BT in K.

    Reflective bands rise monotonically with optical depth; thermal bands fall
    monotonically with cloud-top height for any cloudy pixel.
    """
    tau = scene.optical_depth
    out = np.empty((scene.height, scene.width, N_BANDS))

    albedo = tau / (tau + 6.0)
    a = np.repeat(albedo[..., None], len(REFLECTIVE_BANDS), axis=-1)
    # the 1.375 um band only sees clouds well above the water-vapour layer
    a[..., -1] = albedo * np.clip(scene.cloud_top / 8000.0, 0.0, 1.0)
    refl = scene.surface_field * (1.0 - a) + _CLOUD_WHITE * a
    out[..., list(REFLECTIVE_BANDS)] = refl

    emissivity = -np.expm1(-0.5 * tau)
    top_temp = np.maximum(scene.temp_field - LAPSE_RATE * scene.cloud_top, 190.0)
    t_eff = scene.temp_field * (1.0 - emissivity) + top_temp * emissivity
    bt = _THERMAL_GAIN * t_eff[..., None] + _THERMAL_OFFSET
    out[..., list(THERMAL_BANDS)] = np.clip(bt, *BT_CLIP)
    return out


def scale_physical(phys: np.ndarray, sc: ScalingConstants) -> np.ndarray:
    """Map physical TOA values onto the [0, 1] model range (NaN passes through)."""
    out = np.array(phys, dtype=np.float64, copy=True)
    r = list(REFLECTIVE_BANDS)
    t = list(THERMAL_BANDS)
    out[..., r] = np.clip(out[..., r], 0.0, 1.0)
    tb = out[..., t]
    out[..., t] = np.where(np.isfinite(tb), cal_mod.minmax_scale(np.nan_to_num(tb), sc), np.nan)
    return out


def sample_scene(scene: Scene, lat, lon) -> np.ndarray:
    """Bilinear sample of :func:`toa_physical` at (lat, lon); NaN outside the scene."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    lat0, lat1, lon0, lon1 = scene.bounds
    row = (lat1 - lat) / (lat1 - lat0) * scene.height - 0.5
    col = (lon - lon0) / (lon1 - lon0) * scene.width - 0.5
    inside = (lat >= lat0) & (lat <= lat1) & (lon >= lon0) & (lon < lon1)
    phys = toa_physical(scene)
    coords = np.stack([row.ravel(), col.ravel()])
    full_lon = lon0 == -180.0 and lon1 == 180.0
    out = np.empty(lat.shape + (N_BANDS,))
    for b in range(N_BANDS):
        if full_lon:
            vals = ndimage.map_coordinates(phys[..., b], coords, order=1, mode="grid-wrap")
            # latitude must not wrap; redo rows with nearest-edge handling
            vals_n = ndimage.map_coordinates(phys[..., b], coords, order=1, mode="nearest")
            edge = (coords[0] < 0) | (coords[0] > scene.height - 1)
            vals = np.where(edge, vals_n, vals)
        else:
            vals = ndimage.map_coordinates(phys[..., b], coords, order=1, mode="nearest")
        out[..., b] = vals.reshape(lat.shape)
    out[~inside] = np.nan
    return out


@dataclass(frozen=True)
class OrbitParams:
    """Straight-line descending pass: a simplified sun-synchronous overpass."""

    lon_equator: float = 0.0
    lat_start: float = 80.0
    lat_end: float = -80.0
    lon_drift: float = -8.0  # longitude change of the sub-satellite track over the pass
    n_cols: int = 59
    pixel_km: float = 40.0
    altitude_km: float = 705.0
    local_time_h: float = 10.5
    day_of_year: int = 172
    noise_dn: int = 0
    seed: int = 0
    granule_id: str = "g000"
    date: str = "2000-06-21"

    @property
    def nadir_col(self) -> int:
        return self.n_cols // 2


@dataclass(eq=False)
class SwathGranule:
    dn: np.ndarray  # (rows, cols, 14) uint16
    lat: np.ndarray
    lon: np.ndarray
    view_zenith: np.ndarray
    solar_zenith: np.ndarray
    band_meta: tuple[BandCalibration, ...]
    granule_id: str = "g000"
    date: str = "2000-01-01"

    @property
    def shape(self) -> tuple[int, int]:
        return self.lat.shape

    def sort_key(self) -> tuple[str, str]:
        return (self.date, self.granule_id)


def view_zenith_for_offset(cross_km, altitude_km: float = 705.0) -> np.ndarray:
    """Ground view zenith (deg) for a cross-track ground distance on a spherical Earth."""
    gamma = np.abs(np.asarray(cross_km, dtype=np.float64)) / EARTH_RADIUS_KM
    rs = EARTH_RADIUS_KM + altitude_km
    scan = np.arctan2(EARTH_RADIUS_KM * np.sin(gamma), rs - EARTH_RADIUS_KM * np.cos(gamma))
    return np.degrees(scan + gamma)


def solar_zenith(lat, lon, track_lon, local_time_h: float, day_of_year: int) -> np.ndarray:
    decl = np.radians(-23.44 * math.cos(2.0 * math.pi * (day_of_year + 10) / 365.0))
    lst = local_time_h + (np.asarray(lon) - track_lon) / 15.0
    hour_angle = np.radians(15.0 * (lst - 12.0))
    phi = np.radians(lat)
    cos_z = np.sin(phi) * math.sin(decl) + np.cos(phi) * math.cos(decl) * np.cos(hour_angle)
    return np.degrees(np.arccos(np.clip(cos_z, -1.0, 1.0)))


def physical_to_dn(phys: np.ndarray, cals: Sequence[BandCalibration], noise=None) -> np.ndarray:
    """Inverse calibration: physical values (..., 14) -> integer DNs, fill where NaN."""
    dn = np.empty(phys.shape, dtype=np.float64)
    for c in cals:
        b = c.band_id
        v = phys[..., b]
        if c.kind == cal_mod.REFLECTIVE:
            dn[..., b] = v / c.reflectance_scale + c.reflectance_offset
        else:
            raw = np.where(np.isfinite(v), v * c.tcs + c.tci, 1.0)
            rad = cal_mod.planck_radiance(np.maximum(raw, 1.0), c.wn)
            dn[..., b] = np.where(np.isfinite(v), rad / c.radiance_scale + c.radiance_offset, np.nan)
    fill = ~np.isfinite(dn)
    dn = np.rint(np.nan_to_num(dn))
    if noise is not None:
        dn = dn + noise
    dn = np.clip(dn, 0, DN_VALID_MAX)
    dn[fill] = DN_FILL
    return dn.astype(np.uint16)


def gen_swath(scene: Scene, orbit: OrbitParams = OrbitParams(),
              cals: Sequence[BandCalibration] | None = None) -> SwathGranule:
    cals = tuple(cals) if cals is not None else cal_mod.default_calibrations()
    along_km = abs(orbit.lat_start - orbit.lat_end) * KM_PER_DEG
    rows = max(int(along_km // orbit.pixel_km) + 1, 2)
    frac = np.linspace(0.0, 1.0, rows)
    track_lat = orbit.lat_start + (orbit.lat_end - orbit.lat_start) * frac
    track_lon = orbit.lon_equator + orbit.lon_drift * (frac - 0.5)
    cross_km = (np.arange(orbit.n_cols) - orbit.nadir_col) * orbit.pixel_km

    lat = np.repeat(track_lat[:, None], orbit.n_cols, axis=1)
    coslat = np.maximum(np.cos(np.radians(lat)), 0.05)
    lon = track_lon[:, None] + cross_km[None, :] / (KM_PER_DEG * coslat)
    lon = (lon + 180.0) % 360.0 - 180.0
    lat = np.clip(lat, -90.0, 90.0)

    vza = np.broadcast_to(view_zenith_for_offset(cross_km, orbit.altitude_km), lat.shape).copy()
    vza[:, orbit.nadir_col] = 0.0
    sza = solar_zenith(lat, lon, track_lon[:, None], orbit.local_time_h, orbit.day_of_year)

    phys = sample_scene(scene, lat, lon)
    if not np.any(np.isfinite(phys[..., 0])):
        raise EmptyGranuleError(f"swath {orbit.granule_id} does not intersect the scene")
    noise = None
    if orbit.noise_dn > 0:
        rng = np.random.default_rng(orbit.seed)
        noise = rng.integers(-orbit.noise_dn, orbit.noise_dn + 1, size=phys.shape)
    dn = physical_to_dn(phys, cals, noise)
    return SwathGranule(dn, lat, lon, vza, sza, cals, orbit.granule_id, orbit.date)


def render_chip(scene: Scene, sc: ScalingConstants, **meta) -> ImageChip:
    """Render a scene straight to a scaled chip (no DN / compositing round trip)."""
    data = scale_physical(toa_physical(scene), sc).astype(np.float32)
    return ImageChip(data=data, **meta)


# --- curtain-labelled samples -------------------------------------------------

@dataclass(frozen=True)
class CurtainParams:
    chip_size: int = 64
    height_bins: int = 32
    max_height_m: float = 16000.0
    corr_length: float = 6.0
    cloud_cover: float = 0.45
    local_time_tag: str = "13:30"

    def validate(self) -> None:
        if self.height_bins < 8:
            raise ParameterError("height_bins must be >= 8")
        if self.chip_size < 16:
            raise ParameterError("chip_size must be >= 16")
        if not self.max_height_m > 0:
            raise ParameterError("max_height_m must be positive")


@dataclass(eq=False)
class CurtainSample:
    chip: ImageChip
    curtain: np.ndarray  # (along_track, height_bins) uint8
    local_time_tag: str = "13:30"


def curtain_from_scene(scene: Scene, height_bins: int, max_height_m: float,
                       column: int | None = None) -> np.ndarray:
    """Binary cloud occupancy of one scene column, discretised to height bins.

    A cloudy cell fills bins ``floor(bottom/dz)`` through ``ceil(top/dz) - 1``
    (at least one bin), clipped to the curtain.
    """
    col = scene.width // 2 if column is None else column
    dz = max_height_m / height_bins
    curtain = np.zeros((scene.height, height_bins), dtype=np.uint8)
    tau = scene.optical_depth[:, col]
    top = scene.cloud_top[:, col]
    bottom = scene.cloud_bottom[:, col]
    for r in np.flatnonzero(tau > 0):
        lo = int(math.floor(bottom[r] / dz + 1e-9))
        hi = int(math.ceil(top[r] / dz - 1e-9)) - 1
        hi = max(hi, lo)
        lo, hi = max(lo, 0), min(hi, height_bins - 1)
        if lo <= hi:
            curtain[r, lo:hi + 1] = 1
    return curtain


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def gen_curtain_dataset(seed: int, n: int, params: CurtainParams = CurtainParams(),
                        sc: ScalingConstants = ScalingConstants()) -> list[CurtainSample]:
    if n < 1:
        raise ParameterError("n must be >= 1")
    params.validate()
    out = []
    for i in range(n):
        s = derive_seed(seed, 7, i)
        rng = np.random.default_rng(s)
        sp = SceneParams(width=params.chip_size, height=params.chip_size,
                         corr_length=params.corr_length * float(rng.uniform(0.7, 1.4)),
                         cloud_cover=float(np.clip(rng.normal(params.cloud_cover, 0.15), 0.05, 0.9)),
                         surface_temp=float(rng.uniform(275.0, 300.0)),
                         lat_gradient=0.0,
                         bounds=(-10.0, 10.0, -10.0, 10.0))
        scene = gen_scene(s, sp)
        chip = render_chip(scene, sc, chip_id=f"curtain_{seed}_{i:05d}",
                           source_date=params.local_time_tag)
        curtain = curtain_from_scene(scene, params.height_bins, params.max_height_m)
        out.append(CurtainSample(chip, curtain, params.local_time_tag))
    return out
