"""Pixel physics: irradiance -> electrons -> volts -> digital numbers.

Noise model: Poisson shot noise on the mean signal (photo-electrons plus
dark current), additive Gaussian read noise, clamp to ``[0, well]``.  No
fixed-pattern terms.  Noise comes from :mod:`camforge.rng`, keyed by
``(seed, pixel index)``, so frames are reproducible under any schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import rng
from .pngio import decode_png, encode_png
from .scene_io import SceneIrradiance, _commit_all, format_meta, read_meta

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class SensorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# colour filter arrays


@dataclass(frozen=True)
class FilterClass:
    name: str
    band_weights: tuple[float, ...]


@dataclass(frozen=True)
class CfaPattern:
    """Repeating filter tile; ``filter_ids[row][col]`` indexes ``filter_classes``.

    The tile wraps over the array by modulo, so its size need not divide
    the sensor dimensions.
    """

    name: str
    filter_ids: tuple[tuple[int, ...], ...]
    filter_classes: tuple[FilterClass, ...]

    def __post_init__(self):
        widths = {len(r) for r in self.filter_ids}
        if not self.filter_ids or len(widths) != 1:
            raise SensorError(f"CFA {self.name!r}: tile must be a non-empty rectangle")
        for fid in (i for r in self.filter_ids for i in r):
            if not 0 <= fid < len(self.filter_classes):
                raise SensorError(f"CFA {self.name!r}: filter id {fid} has no class")
        nb = {len(c.band_weights) for c in self.filter_classes}
        if len(nb) != 1:
            raise SensorError(f"CFA {self.name!r}: classes disagree on band count")

    @property
    def tile_height(self) -> int:
        return len(self.filter_ids)

    @property
    def tile_width(self) -> int:
        return len(self.filter_ids[0])

    @property
    def bands(self) -> int:
        return len(self.filter_classes[0].band_weights)

    def class_map(self, height: int, width: int) -> np.ndarray:
        tile = np.asarray(self.filter_ids, dtype=np.intp)
        rows = np.arange(height) % self.tile_height
        cols = np.arange(width) % self.tile_width
        return tile[rows[:, None], cols[None, :]]


def make_cfa(kind: str, bands: int = 3) -> CfaPattern:
    """Build one of the shipped patterns: ``mono``, ``rggb`` or ``rccc``.

    With three bands the weights pick out R, G, B; a clear filter passes
    every band.  With a single band every filter class sees that band.
    """
    if bands < 1:
        raise SensorError("bands must be >= 1")

    def passband(idx):
        if bands == 1:
            return (1.0,)
        if bands != 3:
            raise SensorError(f"CFA {kind!r} with colour filters needs 1 or 3 bands, got {bands}")
        w = [0.0, 0.0, 0.0]
        w[idx] = 1.0
        return tuple(w)

    clear = FilterClass("C", (1.0,) * bands)
    if kind == "mono":
        return CfaPattern("mono", ((0,),), (clear,))
    if kind == "rggb":
        classes = (FilterClass("R", passband(0)), FilterClass("G", passband(1)), FilterClass("B", passband(2)))
        return CfaPattern("rggb", ((0, 1), (1, 2)), classes)
    if kind == "rccc":
        # red at tile (0,0); the corner is our choice
        return CfaPattern("rccc", ((0, 1), (1, 1)), (FilterClass("R", passband(0)), clear))
    raise SensorError(f"unknown CFA {kind!r}")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SensorConfig:
    name: str
    pixel_pitch_um: float
    array_width_px: int
    array_height_px: int
    cfa: CfaPattern
    qe: tuple[float, ...]
    well_capacity_e: float
    read_noise_e: float
    dark_current_e_per_s: float
    conversion_gain_v_per_e: float
    voltage_swing_v: float
    bit_depth: int
    psf_fwhm_um: float = 0.0
    dynamic_range_db: Optional[float] = None
    die_size_mm: Optional[str] = None
    notes: str = ""

    def validate(self) -> "SensorConfig":
        if not self.pixel_pitch_um > 0:
            raise SensorError("pixel_pitch_um must be > 0")
        if self.array_width_px < 1 or self.array_height_px < 1:
            raise SensorError("array dimensions must be positive")
        if len(self.qe) != self.cfa.bands or not all(0.0 <= q <= 1.0 for q in self.qe):
            raise SensorError(f"qe needs {self.cfa.bands} weights in [0, 1], got {self.qe}")
        if not (self.well_capacity_e > 0 and self.conversion_gain_v_per_e > 0 and self.voltage_swing_v > 0):
            raise SensorError("well capacity, conversion gain and voltage swing must be > 0")
        if self.read_noise_e < 0 or self.dark_current_e_per_s < 0 or self.psf_fwhm_um < 0:
            raise SensorError("read noise, dark current and PSF width must be >= 0")
        if self.bit_depth not in (8, 10, 12, 16):
            raise SensorError(f"bit_depth must be one of 8, 10, 12, 16, got {self.bit_depth}")
        # saturation voltage reachable; tolerance covers swing/well rounding
        if self.well_capacity_e * self.conversion_gain_v_per_e < self.voltage_swing_v * (1 - 1e-12):
            raise SensorError("well_capacity_e * conversion_gain must reach voltage_swing")
        if self.dynamic_range_db is not None:
            if self.read_noise_e == 0:
                raise SensorError("a declared dynamic range needs non-zero read noise")
            dr = 20.0 * math.log10(self.well_capacity_e / self.read_noise_e)
            if abs(dr - self.dynamic_range_db) > 0.1:
                raise SensorError(f"well/read noise give {dr:.3f} dB, declared {self.dynamic_range_db} dB")
        return self

    @property
    def max_dn(self) -> int:
        return (1 << self.bit_depth) - 1

    def to_record(self) -> list[tuple[str, str]]:
        """Flat key/value description (used in provenance and run logs)."""
        rec = [
            ("name", self.name),
            ("pixel_pitch_um", repr(self.pixel_pitch_um)),
            ("array_width_px", str(self.array_width_px)),
            ("array_height_px", str(self.array_height_px)),
            ("cfa", self.cfa.name),
            ("qe", ",".join(repr(q) for q in self.qe)),
            ("well_capacity_e", repr(self.well_capacity_e)),
            ("read_noise_e", repr(self.read_noise_e)),
            ("dark_current_e_per_s", repr(self.dark_current_e_per_s)),
            ("conversion_gain_v_per_e", repr(self.conversion_gain_v_per_e)),
            ("voltage_swing_v", repr(self.voltage_swing_v)),
            ("bit_depth", str(self.bit_depth)),
            ("psf_fwhm_um", repr(self.psf_fwhm_um)),
        ]
        if self.dynamic_range_db is not None:
            rec.append(("dynamic_range_db", repr(self.dynamic_range_db)))
        if self.die_size_mm:
            rec.append(("die_size_mm", self.die_size_mm))
        if self.notes:
            rec.append(("notes", self.notes))
        return rec


# array sizes per pixel pitch, from the reference sensor study
PITCH_GEOMETRY = {
    1.5: (2546, 1188),
    3.0: (1268, 594),
    4.5: (950, 446),
    6.0: (634, 298),
}
PRESET_CFA = {"mt9v024-mono": "mono", "mt9v024-rgb": "rggb", "mt9v024-rccc": "rccc"}

# 20*log10(5620/10) = 54.995 dB; chosen to meet the 55 dB rating
_WELL_E = 5620.0
_READ_E = 10.0
_SWING_V = 1.0


def make_preset(name: str, pitch_um: Optional[float] = None, bit_depth: int = 10,
                bands: int = 3) -> SensorConfig:
    """Return an MT9V024-like sensor at one of the four study pitches.

    ``name`` may carry the pitch inline, e.g. ``"mt9v024-rgb@3"``.
    Electrical constants are toolkit choices that satisfy a 55 dB linear
    dynamic range; full well maps exactly to full voltage swing.
    """
    if "@" in name:
        name, _, inline = name.partition("@")
        if pitch_um is None:
            pitch_um = float(inline.removesuffix("um"))
    if name not in PRESET_CFA:
        raise SensorError(f"unknown preset {name!r}; expected one of {sorted(PRESET_CFA)}")
    pitch_um = 3.0 if pitch_um is None else float(pitch_um)
    if pitch_um not in PITCH_GEOMETRY:
        raise SensorError(f"preset pitch must be one of {sorted(PITCH_GEOMETRY)} um, got {pitch_um}")
    width, height = PITCH_GEOMETRY[pitch_um]
    return SensorConfig(
        name=f"{name}@{pitch_um:g}um",
        pixel_pitch_um=pitch_um,
        array_width_px=width,
        array_height_px=height,
        cfa=make_cfa(PRESET_CFA[name], bands),
        qe=(0.6,) * bands,
        well_capacity_e=_WELL_E,
        read_noise_e=_READ_E,
        dark_current_e_per_s=0.0,
        conversion_gain_v_per_e=_SWING_V / _WELL_E,
        voltage_swing_v=_SWING_V,
        bit_depth=bit_depth,
        psf_fwhm_um=1.5,
        dynamic_range_db=55.0,
        die_size_mm="3.6x8.6",
        notes="well/read-noise/gain are toolkit values chosen to satisfy 55 dB",
    ).validate()


def with_cfa(config: SensorConfig, kind: str) -> SensorConfig:
    cfa = make_cfa(kind, config.cfa.bands)
    base = config.name.split("@")[0].rsplit("-", 1)[0]
    suffix = config.name.partition("@")[2]
    label = {"mono": "mono", "rggb": "rgb", "rccc": "rccc"}[kind]
    name = f"{base}-{label}" + (f"@{suffix}" if suffix else "")
    return replace(config, cfa=cfa, name=name)


# ---------------------------------------------------------------------------
# optics and resampling


def gaussian_kernel(sigma_px: float) -> np.ndarray:
    radius = max(1, int(math.ceil(4.0 * sigma_px)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_px) ** 2)
    return k / k.sum()


def apply_psf(scene: SceneIrradiance, fwhm_um: float) -> SceneIrradiance:
    """Blur each band with a normalized Gaussian of the given FWHM.

    Half-sample-symmetric ('reflect') borders keep band energy constant.
    """
    if fwhm_um < 0:
        raise SensorError("PSF FWHM must be >= 0")
    if fwhm_um == 0:
        return scene
    sigma_px = fwhm_um / FWHM_PER_SIGMA / scene.pixel_pitch_um
    kernel = gaussian_kernel(sigma_px)
    if len(kernel) // 2 >= min(scene.height_px, scene.width_px):
        raise SensorError("PSF wider than the scene; reflect borders would not conserve energy")
    data = np.asarray(scene.data, dtype=np.float64)
    out = ndimage.correlate1d(data, kernel, axis=1, mode="reflect")
    out = ndimage.correlate1d(out, kernel, axis=2, mode="reflect")
    np.maximum(out, 0.0, out=out)
    return scene.with_data(out)


def binning_factor(scene_pitch_um: float, sensor_pitch_um: float) -> int:
    ratio = sensor_pitch_um / scene_pitch_um
    r = round(ratio)
    if r < 1 or abs(ratio - r) > 1e-9 * ratio:
        raise SensorError(
            f"sensor pitch {sensor_pitch_um} um is not an integer multiple of scene pitch "
            f"{scene_pitch_um} um; supply a scene sampled at a pitch that divides it")
    return int(r)


def resample_scene_to_sensor(scene: SceneIrradiance, config: SensorConfig) -> SceneIrradiance:
    """Box-bin by r = sensor pitch / scene pitch, averaging each r x r block.

    Irradiance is per unit area, so the block mean (not sum) keeps photon
    totals; trailing rows/columns that do not fill a block are dropped.
    """
    r = binning_factor(scene.pixel_pitch_um, config.pixel_pitch_um)
    if r == 1:
        return scene.with_data(scene.data, config.pixel_pitch_um)
    b, h, w = scene.data.shape
    ho, wo = h // r, w // r
    if ho == 0 or wo == 0:
        raise SensorError(f"scene {w}x{h} is smaller than one {r}x{r} bin")
    blocks = np.asarray(scene.data[:, :ho * r, :wo * r], dtype=np.float64).reshape(b, ho, r, wo, r)
    return scene.with_data(blocks.sum(axis=(2, 4)) / (r * r), config.pixel_pitch_um)


def crop_to_sensor(scene: SceneIrradiance, config: SensorConfig) -> tuple[SceneIrradiance, tuple[int, int]]:
    """Centre-crop a sensor-pitch scene to the array size; returns (scene, (dx, dy))."""
    w, h = config.array_width_px, config.array_height_px
    if scene.width_px < w or scene.height_px < h:
        raise SensorError(
            f"scene {scene.width_px}x{scene.height_px} at {scene.pixel_pitch_um} um does not cover "
            f"the {w}x{h} sensor array")
    dx = (scene.width_px - w) // 2
    dy = (scene.height_px - h) // 2
    if dx == 0 and dy == 0 and scene.width_px == w and scene.height_px == h:
        return scene, (0, 0)
    return scene.with_data(scene.data[:, dy:dy + h, dx:dx + w]), (dx, dy)


# ---------------------------------------------------------------------------
# exposure


@dataclass
class ElectronImage:
    electrons: np.ndarray
    exposure_s: float
    saturated_mask: np.ndarray
    rng_seed: int = 0

    @property
    def height(self) -> int:
        return self.electrons.shape[0]

    @property
    def width(self) -> int:
        return self.electrons.shape[1]


def _check_geometry(scene: SceneIrradiance, config: SensorConfig) -> None:
    if (scene.width_px, scene.height_px) != (config.array_width_px, config.array_height_px):
        raise SensorError(
            f"scene is {scene.width_px}x{scene.height_px}, sensor array is "
            f"{config.array_width_px}x{config.array_height_px}; resample and crop first")
    if not math.isclose(scene.pixel_pitch_um, config.pixel_pitch_um, rel_tol=1e-9):
        raise SensorError(f"scene pitch {scene.pixel_pitch_um} um != sensor pitch {config.pixel_pitch_um} um")
    if scene.bands != config.cfa.bands:
        raise SensorError(f"scene has {scene.bands} bands, CFA {config.cfa.name!r} expects {config.cfa.bands}")


def electron_rate(scene: SceneIrradiance, config: SensorConfig) -> np.ndarray:
    """Noise-free mean electrons per second for every pixel, dark current included."""
    _check_geometry(scene, config)
    weights = np.array([c.band_weights for c in config.cfa.filter_classes], dtype=np.float64)
    weights = weights * np.asarray(config.qe, dtype=np.float64)[None, :]
    cmap = config.cfa.class_map(scene.height_px, scene.width_px)
    area = config.pixel_pitch_um ** 2
    rate = np.zeros(cmap.shape, dtype=np.float64)
    for b in range(scene.bands):
        rate += scene.data[b] * weights[cmap, b]
    return rate * area + config.dark_current_e_per_s


def expose(scene: SceneIrradiance, config: SensorConfig, exposure_s: float, seed: int,
           noise: bool = True) -> ElectronImage:
    if not exposure_s > 0:
        raise SensorError(f"exposure must be > 0, got {exposure_s}")
    mean_e = electron_rate(scene, config) * exposure_s
    if noise:
        idx = np.arange(mean_e.size, dtype=np.uint64)
        e = rng.poisson(seed, idx, mean_e.ravel())
        if config.read_noise_e > 0:
            e = e + config.read_noise_e * rng.standard_normal(seed, idx)
        e = e.reshape(mean_e.shape)
    else:
        e = mean_e
    saturated = e >= config.well_capacity_e
    return ElectronImage(np.clip(e, 0.0, config.well_capacity_e), float(exposure_s), saturated, seed)


# ---------------------------------------------------------------------------
# quantization


@dataclass
class RawFrame:
    dn: np.ndarray
    bit_depth: int
    cfa: CfaPattern
    exposure_s: float
    sensor_name: str
    rng_seed: int
    pixel_pitch_um: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.dn.shape[0]

    @property
    def width(self) -> int:
        return self.dn.shape[1]

    @property
    def max_dn(self) -> int:
        return (1 << self.bit_depth) - 1


def quantize_voltage(volts: np.ndarray, swing_v: float, bit_depth: int) -> np.ndarray:
    """Floor quantizer: dn = min(2^N - 1, floor(v / swing * 2^N)), v clamped to [0, swing].

    Scaling by 2^N is exact in binary floating point, so the codes nest
    across depths: floor(dn_{N+k} / 2^k) == dn_N for the same voltages.
    """
    x = np.clip(np.asarray(volts, dtype=np.float64), 0.0, swing_v) / swing_v
    full = 1 << bit_depth
    return np.minimum(full - 1, np.floor(x * full)).astype(np.uint16 if bit_depth <= 16 else np.uint32)


def quantize(electrons: ElectronImage, config: SensorConfig) -> RawFrame:
    volts = electrons.electrons * config.conversion_gain_v_per_e
    dn = quantize_voltage(volts, config.voltage_swing_v, config.bit_depth)
    return RawFrame(dn, config.bit_depth, config.cfa, electrons.exposure_s, config.name,
                    electrons.rng_seed, config.pixel_pitch_um)


# ---------------------------------------------------------------------------
# raw frame persistence


def raw_paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_name(stem.name + ".png"), stem.with_name(stem.name + ".raw.meta")


def encode_raw(frame: RawFrame) -> tuple[bytes, bytes]:
    meta = [
        ("bit_depth", frame.bit_depth),
        ("cfa", frame.cfa.name),
        ("cfa_bands", frame.cfa.bands),
        ("exposure_s", repr(float(frame.exposure_s))),
        ("sensor_name", frame.sensor_name),
        ("rng_seed", frame.rng_seed),
        ("pixel_pitch_um", repr(float(frame.pixel_pitch_um))),
    ]
    meta += sorted(frame.extra.items())
    return encode_png(frame.dn, 16), format_meta(meta).encode()


def save_raw(frame: RawFrame, stem) -> None:
    """Write ``<stem>.png`` (16-bit gray, dn verbatim) and ``<stem>.raw.meta``."""
    png, meta = encode_raw(frame)
    png_path, meta_path = raw_paths(stem)
    _commit_all({png_path: png, meta_path: meta})


def load_raw(path) -> RawFrame:
    path = Path(path)
    stem = path.with_name(path.name.removesuffix(".png").removesuffix(".raw.meta"))
    png_path, meta_path = raw_paths(stem)
    meta = read_meta(meta_path)
    dn, _ = decode_png(png_path.read_bytes())
    depth = int(meta["bit_depth"])
    if dn.size and int(dn.max()) > (1 << depth) - 1:
        raise SensorError(f"{png_path}: dn exceeds {depth}-bit range")
    known = {"bit_depth", "cfa", "cfa_bands", "exposure_s", "sensor_name", "rng_seed", "pixel_pitch_um"}
    return RawFrame(dn.astype(np.uint16), depth, make_cfa(meta["cfa"], int(meta.get("cfa_bands", 3))),
                    float(meta["exposure_s"]), meta["sensor_name"], int(meta["rng_seed"]),
                    float(meta["pixel_pitch_um"]),
                    {k: v for k, v in meta.items() if k not in known})
