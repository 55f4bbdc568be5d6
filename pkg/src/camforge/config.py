"""Flat ``section.key = value`` experiment configuration.

Unknown keys are rejected with their line number.  :func:`resolve` fills
every default (sensor fields come from the chosen preset) and the result
echoes back as a complete config that reproduces the run on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .exposure import ExposureKind, ExposurePolicy
from .sensor import SensorConfig, make_preset
from .variants import Axis, LabelingPolicy, PipelineSettings, parse_axis_value


class ConfigError(ValueError):
    pass


# key -> default; None means "no default / taken from the sensor preset"
SCHEMA: dict[str, Optional[str]] = {
    "input.manifest": "",
    "sensor.preset": "mt9v024-rgb",
    "sensor.pitch_um": "3",
    "sensor.bit_depth": "10",
    "sensor.bands": "3",
    "sensor.noise": "on",
    "sensor.array_width_px": None,
    "sensor.array_height_px": None,
    "sensor.qe": None,
    "sensor.well_capacity_e": None,
    "sensor.read_noise_e": None,
    "sensor.dark_current_e_per_s": None,
    "sensor.conversion_gain_v_per_e": None,
    "sensor.voltage_swing_v": None,
    "sensor.psf_fwhm_um": None,
    "exposure.kind": "center",
    "exposure.target_fraction": "0.9",
    "exposure.max_ms": "16",
    "exposure.brackets_ms": "2,4,8",
    "exposure.window": "0.3333333333333333,0.6666666666666666,0.5,0.8333333333333334",
    "exposure.percentile": "99.9",
    "isp.demosaic": "off",
    "isp.gamma": "none",
    "isp.out_depth": "16",
    "variants.axis": "",
    "variants.values": "",
    "variants.policy": "none",
    "variants.min_box_height_px": "25",
    "variants.max_distance_m": "150",
    "eval.detections": "",
    "eval.labels": "",
    "eval.policy": "none",
    "eval.min_box_height_px": "25",
    "eval.max_distance_m": "150",
    "eval.iou_threshold": "0.5",
    "eval.distance_bins": "",
    "eval.classes": "",
    "census.fraction": "0.03125",
    "output.directory": "out",
    "seed": "0",
}

_SENSOR_OVERRIDES = {
    "array_width_px": int, "array_height_px": int, "well_capacity_e": float, "read_noise_e": float,
    "dark_current_e_per_s": float, "conversion_gain_v_per_e": float, "voltage_swing_v": float,
    "psf_fwhm_um": float,
}
_PATH_KEYS = ("input.manifest", "eval.detections", "eval.labels", "output.directory")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    values = parse_config_text(text, str(path))
    # relative paths are relative to the config file
    for key in _PATH_KEYS:
        if values.get(key) and not Path(values[key]).is_absolute():
            values[key] = str((path.parent / values[key]).resolve())
    return values


def _onoff(key: str, text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {text!r}")


def _floats(key: str, text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


@dataclass
class Experiment:
    """Typed view of a resolved configuration."""

    values: dict[str, str]
    sensor: SensorConfig
    exposure: ExposurePolicy
    pipeline: PipelineSettings
    variant_policy: LabelingPolicy
    eval_policy: LabelingPolicy
    seed: int

    def get(self, key: str) -> str:
        return self.values[key]

    def echo(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in SCHEMA)


def resolve(values: dict[str, str], overrides: Optional[dict[str, str]] = None) -> Experiment:
    v = {k: d for k, d in SCHEMA.items() if d is not None}
    v.update(values)
    for k, val in (overrides or {}).items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown key {k!r}")
        v[k] = val

    def num(key, kind=float):
        try:
            return kind(v[key])
        except ValueError:
            raise ConfigError(f"{key}: invalid value {v[key]!r}") from None

    try:
        sensor = make_preset(v["sensor.preset"], num("sensor.pitch_um"), num("sensor.bit_depth", int),
                             num("sensor.bands", int))
        changes = {}
        for field_name, kind in _SENSOR_OVERRIDES.items():
            key = f"sensor.{field_name}"
            if values.get(key, "") != "" or (overrides and key in overrides):
                changes[field_name] = num(key, kind)
        if v.get("sensor.qe"):
            changes["qe"] = tuple(_floats("sensor.qe", v["sensor.qe"]))
        # echoing a preset's own values back must reproduce the preset exactly
        changes = {k: x for k, x in changes.items() if getattr(sensor, k) != x}
        if changes:
            # a modified preset no longer carries the rated dynamic range
            if "well_capacity_e" in changes or "read_noise_e" in changes:
                changes["dynamic_range_db"] = None
            sensor = replace(sensor, **changes)
        sensor.validate()
        for field_name in _SENSOR_OVERRIDES:
            v[f"sensor.{field_name}"] = repr(getattr(sensor, field_name))
        v["sensor.qe"] = ",".join(repr(q) for q in sensor.qe)

        window = _floats("exposure.window", v["exposure.window"])
        if len(window) != 4:
            raise ConfigError("exposure.window: expected x0,x1,y0,y1")
        exposure = ExposurePolicy(
            kind=ExposureKind(v["exposure.kind"]),
            target_fraction=num("exposure.target_fraction"),
            max_duration_s=num("exposure.max_ms") / 1000.0,
            bracket_durations_s=tuple(t / 1000.0 for t in _floats("exposure.brackets_ms", v["exposure.brackets_ms"])),
            metering_percentile=num("exposure.percentile"),
            center_window=tuple(window),
        )
        gamma = parse_axis_value(Axis.GAMMA, v["isp.gamma"])
        pipeline = PipelineSettings(
            demosaic=_onoff("isp.demosaic", v["isp.demosaic"]),
            gamma=gamma,
            out_depth=num("isp.out_depth", int),
            noise=_onoff("sensor.noise", v["sensor.noise"]),
        )
        variant_policy = LabelingPolicy(v["variants.policy"], num("variants.min_box_height_px", int),
                                        num("variants.max_distance_m"))
        eval_policy = LabelingPolicy(v["eval.policy"], num("eval.min_box_height_px", int),
                                     num("eval.max_distance_m"))
        seed = num("seed", int)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return Experiment(v, sensor, exposure, pipeline, variant_policy, eval_policy, seed)
