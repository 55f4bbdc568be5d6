"""Single-parameter dataset variants for generalization experiments.

A :class:`VariantSpec` fixes every sensor, exposure and ISP setting and
varies exactly one axis.  Each scene gets the same seed in every variant,
so differences between variants come from the parameter and not from a
different noise draw.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

from .exposure import ExposureKind, ExposurePolicy, capture
from .isp import adaptive_gamma, apply_gamma, demosaic_bilinear, encode_processed, normalize
from .scene_io import (
    DatasetManifest, LabelSet, ManifestEntry, SceneIrradiance, _commit_all, atomic_write_text, format_labels,
    format_manifest, load_labels, load_scene,
)
from .sensor import (
    PITCH_GEOMETRY, SensorConfig, apply_psf, crop_to_sensor, encode_raw, resample_scene_to_sensor, with_cfa,
)

log = logging.getLogger(__name__)


class VariantError(ValueError):
    pass


# ---------------------------------------------------------------------------
# labels


class PolicyKind(str, Enum):
    KITTI_MIN_BOX = "kitti"
    DISTANCE_CUTOFF = "distance"
    NONE = "none"


@dataclass(frozen=True)
class LabelingPolicy:
    kind: PolicyKind = PolicyKind.NONE
    min_box_height_px: int = 25
    max_distance_m: float = 150.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.min_box_height_px <= 0 or not self.max_distance_m > 0:
            raise VariantError("labeling thresholds must be positive")

    def describe(self) -> str:
        if self.kind is PolicyKind.KITTI_MIN_BOX:
            return f"kitti(height>{self.min_box_height_px}px)"
        if self.kind is PolicyKind.DISTANCE_CUTOFF:
            return f"distance(<={self.max_distance_m!r}m)"
        return "none"


def apply_policy(labels: LabelSet, policy: LabelingPolicy) -> LabelSet:
    """Drop boxes the policy excludes, preserving order.

    KITTI keeps heights strictly greater than the minimum; the distance
    cutoff is inclusive and rejects label sets with missing distances.
    """
    if policy.kind is PolicyKind.NONE:
        return labels
    if policy.kind is PolicyKind.KITTI_MIN_BOX:
        kept = [b for b in labels.boxes if b.height > policy.min_box_height_px]
    else:
        if any(b.distance_m is None for b in labels.boxes):
            raise VariantError(f"distance cutoff needs distance_m; missing in scene(s): {labels.scene_id}")
        kept = [b for b in labels.boxes if b.distance_m <= policy.max_distance_m]
    return LabelSet(kept, labels.scene_id)


def apply_policy_all(label_sets: Sequence[LabelSet], policy: LabelingPolicy) -> list[LabelSet]:
    if policy.kind is PolicyKind.DISTANCE_CUTOFF:
        bad = [ls.scene_id for ls in label_sets if any(b.distance_m is None for b in ls.boxes)]
        if bad:
            raise VariantError(f"distance cutoff needs distance_m; missing in scene(s): {', '.join(bad)}")
    return [apply_policy(ls, policy) for ls in label_sets]


def _exact(v) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(v)


def scale_labels(labels: LabelSet, factor: Union[float, Fraction], offset=(0, 0)) -> LabelSet:
    """Multiply coordinates by ``factor`` then subtract ``offset``, rounding once.

    Arithmetic is done on exact rationals, so a pitch ratio passed as a
    Fraction (e.g. 1/3) introduces no drift beyond the final rounding.
    """
    f = _exact(factor)
    if f <= 0:
        raise VariantError("scale factor must be > 0")
    dx, dy = _exact(offset[0]), _exact(offset[1])
    out = []
    for b in labels.boxes:
        out.append(replace(
            b,
            x_min=float(_exact(b.x_min) * f - dx), y_min=float(_exact(b.y_min) * f - dy),
            x_max=float(_exact(b.x_max) * f - dx), y_max=float(_exact(b.y_max) * f - dy),
        ))
    return LabelSet(out, labels.scene_id)


def clip_labels(labels: LabelSet, width: int, height: int) -> LabelSet:
    """Clip boxes to the frame; boxes left with no area are dropped."""
    out = []
    for b in labels.boxes:
        x0, y0 = max(b.x_min, 0.0), max(b.y_min, 0.0)
        x1, y1 = min(b.x_max, float(width)), min(b.y_max, float(height))
        if x0 < x1 and y0 < y1:
            out.append(b if (x0, y0, x1, y1) == (b.x_min, b.y_min, b.x_max, b.y_max)
                       else replace(b, x_min=x0, y_min=y0, x_max=x1, y_max=y1))
    return LabelSet(out, labels.scene_id)


def pitch_ratio(scene_pitch_um: float, sensor_pitch_um: float) -> Fraction:
    return Fraction(repr(float(scene_pitch_um))) / Fraction(repr(float(sensor_pitch_um)))


# ---------------------------------------------------------------------------
# per-scene rendering


@dataclass(frozen=True)
class PipelineSettings:
    """ISP settings; ``gamma`` is None, a positive float, or ``"adaptive"``."""

    demosaic: bool = False
    gamma: Union[None, float, str] = None
    out_depth: int = 16
    noise: bool = True

    def __post_init__(self):
        if self.gamma is not None and self.gamma != "adaptive" and not float(self.gamma) > 0:
            raise VariantError(f"gamma must be > 0, 'adaptive' or None, got {self.gamma!r}")
        if self.out_depth not in (8, 16):
            raise VariantError("out_depth must be 8 or 16")

    @property
    def processes(self) -> bool:
        return self.demosaic or self.gamma is not None


@dataclass
class RenderedScene:
    scene_id: str
    files: dict[str, bytes]
    labels: LabelSet
    scene_file: str
    width: int
    height: int


def scene_seed(seed_base: int, scene_id: str) -> int:
    h = int.from_bytes(hashlib.sha256(scene_id.encode()).digest()[:8], "big")
    return (seed_base ^ h) & 0xFFFFFFFFFFFFFFFF


def render_scene(scene: SceneIrradiance, labels: LabelSet, sensor: SensorConfig, exposure: ExposurePolicy,
                 pipeline: PipelineSettings, policy: LabelingPolicy, seed: int) -> RenderedScene:
    """resample -> crop -> PSF -> capture -> (demosaic) -> (gamma), plus labels."""
    base_pitch = scene.pixel_pitch_um
    s = resample_scene_to_sensor(scene, sensor)
    s, offset = crop_to_sensor(s, sensor)
    s = apply_psf(s, sensor.psf_fwhm_um)
    raw = capture(s, sensor, exposure, seed, noise=pipeline.noise)
    sid = scene.scene_id
    png, meta = encode_raw(raw)
    files = {f"{sid}.png": png, f"{sid}.raw.meta": meta}
    scene_file = f"{sid}.png"
    if pipeline.processes:
        img = demosaic_bilinear(raw) if pipeline.demosaic else normalize(raw)
        if pipeline.gamma == "adaptive":
            img, _ = adaptive_gamma(img)
        elif pipeline.gamma is not None:
            img = apply_gamma(img, float(pipeline.gamma))
        ppng, pmeta = encode_processed(img, pipeline.out_depth)
        files[f"{sid}.isp.png"] = ppng
        files[f"{sid}.isp.meta"] = pmeta
        scene_file = f"{sid}.isp.png"
    moved = scale_labels(labels, pitch_ratio(base_pitch, sensor.pixel_pitch_um), offset)
    moved = clip_labels(moved, sensor.array_width_px, sensor.array_height_px)
    return RenderedScene(sid, files, apply_policy(moved, policy), scene_file,
                         sensor.array_width_px, sensor.array_height_px)


@dataclass(frozen=True)
class _Job:
    scene_path: str
    labels: LabelSet
    sensor: SensorConfig
    exposure: ExposurePolicy
    pipeline: PipelineSettings
    policy: LabelingPolicy
    seed: int


def _run_job(job: _Job) -> RenderedScene:
    scene = load_scene(job.scene_path)
    return render_scene(scene, job.labels, job.sensor, job.exposure, job.pipeline, job.policy, job.seed)


def _map(jobs: list[_Job], workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_job, jobs))


def render_dataset(base: DatasetManifest, sensor: SensorConfig, exposure: ExposurePolicy,
                   pipeline: PipelineSettings, policy: LabelingPolicy, seed_base: int, dest: Path,
                   name: str, provenance: list[tuple[str, str]], jobs: int = 1) -> DatasetManifest:
    """Render every scene of ``base`` into ``dest/{scenes,labels,manifest.txt}``.

    Workers only compute; this process writes every file, in manifest order.
    """
    sensor.validate()
    label_sets = [load_labels(base.resolve(e.label_file), scene_id=e.scene_id) for e in base.entries]
    if policy.kind is PolicyKind.DISTANCE_CUTOFF:
        # fail on missing distances before any rendering starts
        apply_policy_all(label_sets, policy)
    work = [
        _Job(str(base.resolve(e.scene_file)), ls, sensor, exposure, pipeline, policy,
             scene_seed(seed_base, e.scene_id))
        for e, ls in zip(base.entries, label_sets)
    ]
    results = _map(work, jobs)
    (dest / "scenes").mkdir(parents=True, exist_ok=True)
    (dest / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for res in results:
        _commit_all({dest / "scenes" / fname: blob for fname, blob in res.files.items()})
        atomic_write_text(dest / "labels" / f"{res.scene_id}.csv", format_labels(res.labels))
        entries.append(ManifestEntry(res.scene_id, f"scenes/{res.scene_file}", f"labels/{res.scene_id}.csv"))
    manifest = DatasetManifest(name, entries, list(provenance), root=dest)
    atomic_write_text(dest / "manifest.txt", format_manifest(manifest))
    return manifest


# ---------------------------------------------------------------------------
# variants


class Axis(str, Enum):
    PIXEL_PITCH = "pixel_pitch"
    BIT_DEPTH = "bit_depth"
    CFA = "cfa"
    EXPOSURE = "exposure"
    GAMMA = "gamma"
    DEMOSAIC = "demosaic"


_CFA_NAMES = {"mono": "mono", "rgb": "rggb", "rggb": "rggb", "rccc": "rccc"}


def parse_axis_value(axis: Axis, text: str):
    """Convert a textual axis value to its typed form."""
    text = text.strip()
    try:
        if axis is Axis.PIXEL_PITCH:
            return float(text)
        if axis is Axis.BIT_DEPTH:
            return int(text)
        if axis is Axis.CFA:
            return _CFA_NAMES[text.lower()]
        if axis is Axis.EXPOSURE:
            return ExposureKind(text.lower())
        if axis is Axis.GAMMA:
            return None if text.lower() == "none" else ("adaptive" if text.lower() == "adaptive" else float(text))
        if axis is Axis.DEMOSAIC:
            return {"on": True, "true": True, "1": True, "off": False, "false": False, "0": False}[text.lower()]
    except (KeyError, ValueError):
        raise VariantError(f"invalid value {text!r} for axis {axis.value}") from None
    raise VariantError(f"unknown axis {axis}")


def format_axis_value(axis: Axis, value) -> str:
    if axis is Axis.PIXEL_PITCH:
        return f"{float(value):g}"
    if axis is Axis.CFA:
        return {"mono": "mono", "rggb": "rgb", "rccc": "rccc"}[value]
    if axis is Axis.EXPOSURE:
        return ExposureKind(value).value
    if axis is Axis.GAMMA:
        return "none" if value is None else ("adaptive" if value == "adaptive" else f"{float(value):g}")
    if axis is Axis.DEMOSAIC:
        return "on" if value else "off"
    return str(value)


def with_pitch(sensor: SensorConfig, pitch_um: float) -> SensorConfig:
    """Same sensor at a new pitch.

    Presets take the study's array sizes for the four standard pitches;
    anything else keeps the field of view by scaling the pixel count.
    """
    if sensor.name.startswith("mt9v024") and pitch_um in PITCH_GEOMETRY:
        w, h = PITCH_GEOMETRY[pitch_um]
    else:
        ratio = sensor.pixel_pitch_um / pitch_um
        w, h = int(sensor.array_width_px * ratio), int(sensor.array_height_px * ratio)
    name = sensor.name.split("@")[0] + f"@{pitch_um:g}um"
    return replace(sensor, pixel_pitch_um=float(pitch_um), array_width_px=w, array_height_px=h, name=name)


@dataclass
class VariantSpec:
    base_manifest: DatasetManifest
    axis: Axis
    values: list
    sensor: SensorConfig
    exposure: ExposurePolicy = field(default_factory=ExposurePolicy)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    policy: LabelingPolicy = field(default_factory=LabelingPolicy)
    seed_base: int = 0

    def __post_init__(self):
        self.axis = Axis(self.axis)
        if not self.values:
            raise VariantError("a variant axis needs at least one value")
        keys = [format_axis_value(self.axis, v) for v in self.values]
        if len(set(keys)) != len(keys):
            raise VariantError(f"duplicate values on axis {self.axis.value}: {keys}")


@dataclass
class VariantPlan:
    value: object
    label: str
    sensor: SensorConfig
    exposure: ExposurePolicy
    pipeline: PipelineSettings

    @property
    def dirname(self) -> str:
        return f"{self.label}"


def fixed_digest(spec: VariantSpec) -> str:
    h = hashlib.sha256()
    for k, v in spec.sensor.to_record():
        h.update(f"sensor.{k}={v}\n".encode())
    for k, v in sorted(vars(spec.exposure).items()):
        h.update(f"exposure.{k}={v!r}\n".encode())
    for k, v in sorted(vars(spec.pipeline).items()):
        h.update(f"isp.{k}={v!r}\n".encode())
    h.update(f"policy={spec.policy.describe()}\n".encode())
    return h.hexdigest()[:16]


def plan_variants(spec: VariantSpec) -> list[VariantPlan]:
    """Resolve the full settings of every variant without rendering anything."""
    plans = []
    for value in spec.values:
        sensor, exposure, pipeline = spec.sensor, spec.exposure, spec.pipeline
        a = spec.axis
        if a is Axis.PIXEL_PITCH:
            sensor = with_pitch(sensor, float(value))
        elif a is Axis.BIT_DEPTH:
            sensor = replace(sensor, bit_depth=int(value))
        elif a is Axis.CFA:
            sensor = with_cfa(sensor, _CFA_NAMES.get(value, value))
        elif a is Axis.EXPOSURE:
            exposure = replace(exposure, kind=ExposureKind(value))
        elif a is Axis.GAMMA:
            pipeline = replace(pipeline, gamma=value)
        elif a is Axis.DEMOSAIC:
            pipeline = replace(pipeline, demosaic=bool(value))
        plans.append(VariantPlan(value, f"{a.value}={format_axis_value(a, value)}",
                                 sensor.validate(), exposure, pipeline))
    return plans


def generate_variants(spec: VariantSpec, out_dir, jobs: int = 1) -> list[DatasetManifest]:
    """Render one dataset per axis value under ``out_dir/<axis>=<value>/``.

    Each variant is built in a hidden staging directory and renamed into
    place; on any failure all staging and newly placed directories are
    removed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plans = plan_variants(spec)
    digest = fixed_digest(spec)
    placed: list[Path] = []
    staging: Optional[Path] = None
    manifests = []
    try:
        for plan in plans:
            staging = out_dir / f".staging-{plan.dirname}"
            if staging.exists():
                shutil.rmtree(staging)
            provenance = [
                ("base", spec.base_manifest.name),
                ("axis", spec.axis.value),
                ("value", format_axis_value(spec.axis, plan.value)),
                ("seed_base", str(spec.seed_base)),
                ("fixed_digest", digest),
                ("labeling_policy", spec.policy.describe()),
            ]
            log.info("rendering variant %s (%d scenes)", plan.dirname, len(spec.base_manifest.entries))
            m = render_dataset(spec.base_manifest, plan.sensor, plan.exposure, plan.pipeline, spec.policy,
                               spec.seed_base, staging, f"{spec.base_manifest.name}:{plan.dirname}",
                               provenance, jobs)
            final = out_dir / plan.dirname
            if final.exists():
                shutil.rmtree(final)
            staging.rename(final)
            placed.append(final)
            staging = None
            m.root = final
            manifests.append(m)
    except BaseException:
        if staging is not None and staging.exists():
            shutil.rmtree(staging)
        for p in placed:
            shutil.rmtree(p, ignore_errors=True)
        raise
    return manifests
