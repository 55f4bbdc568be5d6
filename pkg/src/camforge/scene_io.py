"""Scene irradiance bundles, label CSVs and dataset manifests.

A scene bundle is a sidecar ``<id>.meta`` (flat ``key=value`` lines) plus
either one colour PFM ``<id>.pfm`` (three bands) or one grayscale PFM per
band ``<id>.b0.pfm``, ``<id>.b1.pfm``, ...  Samples are little-endian
float32 with the PFM scale field fixed at -1.0.

Loading validates everything and never repairs data: a negative or
non-finite sample is an error that names its band, row and column.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

MANIFEST_HEADER = "# camforge-manifest v1"
LABEL_FIELDS = ["class", "x_min", "y_min", "x_max", "y_max", "distance_m", "score"]


class SceneError(ValueError):
    """Invalid or unreadable scene bundle."""


class LabelError(ValueError):
    """Malformed label or detection file."""


class ManifestError(ValueError):
    """Malformed manifest or dangling file reference."""


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _commit_all(files: dict[Path, bytes]) -> None:
    """All-or-nothing write of several files: stage every temp, then rename."""
    staged: list[tuple[str, Path]] = []
    try:
        for path, payload in files.items():
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            staged.append((tmp, path))
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
        for tmp, path in staged:
            os.replace(tmp, path)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise


def read_meta(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise SceneError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_meta(items: Iterable[tuple[str, object]]) -> str:
    return "".join(f"{k}={v}\n" for k, v in items)


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneIrradiance:
    """Band-discretized photon irradiance at the sensor plane.

    ``data`` is indexed ``[band, row, col]`` in photons s^-1 um^-2, sampled
    at ``pixel_pitch_um``.
    """

    data: np.ndarray
    band_names: list[str]
    scene_id: str
    pixel_pitch_um: float

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height_px(self) -> int:
        return self.data.shape[1]

    @property
    def width_px(self) -> int:
        return self.data.shape[2]

    def validate(self) -> "SceneIrradiance":
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise SceneError(f"scene {self.scene_id!r}: data must be [band, row, col], got {self.data.shape}")
        if len(self.band_names) != self.bands:
            raise SceneError(f"scene {self.scene_id!r}: {len(self.band_names)} band names for {self.bands} bands")
        if not (self.pixel_pitch_um > 0 and math.isfinite(self.pixel_pitch_um)):
            raise SceneError(f"scene {self.scene_id!r}: pixel pitch must be > 0")
        bad = ~np.isfinite(self.data)
        if bad.any():
            b, r, c = np.argwhere(bad)[0]
            raise SceneError(f"non-finite sample at band {b}, ({r},{c})")
        neg = self.data < 0
        if neg.any():
            b, r, c = np.argwhere(neg)[0]
            raise SceneError(f"negative sample at band {b}, ({r},{c})")
        return self

    def with_data(self, data: np.ndarray, pixel_pitch_um: Optional[float] = None) -> "SceneIrradiance":
        return SceneIrradiance(data, list(self.band_names), self.scene_id,
                               self.pixel_pitch_um if pixel_pitch_um is None else pixel_pitch_um)


def _encode_pfm(planes: np.ndarray) -> bytes:
    # planes: (C, H, W); PFM stores rows bottom-to-top, channels interleaved
    c, h, w = planes.shape
    magic = b"PF" if c == 3 else b"Pf"
    body = np.ascontiguousarray(planes.transpose(1, 2, 0)[::-1]).astype("<f4").tobytes()
    return magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + body


def _decode_pfm(path: Path) -> np.ndarray:
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise SceneError(f"missing PFM plane {path}") from None
    stream = io.BytesIO(blob)
    magic = stream.readline().strip()
    if magic not in (b"PF", b"Pf"):
        raise SceneError(f"{path}: not a PFM file")
    dims = stream.readline().split()
    try:
        w, h = int(dims[0]), int(dims[1])
        scale = float(stream.readline())
    except (IndexError, ValueError):
        raise SceneError(f"{path}: bad PFM header") from None
    c = 3 if magic == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = stream.read()
    if len(body) != w * h * c * 4:
        raise SceneError(f"{path}: expected {w * h * c * 4} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w, c)[::-1]
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32)


def _bundle_stem(path) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".meta", ".pfm"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    if len(name) > 3 and name.rsplit(".", 1)[-1][:1] == "b" and name.rsplit(".", 1)[-1][1:].isdigit():
        name = name.rsplit(".", 1)[0]
    return path.with_name(name)


def save_scene(scene: SceneIrradiance, path) -> None:
    """Write a scene bundle; ``path`` may name the ``.meta`` or ``.pfm`` file."""
    scene.validate()
    stem = _bundle_stem(path)
    data = np.asarray(scene.data, dtype=np.float32)
    files: dict[Path, bytes] = {}
    if scene.bands == 3:
        files[stem.with_name(stem.name + ".pfm")] = _encode_pfm(data)
    else:
        for b in range(scene.bands):
            files[stem.with_name(f"{stem.name}.b{b}.pfm")] = _encode_pfm(data[b:b + 1])
    meta = format_meta([
        ("width", scene.width_px),
        ("height", scene.height_px),
        ("bands", scene.bands),
        ("pixel_pitch_um", repr(float(scene.pixel_pitch_um))),
        ("band_names", ",".join(scene.band_names)),
        ("scene_id", scene.scene_id),
    ])
    files[stem.with_name(stem.name + ".meta")] = meta.encode()
    _commit_all(files)


def load_scene(path) -> SceneIrradiance:
    stem = _bundle_stem(path)
    meta_path = stem.with_name(stem.name + ".meta")
    if not meta_path.exists():
        raise SceneError(f"missing scene metadata {meta_path}")
    meta = read_meta(meta_path)
    try:
        w, h, bands = int(meta["width"]), int(meta["height"]), int(meta["bands"])
        pitch = float(meta["pixel_pitch_um"])
        names = meta["band_names"].split(",") if meta["band_names"] else []
        scene_id = meta["scene_id"]
    except KeyError as exc:
        raise SceneError(f"{meta_path}: missing key {exc.args[0]}") from None
    except ValueError as exc:
        raise SceneError(f"{meta_path}: {exc}") from None
    if bands == 3 and stem.with_name(stem.name + ".pfm").exists():
        data = _decode_pfm(stem.with_name(stem.name + ".pfm"))
    else:
        planes = [_decode_pfm(stem.with_name(f"{stem.name}.b{b}.pfm")) for b in range(bands)]
        shapes = {p.shape for p in planes}
        if len(shapes) > 1:
            raise SceneError(f"{stem}: PFM planes disagree in dimensions {sorted(shapes)}")
        data = np.concatenate(planes, axis=0)
    if data.shape != (bands, h, w):
        raise SceneError(f"{stem}: PFM data {data.shape} does not match metadata ({bands}, {h}, {w})")
    return SceneIrradiance(data, names, scene_id, pitch).validate()


# ---------------------------------------------------------------------------
# labels


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates (origin top-left, y down)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    cls: str = "car"
    distance_m: Optional[float] = None
    score: Optional[float] = None

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in coords):
            raise LabelError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise LabelError(f"degenerate box {coords}")
        if self.distance_m is not None and not self.distance_m >= 0:
            raise LabelError(f"distance must be >= 0, got {self.distance_m}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise LabelError(f"score must be in [0, 1], got {self.score}")

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass
class LabelSet:
    """Boxes for one image; detections use the same type with scores set."""

    boxes: list[BoundingBox] = field(default_factory=list)
    scene_id: str = ""

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)


DetectionSet = LabelSet


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def format_labels(labels: LabelSet) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LABEL_FIELDS)
    for b in labels.boxes:
        writer.writerow([b.cls, _fmt(b.x_min), _fmt(b.y_min), _fmt(b.x_max), _fmt(b.y_max),
                         _fmt(b.distance_m), _fmt(b.score)])
    return buf.getvalue()


def save_labels(labels: LabelSet, path) -> None:
    atomic_write_text(path, format_labels(labels))


def load_labels(path, scene_id: Optional[str] = None, require_score: bool = False) -> LabelSet:
    """Parse a label CSV; every malformed row is reported with its line number."""
    path = Path(path)
    boxes = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return LabelSet([], scene_id if scene_id is not None else path.stem)
        if [h.strip() for h in header] != LABEL_FIELDS:
            raise LabelError(f"{path}:1: expected header {','.join(LABEL_FIELDS)}")
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(LABEL_FIELDS):
                raise LabelError(f"{path}:{lineno}: expected {len(LABEL_FIELDS)} fields, got {len(row)}")
            try:
                coords = [float(v) for v in row[1:5]]
                dist = float(row[5]) if row[5].strip() else None
                score = float(row[6]) if row[6].strip() else None
                if require_score and score is None:
                    raise LabelError("detection is missing its score")
                boxes.append(BoundingBox(*coords, cls=row[0], distance_m=dist, score=score))
            except (ValueError, LabelError) as exc:
                raise LabelError(f"{path}:{lineno}: {exc}") from None
    return LabelSet(boxes, scene_id if scene_id is not None else path.stem)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    scene_id: str
    scene_file: str
    label_file: str


@dataclass
class DatasetManifest:
    """Dataset listing; file paths are stored relative to the manifest."""

    name: str
    entries: list[ManifestEntry] = field(default_factory=list)
    provenance: list[tuple[str, str]] = field(default_factory=list)
    root: Optional[Path] = field(default=None, compare=False)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def validate(self) -> "DatasetManifest":
        seen = set()
        for e in self.entries:
            if e.scene_id in seen:
                raise ManifestError(f"duplicate scene_id {e.scene_id!r} in manifest {self.name!r}")
            seen.add(e.scene_id)
        return self


def format_manifest(manifest: DatasetManifest) -> str:
    manifest.validate()
    lines = [MANIFEST_HEADER, f"# name: {manifest.name}"]
    for e in manifest.entries:
        for part in (e.scene_id, e.scene_file, e.label_file):
            if "," in part or "\n" in part:
                raise ManifestError(f"manifest field may not contain ',' or newline: {part!r}")
        lines.append(f"{e.scene_id},{e.scene_file},{e.label_file}")
    for key, value in manifest.provenance:
        lines.append(f"# provenance: {key}={value}")
    return "\n".join(lines) + "\n"


def save_manifest(manifest: DatasetManifest, path) -> None:
    atomic_write_text(path, format_manifest(manifest))


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"{path}:1: expected header {MANIFEST_HEADER!r}")
    name = path.parent.name
    entries, provenance = [], []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        if line.startswith("# name:"):
            name = line[len("# name:"):].strip()
        elif line.startswith("# provenance:"):
            kv = line[len("# provenance:"):].strip()
            if "=" not in kv:
                raise ManifestError(f"{path}:{lineno}: provenance line needs key=value")
            k, v = kv.split("=", 1)
            provenance.append((k, v))
        elif line.startswith("#"):
            continue
        else:
            parts = line.split(",")
            if len(parts) != 3:
                raise ManifestError(f"{path}:{lineno}: expected scene_id,scene_file,label_file")
            entries.append(ManifestEntry(*parts))
    manifest = DatasetManifest(name, entries, provenance, root=path.parent).validate()
    if check_files:
        for e in entries:
            for rel in (e.scene_file, e.label_file):
                if not manifest.resolve(rel).exists():
                    raise ManifestError(f"{path}: scene {e.scene_id!r} references missing file {rel}")
    return manifest
