"""Post-acquisition processing: normalization, bilinear demosaicking, gamma."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .pngio import encode_png
from .scene_io import format_meta
from .sensor import RawFrame

ADAPTIVE_EPS = 1e-4
ADAPTIVE_RANGE = (0.1, 1.0)


class IspError(ValueError):
    pass


@dataclass
class ProcessedImage:
    """Normalized image, ``data`` shaped (channels, H, W) with values in [0, 1]."""

    data: np.ndarray
    channel_names: tuple[str, ...]
    pipeline_tag: str

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def tagged(self, data: np.ndarray, step: str) -> "ProcessedImage":
        tag = step if self.pipeline_tag == "raw" else f"{self.pipeline_tag}|{step}"
        return ProcessedImage(data, self.channel_names, tag)


def normalize(raw: RawFrame) -> ProcessedImage:
    """Scale dn to [0, 1]; the result keeps the CFA interleaving."""
    data = raw.dn.astype(np.float64)[None] / raw.max_dn
    return ProcessedImage(data, ("raw",), "raw")


# 3x3 bilinear weights; normalized per filter class at run time
_BILINEAR = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0
_CHANNEL_ORDER = {"rggb": ("R", "G", "B"), "rccc": ("C", "R")}


def demosaic_bilinear(raw: RawFrame) -> ProcessedImage:
    """Fill each filter class from its neighbours by normalized convolution.

    For a class with sample mask m, the plane is conv(m * x) / conv(m) with
    the 3x3 bilinear kernel, which reduces to the usual 2- and 4-neighbour
    averages on Bayer and RCCC tiles.  Sampled sites keep their value.
    Monochrome frames pass through as :func:`normalize`.
    """
    base = normalize(raw)
    cfa = raw.cfa
    if cfa.name == "mono" or (cfa.tile_width, cfa.tile_height) == (1, 1):
        return base
    if cfa.name not in _CHANNEL_ORDER or (cfa.tile_width, cfa.tile_height) != (2, 2):
        raise IspError(f"bilinear demosaic supports 2x2 RGGB/RCCC tiles, not {cfa.name!r}")
    if raw.height < 2 or raw.width < 2:
        raise IspError("demosaic needs at least a 2x2 frame")
    x = base.data[0]
    cmap = cfa.class_map(raw.height, raw.width)
    names = [c.name for c in cfa.filter_classes]
    planes = []
    for name in _CHANNEL_ORDER[cfa.name]:
        mask = (cmap == names.index(name)).astype(np.float64)
        num = ndimage.convolve(x * mask, _BILINEAR, mode="mirror")
        den = ndimage.convolve(mask, _BILINEAR, mode="mirror")
        plane = np.where(mask > 0, x, num / den)
        planes.append(np.clip(plane, 0.0, 1.0))
    return ProcessedImage(np.stack(planes), _CHANNEL_ORDER[cfa.name], "demosaic-bilinear")


def apply_gamma(img: ProcessedImage, gamma: float) -> ProcessedImage:
    if not gamma > 0:
        raise IspError(f"gamma must be > 0, got {gamma}")
    return img.tagged(np.power(img.data, gamma), f"gamma-{gamma:.2f}")


def adaptive_gamma(img: ProcessedImage) -> tuple[ProcessedImage, float]:
    """Pick gamma so the mean luminance maps to 0.5, clamped to [0.1, 1].

    Luminance is the per-pixel channel mean.  The rule is ours; it is
    tagged ``gamma-adaptive-<g>`` so outputs say which exponent was used.
    """
    mean = float(img.data.mean(axis=0).mean())
    m = max(ADAPTIVE_EPS, mean)
    g = math.log(0.5) / math.log(m) if m < 1.0 else ADAPTIVE_RANGE[1]
    g = min(max(g, ADAPTIVE_RANGE[0]), ADAPTIVE_RANGE[1])
    out = np.power(img.data, g)
    return img.tagged(out, f"gamma-adaptive-{g:.4f}"), g


def dark_level_census(frame: Union[RawFrame, ProcessedImage, np.ndarray], fraction: float,
                      bit_depth: Optional[int] = None) -> int:
    """Count distinct codes among pixels with dn < fraction * 2^N.

    A :class:`ProcessedImage` is mapped back to codes with
    ``round(value * (2^N - 1))``, so ``bit_depth`` is required for it and
    for bare arrays.
    """
    if not 0 < fraction <= 1:
        raise IspError("fraction must be in (0, 1]")
    if isinstance(frame, RawFrame):
        dn, depth = frame.dn, frame.bit_depth
    else:
        if bit_depth is None:
            raise IspError("bit_depth is required unless a RawFrame is given")
        depth = bit_depth
        if isinstance(frame, ProcessedImage):
            dn = np.rint(frame.data * ((1 << depth) - 1)).astype(np.int64)
        else:
            dn = np.asarray(frame)
    dark = dn[dn < fraction * (1 << depth)]
    return int(np.unique(dark).size)


def encode_processed(img: ProcessedImage, out_depth: int = 16) -> tuple[bytes, bytes]:
    """PNG with value = round(data * (2^depth - 1)) plus a key=value sidecar."""
    top = (1 << out_depth) - 1
    arr = np.rint(np.clip(img.data, 0.0, 1.0) * top).astype(np.uint16 if out_depth == 16 else np.uint8)
    meta = format_meta([
        ("pipeline_tag", img.pipeline_tag),
        ("channels", ",".join(img.channel_names)),
        ("out_depth", out_depth),
    ])
    return encode_png(arr.transpose(1, 2, 0), out_depth), meta.encode()
