"""Scan unfolding++ projection, the lossy range image and the lossless
virtual range image."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from rangepdm.cloud_io import PathLike, PointCloud, SensorSpec
from rangepdm.errors import DataError, FormatError

log = logging.getLogger(__name__)

IGNORE_LABEL = 0
N_CHANNELS = 5  # x, y, z, range, intensity

IMAGE_MAGIC = b"RPDMIMG\x00"
IMAGE_VERSION = 1
_IMAGE_HEADER = struct.Struct("<8sIIIII")  # magic, version, H, W, C, has_label


@dataclass(frozen=True, eq=False)
class Lut:
    """Per-point image coordinates: column ``u`` and row ``v``."""

    u: np.ndarray
    v: np.ndarray
    width: int
    n_degenerate: int = 0

    def __len__(self):
        return self.u.shape[0]

    def flat(self) -> np.ndarray:
        return self.v * self.width + self.u


def azimuth_degrees(xy: np.ndarray) -> np.ndarray:
    """Azimuth of each (x, y) in degrees, in [0, 360)."""
    theta = np.degrees(np.arctan2(xy[:, 1], xy[:, 0]))
    theta[theta < 0] += 360.0
    return theta


def columns_from_azimuth(theta: np.ndarray, width: int) -> np.ndarray:
    u = np.floor(theta / 360.0 * width).astype(np.int64)
    u[u >= width] = 0  # theta rounding up to 360
    return u


def scan_unfolding_pp(cloud: PointCloud, width: int) -> Lut:
    """Column from azimuth, row from the laser ring."""
    if width < 1:
        raise ValueError("width must be >= 1")
    if cloud.ring is None:
        raise DataError("scan unfolding++ needs ring indices; call assign_rings first")
    xy = cloud.xyz[:, :2]
    degenerate = (xy[:, 0] == 0) & (xy[:, 1] == 0)
    n_bad = int(degenerate.sum())
    if n_bad:
        log.warning("%d point(s) at x=y=0; azimuth set to 0", n_bad)
    theta = azimuth_degrees(xy)
    theta[degenerate] = 0.0
    u = columns_from_azimuth(theta, width)
    return Lut(u=u, v=cloud.ring.copy(), width=width, n_degenerate=n_bad)


@dataclass(frozen=True, eq=False)
class RangeImage:
    """Keep-one projection: at most one point per pixel.

    ``point_index`` is -1 and ``range``/``channels`` are 0 where invalid.
    """

    valid: np.ndarray
    point_index: np.ndarray
    range: np.ndarray
    channels: np.ndarray
    label: Optional[np.ndarray] = None

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    def with_label(self, label: np.ndarray) -> "RangeImage":
        return RangeImage(self.valid, self.point_index, self.range, self.channels, label)


def _check_lut(cloud: PointCloud, lut: Lut, height: int, width: int):
    if len(lut) != cloud.n:
        raise ValueError(f"lut has {len(lut)} entries, cloud has {cloud.n} points")
    if lut.width != width:
        raise ValueError(f"lut built for width {lut.width}, image width is {width}")
    if cloud.n and (lut.v.max() >= height or lut.v.min() < 0):
        raise DataError(f"ring index out of range [0, {height})")


def build_range_image(cloud: PointCloud, lut: Lut, spec: SensorSpec) -> RangeImage:
    """Project ``cloud`` keeping the nearest point per pixel (ties: lowest index)."""
    h, w = spec.height, spec.width
    _check_lut(cloud, lut, h, w)
    flat = lut.flat()
    idx = np.arange(cloud.n)
    order = np.lexsort((idx, cloud.range, flat))
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = flat[order[1:]] != flat[order[:-1]]
    kept = order[first]
    pix = flat[kept]

    point_index = np.full(h * w, -1, dtype=np.int64)
    point_index[pix] = kept
    rng = np.zeros(h * w)
    rng[pix] = cloud.range[kept]
    channels = np.zeros((h * w, N_CHANNELS))
    channels[pix, 0:3] = cloud.xyz[kept]
    channels[pix, 3] = cloud.range[kept]
    channels[pix, 4] = cloud.intensity[kept]
    label = None
    if cloud.labels is not None:
        label = np.full(h * w, IGNORE_LABEL, dtype=np.int64)
        label[pix] = cloud.labels[kept]
        label = label.reshape(h, w)
    return RangeImage(
        valid=(point_index >= 0).reshape(h, w),
        point_index=point_index.reshape(h, w),
        range=rng.reshape(h, w),
        channels=channels.reshape(h, w, N_CHANNELS),
        label=label,
    )


def project(cloud: PointCloud, spec: SensorSpec) -> tuple[RangeImage, Lut]:
    lut = scan_unfolding_pp(cloud, spec.width)
    return build_range_image(cloud, lut, spec), lut


def dropped_mask(img: RangeImage, lut: Lut) -> np.ndarray:
    """True for points that lost the keep contest at their pixel."""
    return img.point_index[lut.v, lut.u] != np.arange(len(lut))


def reproject_labels(
    img: RangeImage, lut: Lut, label: Optional[np.ndarray] = None, ignore: int = IGNORE_LABEL
) -> np.ndarray:
    """Give every point the label of its pixel; invalid pixels give ``ignore``.

    ``label`` overrides ``img.label`` (e.g. per-pixel predictions).
    """
    label = img.label if label is None else np.asarray(label)
    if label is None:
        raise ValueError("range image carries no labels")
    if label.shape != img.valid.shape:
        raise ValueError(f"label grid {label.shape} does not match image {img.valid.shape}")
    if len(lut) and (lut.u.max() >= img.width or lut.v.max() >= img.height):
        raise ValueError("lut coordinates fall outside the image")
    out = label[lut.v, lut.u].astype(np.int64)
    out[~img.valid[lut.v, lut.u]] = ignore
    return out


def pixel_labels(img: RangeImage, point_labels: np.ndarray, ignore: int = IGNORE_LABEL) -> np.ndarray:
    """Per-pixel grid holding the label of each pixel's kept point."""
    point_labels = np.asarray(point_labels, dtype=np.int64).reshape(-1)
    if img.valid.any() and img.point_index.max() >= point_labels.shape[0]:
        raise ValueError("fewer point labels than points in the image")
    grid = np.full(img.valid.shape, ignore, dtype=np.int64)
    grid[img.valid] = point_labels[img.point_index[img.valid]]
    return grid


@dataclass(frozen=True, eq=False)
class VirtualRangeImage:
    """Lossless H x W_v grid of point-index lists, stored CSR-style.

    Point indices of cell ``c = v * W_v + u`` are
    ``order[offsets[c]:offsets[c + 1]]`` in storage order.
    """

    height: int
    width: int
    order: np.ndarray
    offsets: np.ndarray

    def cell(self, v: int, u: int) -> np.ndarray:
        c = v * self.width + u
        return self.order[self.offsets[c]:self.offsets[c + 1]]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets).reshape(self.height, self.width)

    @property
    def n_points(self) -> int:
        return int(self.offsets[-1])


def build_virtual_range_image(
    cloud: PointCloud, spec: SensorSpec
) -> tuple[VirtualRangeImage, Lut]:
    lut = scan_unfolding_pp(cloud, spec.virtual_width)
    if cloud.n and lut.v.max() >= spec.height:
        raise DataError(f"ring index {int(lut.v.max())} >= sensor height {spec.height}")
    flat = lut.flat()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=spec.capacity)
    offsets = np.zeros(spec.capacity + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return VirtualRangeImage(spec.height, spec.virtual_width, order, offsets), lut


# ------------------------------------------------------------------ export


def save_range_image(path: PathLike, img: RangeImage) -> None:
    """Internal columnar image format, see ``docs/formats.md``."""
    h, w = img.valid.shape
    has_label = img.label is not None
    parts = [
        _IMAGE_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, h, w, N_CHANNELS, int(has_label)),
        img.valid.astype("u1").tobytes(),
        img.point_index.astype("<i8").tobytes(),
        img.range.astype("<f8").tobytes(),
        img.channels.astype("<f8").tobytes(),
    ]
    if has_label:
        parts.append(img.label.astype("<i4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_range_image(path: PathLike) -> RangeImage:
    raw = Path(path).read_bytes()
    if len(raw) < _IMAGE_HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, h, w, c, has_label = _IMAGE_HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC or version != IMAGE_VERSION:
        raise FormatError(f"{path}: not a range image file (version {version})")
    n = h * w
    expected = _IMAGE_HEADER.size + n * (1 + 8 + 8 + 8 * c) + (4 * n if has_label else 0)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    off = _IMAGE_HEADER.size

    def take(dtype, count):
        nonlocal off
        a = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += a.nbytes
        return a

    valid = take("u1", n).astype(bool).reshape(h, w)
    point_index = take("<i8", n).reshape(h, w).copy()
    rng = take("<f8", n).reshape(h, w).copy()
    channels = take("<f8", n * c).reshape(h, w, c).copy()
    label = take("<i4", n).astype(np.int64).reshape(h, w) if has_label else None
    return RangeImage(valid, point_index, rng, channels, label)


def save_range_png(path: PathLike, img: RangeImage) -> None:
    """16-bit grayscale PNG of the range channel, normalized to the max range."""
    top = float(img.range.max()) if img.valid.any() else 0.0
    scaled = np.zeros(img.range.shape, dtype=np.uint16)
    if top > 0:
        scaled = np.round(img.range / top * 65535.0).astype(np.uint16)
    Image.fromarray(scaled).save(str(path))
