"""Point cloud containers and binary readers/writers.

Supported layouts (all little-endian):

* KITTI ``.bin``: float32 records ``(x, y, z, intensity)``; 16 bytes/point.
  The extended variant adds a fifth float32 column holding the ring index.
* KITTI ``.label``: one uint32 per point, low 16 bits semantic class,
  high 16 bits instance id.
* Ring sidecar: one uint16 per point, same ordering as the ``.bin`` file.
* Internal cloud format (``.rpc``), see ``docs/formats.md``.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from rangepdm.errors import DataError, FormatError

PathLike = Union[str, Path]

CLOUD_MAGIC = b"RPDMCLD\x00"
CLOUD_VERSION = 1
_CLOUD_HEADER = struct.Struct("<8sIQIIII")  # magic, version, N, H, W, W_v, flags
_FLAG_RING = 1
_FLAG_LABELS = 2
_FLAG_INSTANCES = 4


@dataclass(frozen=True)
class SensorSpec:
    """Range-image geometry: ``height`` scan lines, ``width`` image columns and
    ``virtual_width`` columns for the lossless virtual image."""

    height: int
    width: int
    virtual_width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"sensor dims must be >= 1, got {self.height}x{self.width}")
        if self.virtual_width < self.width:
            raise ValueError(
                f"virtual_width ({self.virtual_width}) must be >= width ({self.width})"
            )

    @property
    def capacity(self) -> int:
        """Number of cells in the virtual range image."""
        return self.height * self.virtual_width


def _frozen(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with coordinates, intensity and optional ring/label columns.

    Arrays are copied to canonical dtypes on construction and made read-only;
    ``range`` is always derived from ``xyz``.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    ring: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    instances: Optional[np.ndarray] = None
    range: np.ndarray = dataclasses.field(init=False)

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = xyz.shape[0]
        intensity = np.array(self.intensity, dtype=np.float64).reshape(-1)
        if intensity.shape[0] != n:
            raise ValueError(f"intensity has {intensity.shape[0]} entries, expected {n}")
        bad = ~np.isfinite(xyz).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite coordinate at point index {int(np.argmax(bad))}")
        cols = {"xyz": xyz, "intensity": intensity}
        for name, dtype in (("ring", np.int64), ("labels", np.int64), ("instances", np.int64)):
            value = getattr(self, name)
            if value is None:
                cols[name] = None
                continue
            value = np.array(value, dtype=dtype).reshape(-1)
            if value.shape[0] != n:
                raise ValueError(f"{name} has {value.shape[0]} entries, expected {n}")
            cols[name] = value
        if cols["ring"] is not None and n and cols["ring"].min() < 0:
            raise DataError("negative ring index")
        for name, value in cols.items():
            object.__setattr__(self, name, _frozen(value))
        object.__setattr__(self, "range", _frozen(np.sqrt(xyz[:, 0] ** 2 + xyz[:, 1] ** 2 + xyz[:, 2] ** 2)))

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def n(self) -> int:
        return self.xyz.shape[0]

    def replace(self, **changes) -> "PointCloud":
        fields = {
            "xyz": self.xyz,
            "intensity": self.intensity,
            "ring": self.ring,
            "labels": self.labels,
            "instances": self.instances,
        }
        fields.update(changes)
        return PointCloud(**fields)

    def subset(self, index) -> "PointCloud":
        """Select points by integer index array or boolean mask."""
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return PointCloud(
            xyz=self.xyz[index],
            intensity=self.intensity[index],
            ring=pick(self.ring),
            labels=pick(self.labels),
            instances=pick(self.instances),
        )

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)), np.zeros(0))

        def join(name):
            parts = [getattr(c, name) for c in clouds]
            if any(p is None for p in parts):
                if all(p is None for p in parts):
                    return None
                raise ValueError(f"cannot concatenate clouds with and without {name}")
            return np.concatenate(parts)

        return PointCloud(
            xyz=np.concatenate([c.xyz for c in clouds]),
            intensity=np.concatenate([c.intensity for c in clouds]),
            ring=join("ring"),
            labels=join("labels"),
            instances=join("instances"),
        )

    def equals(self, other: "PointCloud") -> bool:
        """Exact column-wise equality."""
        for name in ("xyz", "intensity", "ring", "labels", "instances"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


# --------------------------------------------------------------------- KITTI


def read_kitti_bin(path: PathLike, with_ring: bool = False) -> PointCloud:
    """Read a KITTI velodyne scan.

    With ``with_ring`` the file is the extended 5-column layout whose last
    float32 column holds the ring index.
    """
    raw = Path(path).read_bytes()
    ncol = 5 if with_ring else 4
    rec = 4 * ncol
    if len(raw) % rec:
        offset = len(raw) - len(raw) % rec
        raise FormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"(file is {len(raw)} bytes, records are {rec} bytes)"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, ncol)
    bad = ~np.isfinite(data[:, :3]).all(axis=1)
    if bad.any():
        raise DataError(f"{path}: non-finite coordinate at point index {int(np.argmax(bad))}")
    ring = None
    if with_ring:
        r = data[:, 4]
        if not (np.isfinite(r).all() and np.all(r == np.round(r)) and np.all(r >= 0)):
            raise DataError(f"{path}: ring column must hold non-negative integers")
        ring = r.astype(np.int64)
    return PointCloud(xyz=data[:, :3], intensity=data[:, 3], ring=ring)


def write_kitti_bin(path: PathLike, cloud: PointCloud, with_ring: bool = False) -> None:
    cols = [cloud.xyz, cloud.intensity[:, None]]
    if with_ring:
        if cloud.ring is None:
            raise ValueError("cloud has no ring column")
        cols.append(cloud.ring[:, None])
    data = np.hstack(cols).astype("<f4")
    Path(path).write_bytes(data.tobytes())


def read_kitti_label(path: PathLike, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(labels, instances)`` decoded from a ``.label`` file."""
    raw = Path(path).read_bytes()
    if len(raw) != 4 * n:
        raise FormatError(f"{path}: expected {4 * n} bytes for {n} points, got {len(raw)}")
    words = np.frombuffer(raw, dtype="<u4")
    labels = (words & 0xFFFF).astype(np.int64)
    instances = (words >> 16).astype(np.int64)
    return labels, instances


def write_kitti_label(path: PathLike, labels, instances=None) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    if instances is None:
        instances = np.zeros_like(labels)
    instances = np.asarray(instances, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("semantic labels must fit in 16 bits")
    if instances.size and (instances.min() < 0 or instances.max() > 0xFFFF):
        raise ValueError("instance ids must fit in 16 bits")
    words = (instances.astype("<u4") << 16) | labels.astype("<u4")
    Path(path).write_bytes(words.astype("<u4").tobytes())


def read_ring_sidecar(path: PathLike, n: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != 2 * n:
        raise FormatError(f"{path}: expected {2 * n} bytes for {n} points, got {len(raw)}")
    return np.frombuffer(raw, dtype="<u2").astype(np.int64)


def write_ring_sidecar(path: PathLike, ring) -> None:
    ring = np.asarray(ring, dtype=np.int64)
    if ring.size and (ring.min() < 0 or ring.max() > 0xFFFF):
        raise ValueError("ring ids must fit in 16 bits")
    Path(path).write_bytes(ring.astype("<u2").tobytes())


def load_labeled_scan(
    bin_path: PathLike,
    label_path: Optional[PathLike] = None,
    ring_path: Optional[PathLike] = None,
) -> PointCloud:
    cloud = read_kitti_bin(bin_path)
    if label_path is not None:
        labels, instances = read_kitti_label(label_path, cloud.n)
        cloud = cloud.replace(labels=labels, instances=instances)
    if ring_path is not None:
        cloud = cloud.replace(ring=read_ring_sidecar(ring_path, cloud.n))
    return cloud


# -------------------------------------------------------------------- rings


def _heuristic_rings(xy: np.ndarray, cells: int, direction: str) -> np.ndarray:
    n = xy.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    az = np.mod(np.arctan2(xy[:, 1], xy[:, 0]), 2 * np.pi)
    steps = np.diff(np.unwrap(az))
    if direction == "auto":
        clockwise = bool(steps.size) and float(np.median(steps)) < 0
    elif direction in ("ccw", "cw"):
        clockwise = direction == "cw"
    else:
        raise ValueError(f"direction must be 'auto', 'ccw' or 'cw', got {direction!r}")
    if clockwise:
        az = np.mod(2 * np.pi - az, 2 * np.pi)
    acc = np.unwrap(az)
    # ring boundaries sit on the edge of the first point's azimuth cell
    step = 2 * np.pi / cells
    base = np.floor(acc[0] / step) * step
    ring = np.floor((acc - base) / (2 * np.pi)).astype(np.int64)
    return np.maximum.accumulate(np.maximum(ring, 0))


def assign_rings(
    cloud: PointCloud,
    spec: SensorSpec,
    source="heuristic",
    direction: str = "auto",
) -> PointCloud:
    """Attach ring indices to ``cloud``.

    ``source`` is one of:

    * ``"heuristic"``: walk points in storage order, unwrap azimuth and start a
      new ring each time the accumulated azimuth completes another full turn
      (turns are measured from the virtual-image cell edge of the first point;
      ``direction`` picks the sweep sense, ``"auto"`` infers it);
    * ``"column"``: keep the ring column already present (extended input);
    * a path to a uint16 ring sidecar file;
    * an integer array with one ring per point.
    """
    if isinstance(source, str) and source == "heuristic":
        ring = _heuristic_rings(cloud.xyz[:, :2], spec.virtual_width, direction)
        if ring.size and ring.max() >= spec.height:
            raise DataError(
                f"azimuth heuristic found {int(ring.max()) + 1} rings, sensor has {spec.height}"
            )
    elif isinstance(source, str) and source == "column":
        if cloud.ring is None:
            raise DataError("cloud has no ring column")
        ring = cloud.ring
    elif isinstance(source, (str, Path)):
        ring = read_ring_sidecar(source, cloud.n)
    else:
        ring = np.asarray(source, dtype=np.int64).reshape(-1)
        if ring.shape[0] != cloud.n:
            raise FormatError(f"ring array has {ring.shape[0]} entries, cloud has {cloud.n}")
    if ring.size and (ring.min() < 0 or ring.max() >= spec.height):
        raise DataError(f"ring index out of range [0, {spec.height})")
    return cloud.replace(ring=ring)


# ----------------------------------------------------------- internal format


def write_cloud(path: PathLike, cloud: PointCloud, spec: Optional[SensorSpec] = None) -> None:
    """Write the lossless internal columnar format."""
    h, w, wv = (spec.height, spec.width, spec.virtual_width) if spec else (0, 0, 0)
    flags = 0
    flags |= _FLAG_RING if cloud.ring is not None else 0
    flags |= _FLAG_LABELS if cloud.labels is not None else 0
    flags |= _FLAG_INSTANCES if cloud.instances is not None else 0
    parts = [
        _CLOUD_HEADER.pack(CLOUD_MAGIC, CLOUD_VERSION, cloud.n, h, w, wv, flags),
        cloud.xyz.astype("<f8").tobytes(),
        cloud.intensity.astype("<f8").tobytes(),
    ]
    if cloud.ring is not None:
        parts.append(cloud.ring.astype("<u2").tobytes())
    if cloud.labels is not None:
        parts.append(cloud.labels.astype("<u4").tobytes())
    if cloud.instances is not None:
        parts.append(cloud.instances.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_cloud(path: PathLike) -> tuple[PointCloud, Optional[SensorSpec]]:
    raw = Path(path).read_bytes()
    if len(raw) < _CLOUD_HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, n, h, w, wv, flags = _CLOUD_HEADER.unpack_from(raw)
    if magic != CLOUD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CLOUD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    layout = [("xyz", "<f8", 3), ("intensity", "<f8", 1)]
    if flags & _FLAG_RING:
        layout.append(("ring", "<u2", 1))
    if flags & _FLAG_LABELS:
        layout.append(("labels", "<u4", 1))
    if flags & _FLAG_INSTANCES:
        layout.append(("instances", "<u4", 1))
    expected = _CLOUD_HEADER.size + sum(np.dtype(dt).itemsize * k * n for _, dt, k in layout)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    offset = _CLOUD_HEADER.size
    cols = {}
    for name, dt, k in layout:
        count = n * k
        a = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
        offset += a.nbytes
        cols[name] = a.reshape(n, 3) if k == 3 else a
    spec = SensorSpec(h, w, wv) if h else None
    return PointCloud(**cols), spec
