"""Virtual range image-guided copy-rotate-paste (VRCrop) and the
conventional append-only copy-rotate-paste."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from rangepdm.cloud_io import PointCloud, SensorSpec
from rangepdm.projection import (
    Lut,
    VirtualRangeImage,
    azimuth_degrees,
    build_virtual_range_image,
    columns_from_azimuth,
)


@dataclass(frozen=True, eq=False)
class RareInstance:
    point_indices: np.ndarray
    class_id: int
    instance_id: int


@dataclass
class AugmentConfig:
    rare_classes: Sequence[int]
    paste_count: int = 1
    rotation_range: tuple = (0.0, 2 * np.pi)
    probability: float = 1.0
    seed: int = 123

    def __post_init__(self):
        if self.paste_count < 0:
            raise ValueError("paste_count must be >= 0")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must be in [0, 1]")


def extract_instances(cloud: PointCloud, cfg: AugmentConfig) -> list:
    """Group rare-class points by (class, instance); instance 0 points of a
    class form one group."""
    if cloud.labels is None:
        raise ValueError("extract_instances needs labels")
    inst = cloud.instances if cloud.instances is not None else np.zeros(cloud.n, dtype=np.int64)
    out = []
    for c in sorted(set(int(c) for c in cfg.rare_classes)):
        mask = cloud.labels == c
        if not mask.any():
            continue
        for i in np.unique(inst[mask]):
            idx = np.nonzero(mask & (inst == i))[0]
            out.append(RareInstance(idx, c, int(i)))
    return out


def rotate_z(points: np.ndarray, phi: float) -> np.ndarray:
    """Rotate M x 3 points about the z axis by ``phi`` radians."""
    c, s = np.cos(phi), np.sin(phi)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return np.asarray(points, dtype=np.float64) @ rot.T


def virtual_lut(cloud: PointCloud, spec: SensorSpec) -> Lut:
    if cloud.ring is None:
        raise ValueError("cloud needs rings")
    u = columns_from_azimuth(azimuth_degrees(cloud.xyz[:, :2]), spec.virtual_width)
    return Lut(u=u, v=cloud.ring.copy(), width=spec.virtual_width)


def copy_rotated(donor: PointCloud, instance: RareInstance, phi: float) -> PointCloud:
    pts = donor.subset(instance.point_indices)
    return pts.replace(xyz=rotate_z(pts.xyz, phi))


@dataclass
class PasteResult:
    cloud: PointCloud
    deleted: int
    pasted: int


def vrcrop_paste(
    target: PointCloud,
    vri: VirtualRangeImage,
    pasted: PointCloud,
    pasted_lut: Lut,
) -> PasteResult:
    """Delete every target point in a cell the pasted points occupy, then append
    the pasted points."""
    if pasted.n != len(pasted_lut):
        raise ValueError("pasted points and lut differ in length")
    if vri.n_points != target.n:
        raise ValueError("virtual image was not built from the target cloud")
    if pasted.n and (
        pasted_lut.u.min() < 0 or pasted_lut.u.max() >= vri.width
        or pasted_lut.v.min() < 0 or pasted_lut.v.max() >= vri.height
    ):
        raise RuntimeError("pasted point outside the virtual range image")
    keep = surviving_mask(target, vri, pasted_lut)
    kept = target.subset(keep)
    return PasteResult(PointCloud.concat([kept, _align(pasted, kept)]), int((~keep).sum()), pasted.n)


def conventional_paste(target: PointCloud, pasted: PointCloud) -> PointCloud:
    """Append the pasted points without removing anything."""
    if pasted.n == 0:
        return target
    return PointCloud.concat([target, _align(pasted, target)])


def _align(pasted: PointCloud, like: PointCloud) -> PointCloud:
    # give pasted points the same optional columns as the target
    changes = {}
    for name in ("ring", "labels", "instances"):
        have, want = getattr(pasted, name), getattr(like, name)
        if want is None and have is not None:
            changes[name] = None
        elif want is not None and have is None:
            changes[name] = np.zeros(pasted.n, dtype=np.int64)
    return pasted.replace(**changes) if changes else pasted


@dataclass
class AugmentRecord:
    cloud: PointCloud
    pastes: list = field(default_factory=list)  # dicts: class, instance, phi, deleted, pasted
    pasted_mask: Optional[np.ndarray] = None


def augment_scan(
    target: PointCloud,
    donor: PointCloud,
    spec: SensorSpec,
    cfg: AugmentConfig,
    rng: Optional[np.random.Generator] = None,
    mode: str = "vrcrop",
) -> AugmentRecord:
    """Copy rare instances from ``donor`` into ``target``.

    For each instance and each of ``paste_count`` repetitions: rotate by a
    uniform angle, recompute columns on the virtual grid, delete conflicting
    target points (``mode="vrcrop"``) and append. ``mode="conventional"``
    only appends.
    """
    if mode not in ("vrcrop", "conventional"):
        raise ValueError(f"unknown mode {mode!r}")
    if target.ring is None or donor.ring is None:
        raise ValueError("target and donor need ring indices")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    cloud = target
    pasted_mask = np.zeros(target.n, dtype=bool)
    record = AugmentRecord(cloud)
    if rng.uniform() >= cfg.probability:
        record.pasted_mask = pasted_mask
        return record
    lo, hi = cfg.rotation_range
    for inst in extract_instances(donor, cfg):
        for _ in range(cfg.paste_count):
            phi = float(rng.uniform(lo, hi))
            pts = copy_rotated(donor, inst, phi)
            if mode == "vrcrop":
                vri, _ = build_virtual_range_image(cloud, spec)
                lut = virtual_lut(pts, spec)
                keep = surviving_mask(cloud, vri, lut)
                cloud = vrcrop_paste(cloud, vri, pts, lut).cloud
                pasted_mask = np.concatenate([pasted_mask[keep], np.ones(pts.n, dtype=bool)])
                deleted = int((~keep).sum())
            else:
                cloud = conventional_paste(cloud, pts)
                pasted_mask = np.concatenate([pasted_mask, np.ones(pts.n, dtype=bool)])
                deleted = 0
            record.pastes.append({
                "class": inst.class_id, "instance": inst.instance_id,
                "phi": phi, "deleted": deleted, "pasted": pts.n,
            })
    record.cloud = cloud
    record.pasted_mask = pasted_mask
    return record


def surviving_mask(cloud: PointCloud, vri: VirtualRangeImage, lut: Lut) -> np.ndarray:
    """True for target points whose virtual cell receives no pasted point."""
    occupied = np.zeros(vri.height * vri.width, dtype=bool)
    occupied[lut.flat()] = True
    sizes = np.diff(vri.offsets)
    target_cells = np.empty(cloud.n, dtype=np.int64)
    target_cells[vri.order] = np.repeat(np.arange(sizes.size), sizes)
    return ~occupied[target_cells]
