"""Deterministic ray-cast LiDAR scenes with known rings and labels.

Rays sit on an ``H x W_v`` lattice: ring ``i`` has elevation interpolated
from ``fov_up`` (ring 0) to ``fov_down``, column ``j`` has azimuth
``(j + 0.5) * 360 / W_v``. Each ray keeps its nearest hit. Points are stored
ring-major with increasing azimuth inside a ring.

``collision_boost`` adds up to that many extra rays inside each lattice cell
that borders a class change along the ring, jittered toward the neighboring
cell. Only extra rays that hit a different class than the cell's own ray are
kept, so they create pixel collisions between classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from rangepdm.cloud_io import (
    PathLike,
    PointCloud,
    SensorSpec,
    write_kitti_bin,
    write_kitti_label,
    write_ring_sidecar,
)

_EPS = 1e-9


@dataclass(frozen=True)
class Primitive:
    """A scene surface.

    ``shape`` is ``"plane"`` (horizontal, at height ``z``), ``"box"``
    (``center``, ``size`` = length/width/height, ``yaw``) or ``"cylinder"``
    (vertical axis through ``center[:2]``, ``radius``, ``z_min``..``z_max``).
    """

    shape: str
    class_id: int
    instance_id: int = 0
    z: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (1.0, 1.0, 1.0)
    yaw: float = 0.0
    radius: float = 1.0
    z_min: float = -2.0
    z_max: float = 2.0

    def __post_init__(self):
        if self.shape not in ("plane", "box", "cylinder"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")


@dataclass
class SceneSpec:
    sensor: SensorSpec
    primitives: Sequence[Primitive]
    noise: float = 0.0
    seed: int = 123
    collision_boost: int = 0
    fov_up: float = 2.0
    fov_down: float = -24.8
    intensity: Optional[dict] = None

    def __post_init__(self):
        classes = {p.class_id for p in self.primitives}
        if len(classes) < 1:
            raise ValueError("scene needs at least one primitive")
        if self.collision_boost < 0 or self.noise < 0:
            raise ValueError("collision_boost and noise must be non-negative")


def class_intensity(class_id: int) -> float:
    """Fixed per-class remission in (0, 1)."""
    return float(0.05 + 0.9 * ((class_id * 0.61803398875) % 1.0))


# -------------------------------------------------------------- ray casting


def _hit_plane(p: Primitive, d: np.ndarray) -> np.ndarray:
    t = np.full(d.shape[0], np.inf)
    dz = d[:, 2]
    ok = np.abs(dz) > _EPS
    tt = np.where(ok, p.z / np.where(ok, dz, 1.0), np.inf)
    hit = ok & (tt > _EPS)
    t[hit] = tt[hit]
    return t


def _hit_cylinder(p: Primitive, d: np.ndarray) -> np.ndarray:
    cx, cy = p.center[0], p.center[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = -2.0 * (cx * d[:, 0] + cy * d[:, 1])
    c = cx * cx + cy * cy - p.radius ** 2
    disc = b * b - 4 * a * c
    best = np.full(d.shape[0], np.inf)
    ok = (disc >= 0) & (a > _EPS)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    safe_a = np.where(a > _EPS, a, 1.0)
    for root in ((-b - sq) / (2 * safe_a), (-b + sq) / (2 * safe_a)):
        z = root * d[:, 2]
        good = ok & (root > _EPS) & (z >= p.z_min) & (z <= p.z_max)
        best = np.where(good & (root < best), root, best)
    # end caps
    for zc in (p.z_min, p.z_max):
        dz = d[:, 2]
        okz = np.abs(dz) > _EPS
        tc = np.where(okz, zc / np.where(okz, dz, 1.0), np.inf)
        px, py = tc * d[:, 0] - cx, tc * d[:, 1] - cy
        good = okz & (tc > _EPS) & (px * px + py * py <= p.radius ** 2)
        best = np.where(good & (tc < best), tc, best)
    return best


def _hit_box(p: Primitive, d: np.ndarray) -> np.ndarray:
    c, s = np.cos(p.yaw), np.sin(p.yaw)
    rot_t = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot_t @ (-np.asarray(p.center, dtype=np.float64))
    dl = d @ rot_t.T
    half = 0.5 * np.asarray(p.size, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / dl
        t2 = (half - o) / dl
    # axis-parallel rays: inside the slab -> unbounded, outside -> miss
    par = np.abs(dl) < _EPS
    inside = np.abs(o) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    hit = (tmax >= tmin) & (tmax > _EPS)
    t = np.where(tmin > _EPS, tmin, tmax)
    return np.where(hit, t, np.inf)


_HIT = {"plane": _hit_plane, "cylinder": _hit_cylinder, "box": _hit_box}


def cast_rays(primitives: Sequence[Primitive], dirs: np.ndarray):
    """Nearest hit distance and primitive index per unit ray from the origin
    (``inf`` / -1 on a miss)."""
    best_t = np.full(dirs.shape[0], np.inf)
    best_p = np.full(dirs.shape[0], -1, dtype=np.int64)
    for i, prim in enumerate(primitives):
        t = _HIT[prim.shape](prim, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_p[closer] = i
    return best_t, best_p


def _directions(elev: np.ndarray, azim: np.ndarray) -> np.ndarray:
    ce = np.cos(elev)
    return np.stack([ce * np.cos(azim), ce * np.sin(azim), np.sin(elev)], axis=-1)


def ring_elevations(h: int, fov_up: float, fov_down: float) -> np.ndarray:
    if h == 1:
        return np.radians(np.array([0.5 * (fov_up + fov_down)]))
    return np.radians(fov_up + (fov_down - fov_up) * np.arange(h) / (h - 1))


# ---------------------------------------------------------------- generate


@dataclass
class SynthScan:
    cloud: PointCloud
    column: np.ndarray  # lattice column of each point
    boosted: np.ndarray  # True for collision-boost points
    meta: dict = field(default_factory=dict)


def generate(scene: SceneSpec) -> SynthScan:
    sensor = scene.sensor
    h, wv = sensor.height, sensor.virtual_width
    rng = np.random.default_rng(scene.seed)
    prims = list(scene.primitives)
    cls = np.array([p.class_id for p in prims], dtype=np.int64)
    inst = np.array([p.instance_id for p in prims], dtype=np.int64)

    step = 2 * np.pi / wv
    elev = ring_elevations(h, scene.fov_up, scene.fov_down)
    col_az = (np.arange(wv) + 0.5) * step
    ring_ids = np.repeat(np.arange(h), wv)
    cols = np.tile(np.arange(wv), h)
    az = col_az[cols]
    t, prim = cast_rays(prims, _directions(elev[ring_ids], az))
    boost = np.zeros(ring_ids.shape[0], dtype=bool)

    if scene.collision_boost > 0:
        grid_p = prim.reshape(h, wv)
        grid_c = np.where(grid_p >= 0, cls[np.maximum(grid_p, 0)], -1)
        extra_r, extra_c, extra_a = [], [], []
        for direction in (1, -1):
            nb = np.roll(grid_c, -direction, axis=1)
            edge = (grid_c >= 0) & (nb >= 0) & (grid_c != nb)
            rr, cc = np.nonzero(edge)
            for m in range(1, scene.collision_boost + 1):
                off = direction * 0.45 * step * m / scene.collision_boost
                extra_r.append(rr)
                extra_c.append(cc)
                extra_a.append(col_az[cc] + off)
        er = np.concatenate(extra_r)
        ec = np.concatenate(extra_c)
        ea = np.concatenate(extra_a)
        et, ep = cast_rays(prims, _directions(elev[er], ea))
        own = grid_c[er, ec]
        keep = (ep >= 0) & (cls[np.maximum(ep, 0)] != own)
        ring_ids = np.concatenate([ring_ids, er[keep]])
        cols = np.concatenate([cols, ec[keep]])
        az = np.concatenate([az, ea[keep]])
        t = np.concatenate([t, et[keep]])
        prim = np.concatenate([prim, ep[keep]])
        boost = np.concatenate([boost, np.ones(int(keep.sum()), dtype=bool)])

    hit = prim >= 0
    ring_ids, cols, az, t, prim, boost = (a[hit] for a in (ring_ids, cols, az, t, prim, boost))
    # ring-major, increasing azimuth within a ring
    order = np.lexsort((az, ring_ids))
    ring_ids, cols, az, t, prim, boost = (a[order] for a in (ring_ids, cols, az, t, prim, boost))
    if scene.noise > 0:
        t = np.maximum(t + rng.normal(0.0, scene.noise, size=t.shape), 0.05)
    xyz = _directions(elev[ring_ids], az) * t[:, None]
    labels = cls[prim]
    table = scene.intensity or {}
    intensity = np.array([table.get(int(c), class_intensity(int(c))) for c in labels])
    cloud = PointCloud(xyz=xyz, intensity=intensity, ring=ring_ids, labels=labels, instances=inst[prim])
    meta = {
        "n_points": int(cloud.n),
        "n_boost": int(boost.sum()),
        "seed": scene.seed,
        "sensor": [sensor.height, sensor.width, sensor.virtual_width],
    }
    return SynthScan(cloud=cloud, column=cols, boosted=boost, meta=meta)


# ----------------------------------------------------------- scene presets


BACKGROUND, GROUND, BUILDING, CAR, POLE = 1, 1, 2, 3, 4


def random_scene(
    sensor: SensorSpec,
    seed: int = 123,
    n_boxes: int = 4,
    n_poles: int = 6,
    collision_boost: int = 0,
    noise: float = 0.0,
    two_class: bool = False,
    wall_radius: float = 30.0,
    sensor_height: float = 1.73,
    with_wall: bool = True,
) -> SceneSpec:
    """Ground, an enclosing wall, car-sized boxes and poles at seeded poses.

    With ``two_class`` everything is background (1) or object (2); otherwise
    ground=1, building=2, car=3 and pole=4. Boxes and poles carry instance ids.
    """
    rng = np.random.default_rng(seed)
    bg_ground, bg_wall = (1, 1) if two_class else (GROUND, BUILDING)
    car_cls, pole_cls = (2, 2) if two_class else (CAR, POLE)
    prims = [Primitive("plane", bg_ground, z=-sensor_height)]
    if with_wall:
        prims.append(Primitive("cylinder", bg_wall, radius=wall_radius,
                               z_min=-sensor_height - 1.0, z_max=40.0))
    inst = 1
    for _ in range(n_boxes):
        r = rng.uniform(6.0, 0.6 * wall_radius)
        a = rng.uniform(0, 2 * np.pi)
        length, width, height = rng.uniform(3.5, 4.8), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.8)
        prims.append(Primitive(
            "box", car_cls, inst,
            center=(r * np.cos(a), r * np.sin(a), -sensor_height + height / 2),
            size=(length, width, height), yaw=rng.uniform(0, np.pi),
        ))
        inst += 1
    for _ in range(n_poles):
        r = rng.uniform(4.0, 0.6 * wall_radius)
        a = rng.uniform(0, 2 * np.pi)
        prims.append(Primitive(
            "cylinder", pole_cls, inst, center=(r * np.cos(a), r * np.sin(a), 0.0),
            radius=rng.uniform(0.15, 0.35), z_min=-sensor_height, z_max=rng.uniform(2.0, 5.0),
        ))
        inst += 1
    return SceneSpec(sensor=sensor, primitives=prims, noise=noise, seed=seed,
                     collision_boost=collision_boost)


def write_scan(prefix: PathLike, cloud: PointCloud) -> dict:
    """Write ``<prefix>.bin``, ``.label`` and ``.ring``; returns the paths."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {ext: Path(f"{prefix}.{ext}") for ext in ("bin", "label", "ring")}
    write_kitti_bin(paths["bin"], cloud)
    if cloud.labels is not None:
        write_kitti_label(paths["label"], cloud.labels, cloud.instances)
    if cloud.ring is not None:
        write_ring_sidecar(paths["ring"], cloud.ring)
    return {k: str(v) for k, v in paths.items()}
