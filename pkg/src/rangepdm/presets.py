"""Sensor geometries and dataset class tables."""

from rangepdm.cloud_io import SensorSpec

SENSOR_PRESETS = {
    "semantic-kitti-64x2048": SensorSpec(64, 2048, 2180),
    "semantic-poss-40x1800": SensorSpec(40, 1800, 1800),
    "nuscenes-32x1088": SensorSpec(32, 1088, 1090),
}

# raw SemanticKITTI label -> 19-class training id (0 = ignored)
SEMANTIC_KITTI_LEARNING_MAP = {
    0: 0, 1: 0, 10: 1, 11: 2, 13: 5, 15: 3, 16: 5, 18: 4, 20: 5,
    30: 6, 31: 7, 32: 8, 40: 9, 44: 10, 48: 11, 49: 12, 50: 13,
    51: 14, 52: 0, 60: 9, 70: 15, 71: 16, 72: 17, 80: 18, 81: 19,
    99: 0, 252: 1, 253: 7, 254: 6, 255: 8, 256: 5, 257: 5, 258: 4, 259: 5,
}

SEMANTIC_KITTI_CLASSES = [
    "unlabeled", "car", "bicycle", "motorcycle", "truck", "other-vehicle",
    "person", "bicyclist", "motorcyclist", "road", "parking", "sidewalk",
    "other-ground", "building", "fence", "vegetation", "trunk", "terrain",
    "pole", "traffic-sign",
]

SEMANTIC_POSS_CLASSES = [
    "unlabeled", "person", "rider", "car", "trunk", "plants", "traffic-sign",
    "pole", "trashcan", "building", "cone/stone", "fence", "bike", "ground",
]

NUSCENES_CLASSES = [
    "noise", "barrier", "bicycle", "bus", "car", "construction-vehicle",
    "motorcycle", "pedestrian", "traffic-cone", "trailer", "truck",
    "driveable-surface", "other-flat", "sidewalk", "terrain", "manmade",
    "vegetation",
]

_RARE_NAMES = {
    "semantic-kitti": (
        SEMANTIC_KITTI_CLASSES,
        ["bicycle", "motorcycle", "truck", "other-vehicle", "person", "bicyclist",
         "motorcyclist", "other-ground", "trunk", "pole", "traffic-sign"],
    ),
    "semantic-poss": (
        SEMANTIC_POSS_CLASSES,
        ["rider", "trunk", "traffic-sign", "pole", "trashcan", "cone/stone", "fence", "bike"],
    ),
    "nuscenes": (
        NUSCENES_CLASSES,
        ["barrier", "bicycle", "bus", "car", "construction-vehicle", "motorcycle",
         "pedestrian", "traffic-cone", "trailer", "truck"],
    ),
}

RARE_CLASS_PRESETS = {
    name: [classes.index(c) for c in rare] for name, (classes, rare) in _RARE_NAMES.items()
}


def sensor_preset(name: str) -> SensorSpec:
    try:
        return SENSOR_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown sensor preset {name!r}; choose from {sorted(SENSOR_PRESETS)}"
        ) from None


def remap_semantic_kitti(raw_labels):
    import numpy as np

    lut = np.zeros(max(SEMANTIC_KITTI_LEARNING_MAP) + 1, dtype=np.int64)
    for k, v in SEMANTIC_KITTI_LEARNING_MAP.items():
        lut[k] = v
    raw = np.asarray(raw_labels, dtype=np.int64)
    out = np.zeros_like(raw)
    ok = raw < lut.size
    out[ok] = lut[raw[ok]]
    return out
