"""Deterministic synthetic indoor scenes and the PTC1 binary dataset format.

Scenes sample the planar shell of a room (floor/walls/ceiling), a few boxes
resting on the floor and one sphere, with analytic outward normals, per-class
base colors plus per-point jitter, and optional Gaussian coordinate noise.
Class colors deliberately overlap so that raw input features alone do not
separate the classes well; telling a box top from the floor requires context.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .cloud import PointCloud

CLASS_FLOOR = 0
CLASS_WALL = 1
CLASS_CEILING = 2
CLASS_BOX = 3
CLASS_SPHERE = 4
CLASS_NAMES = {0: "floor", 1: "wall", 2: "ceiling", 3: "box", 4: "sphere"}
NUM_CLASSES = 5

# intentionally close base colors (see module docstring)
_BASE_COLORS = {
    CLASS_FLOOR: (0.52, 0.50, 0.46),
    CLASS_WALL: (0.50, 0.53, 0.50),
    CLASS_CEILING: (0.48, 0.50, 0.53),
    CLASS_BOX: (0.54, 0.49, 0.50),
    CLASS_SPHERE: (0.49, 0.52, 0.54),
}
_COLOR_JITTER = 0.28


class FormatError(ValueError):
    """Malformed PTC1 payload; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic room."""

    room_extent: tuple[float, float, float] = (2.2, 1.8, 1.6)
    n_boxes: int = 2
    n_points: int = 1200
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> "SceneSpec":
        if any(e <= 0 for e in self.room_extent):
            raise ValueError(f"room extents must be positive, got {self.room_extent}")
        if self.n_points < 1000:
            raise ValueError(f"n_points must be >= 1000, got {self.n_points}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.n_boxes < 0:
            raise ValueError(f"n_boxes must be >= 0, got {self.n_boxes}")
        return self


def _allocate(areas: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of ``total`` points proportional to areas."""
    raw = areas / areas.sum() * total
    base = np.floor(raw).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rest]] += 1
    return base


def _sample_rect(n, origin, u_vec, v_vec, normal, rng):
    uv = rng.random((n, 2))
    coords = np.asarray(origin) + uv[:, :1] * np.asarray(u_vec) + uv[:, 1:] * np.asarray(v_vec)
    normals = np.tile(np.asarray(normal, dtype=np.float64), (n, 1))
    return coords, normals


def _surfaces(spec: SceneSpec, rng: np.random.Generator):
    """Yield (class_id, area, sampler) for every planar/curved patch."""
    w, d, h = spec.room_extent
    surfaces = [
        (CLASS_FLOOR, w * d, lambda n, r: _sample_rect(n, (0, 0, 0), (w, 0, 0), (0, d, 0), (0, 0, 1), r)),
        (CLASS_CEILING, w * d, lambda n, r: _sample_rect(n, (0, 0, h), (w, 0, 0), (0, d, 0), (0, 0, -1), r)),
        (CLASS_WALL, w * h, lambda n, r: _sample_rect(n, (0, 0, 0), (w, 0, 0), (0, 0, h), (0, 1, 0), r)),
        (CLASS_WALL, w * h, lambda n, r: _sample_rect(n, (0, d, 0), (w, 0, 0), (0, 0, h), (0, -1, 0), r)),
        (CLASS_WALL, d * h, lambda n, r: _sample_rect(n, (0, 0, 0), (0, d, 0), (0, 0, h), (1, 0, 0), r)),
        (CLASS_WALL, d * h, lambda n, r: _sample_rect(n, (w, 0, 0), (0, d, 0), (0, 0, h), (-1, 0, 0), r)),
    ]
    for _ in range(spec.n_boxes):
        size = rng.uniform(0.18, 0.32, 3) * np.array([w, d, h])
        pos = np.array([rng.uniform(0.05 * w, 0.95 * w - size[0]),
                        rng.uniform(0.05 * d, 0.95 * d - size[1]), 0.0])
        sx, sy, sz = size
        # five exposed faces of a floor-resting box (bottom skipped)
        faces = [
            ((pos[0], pos[1], sz), (sx, 0, 0), (0, sy, 0), (0, 0, 1)),
            ((pos[0], pos[1], 0), (sx, 0, 0), (0, 0, sz), (0, -1, 0)),
            ((pos[0], pos[1] + sy, 0), (sx, 0, 0), (0, 0, sz), (0, 1, 0)),
            ((pos[0], pos[1], 0), (0, sy, 0), (0, 0, sz), (-1, 0, 0)),
            ((pos[0] + sx, pos[1], 0), (0, sy, 0), (0, 0, sz), (1, 0, 0)),
        ]
        for origin, u, v, nrm in faces:
            area = float(np.linalg.norm(np.cross(u, v)))
            surfaces.append((CLASS_BOX, area,
                             lambda n, r, o=origin, uu=u, vv=v, nn=nrm: _sample_rect(n, o, uu, vv, nn, r)))
    radius = rng.uniform(0.14, 0.22) * min(w, d, h)
    center = np.array([rng.uniform(radius, w - radius),
                       rng.uniform(radius, d - radius),
                       rng.uniform(radius, h - radius)])

    def sample_sphere(n, r):
        direc = r.standard_normal((n, 3))
        direc /= np.linalg.norm(direc, axis=1, keepdims=True)
        return center + radius * direc, direc

    surfaces.append((CLASS_SPHERE, 4 * np.pi * radius ** 2, sample_sphere))
    return surfaces


def surface_area_by_class(spec: SceneSpec) -> dict[int, float]:
    """Analytic per-class surface area for a spec (same RNG draws as generation)."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    areas: dict[int, float] = {}
    for cls, area, _ in _surfaces(spec, rng):
        areas[cls] = areas.get(cls, 0.0) + area
    return areas


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample one labeled scene; identical specs produce bit-identical clouds."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    surfaces = _surfaces(spec, rng)
    areas = np.array([a for _, a, _ in surfaces])
    counts = _allocate(areas, spec.n_points)

    coords, normals, labels = [], [], []
    for (cls, _, sampler), n in zip(surfaces, counts):
        if n == 0:
            continue
        c, nrm = sampler(int(n), rng)
        coords.append(c)
        normals.append(nrm)
        labels.append(np.full(int(n), cls, dtype=np.int32))
    coord = np.concatenate(coords)
    normal = np.concatenate(normals)
    label = np.concatenate(labels)

    base = np.array([_BASE_COLORS[int(c)] for c in label])
    color = np.clip(base + rng.uniform(-_COLOR_JITTER, _COLOR_JITTER, base.shape), 0.0, 1.0)

    if spec.noise_sigma > 0:
        coord = coord + rng.normal(0.0, spec.noise_sigma, coord.shape)

    perm = rng.permutation(coord.shape[0])
    return PointCloud(
        coord=coord[perm].astype(np.float32),
        color=color[perm].astype(np.float32),
        normal=normal[perm].astype(np.float32),
        label=label[perm],
    ).validate()


# ---------------------------------------------------------------------------
# PTC1 container: per cloud one record of
#   magic "PTC1" | version u16 | presence bitmask u16 | count u64 | arrays
# with little-endian f32 coord/color/normal triplets and i32 labels.
# A dataset file is simply records back to back.
# ---------------------------------------------------------------------------

MAGIC = b"PTC1"
VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
BIT_COLOR, BIT_NORMAL, BIT_LABEL = 1, 2, 4


def _write_record(f: BinaryIO, cloud: PointCloud):
    mask = 0
    if cloud.color is not None:
        mask |= BIT_COLOR
    if cloud.normal is not None:
        mask |= BIT_NORMAL
    if cloud.label is not None:
        mask |= BIT_LABEL
    f.write(_HEADER.pack(MAGIC, VERSION, mask, cloud.n))
    f.write(np.ascontiguousarray(cloud.coord, dtype="<f4").tobytes())
    if cloud.color is not None:
        f.write(np.ascontiguousarray(cloud.color, dtype="<f4").tobytes())
    if cloud.normal is not None:
        f.write(np.ascontiguousarray(cloud.normal, dtype="<f4").tobytes())
    if cloud.label is not None:
        f.write(np.ascontiguousarray(cloud.label, dtype="<i4").tobytes())


def write_dataset(clouds: list[PointCloud], path) -> None:
    """Write clouds as consecutive PTC1 records."""
    for cloud in clouds:
        cloud.validate()
    with open(path, "wb") as f:
        for cloud in clouds:
            _write_record(f, cloud)


def read_dataset(path) -> list[PointCloud]:
    """Read back a PTC1 file; raises FormatError with a byte offset on damage."""
    with open(path, "rb") as f:
        blob = f.read()
    clouds = []
    offset = 0
    total = len(blob)
    while offset < total:
        if total - offset < _HEADER.size:
            raise FormatError(f"truncated header: {total - offset} bytes left", offset)
        magic, version, mask, count = _HEADER.unpack_from(blob, offset)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", offset + 4)
        if mask & ~(BIT_COLOR | BIT_NORMAL | BIT_LABEL):
            raise FormatError(f"invalid presence bitmask 0x{mask:04x}", offset + 6)
        if count < 1:
            raise FormatError(f"invalid point count {count}", offset + 8)
        offset += _HEADER.size
        need = 12 * count
        need += 12 * count if mask & BIT_COLOR else 0
        need += 12 * count if mask & BIT_NORMAL else 0
        need += 4 * count if mask & BIT_LABEL else 0
        if total - offset < need:
            raise FormatError(f"truncated payload: need {need} bytes, have {total - offset}", offset)

        def take(nbytes, dtype, cols):
            nonlocal offset
            arr = np.frombuffer(blob, dtype=dtype, count=nbytes // np.dtype(dtype).itemsize,
                                offset=offset)
            offset += nbytes
            return arr.reshape(-1, cols).copy() if cols > 1 else arr.copy()

        coord = take(12 * count, "<f4", 3)
        color = take(12 * count, "<f4", 3) if mask & BIT_COLOR else None
        normal = take(12 * count, "<f4", 3) if mask & BIT_NORMAL else None
        label = take(4 * count, "<i4", 1) if mask & BIT_LABEL else None
        clouds.append(PointCloud(coord=coord, color=color, normal=normal, label=label))
    return clouds


def generate_dataset(n_scenes: int, master_seed: int, n_points: int,
                     room_min: tuple[float, float, float], room_max: tuple[float, float, float],
                     n_boxes_range: tuple[int, int], noise_sigma: float) -> list[PointCloud]:
    """Generate a reproducible list of scenes with per-scene specs drawn from ranges."""
    rng = np.random.default_rng(np.random.SeedSequence((master_seed, 0xD5)))
    scenes = []
    for i in range(n_scenes):
        extent = tuple(rng.uniform(lo, hi) for lo, hi in zip(room_min, room_max))
        spec = SceneSpec(
            room_extent=extent,
            n_boxes=int(rng.integers(n_boxes_range[0], n_boxes_range[1] + 1)),
            n_points=n_points,
            noise_sigma=noise_sigma,
            seed=int(rng.integers(0, 2 ** 63 - 1)),
        )
        scenes.append(generate_scene(spec))
    return scenes
