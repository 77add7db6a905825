"""Point cloud data model, voxel grid sampling, spatial hashing and NN queries.

All clouds are columnar: per-point arrays sharing one leading length. The
``origin_*`` fields always refer to the un-augmented source scene so that
views of the same scene can be matched after arbitrary spatial augmentation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

def voxel_cells(coord: np.ndarray, cell_size: float) -> np.ndarray:
    """Componentwise floor(coord / cell_size) as int64 (floor, not truncation)."""
    return np.floor(coord / cell_size).astype(np.int64)


def _shared_packer(cells_list: list[np.ndarray], margin: int = 0):
    """Lex-order-preserving int64 packer shared by several cell arrays.

    Cell indices are shifted by the joint per-axis minimum (minus ``margin``
    for neighbor offsets) and packed into disjoint bit ranges. Returns None
    when the joint span does not fit 62 bits (degenerate cell sizes); callers
    then fall back to exact but slower keying.
    """
    mins = np.min([c.min(axis=0) for c in cells_list], axis=0) - margin
    maxs = np.max([c.max(axis=0) for c in cells_list], axis=0) + margin
    span = maxs - mins + 1
    bits = [max(1, int(np.ceil(np.log2(int(s) + 1)))) for s in span]
    if sum(bits) > 62:
        return None
    s1, s2 = bits[1] + bits[2], bits[2]

    def pack(cells: np.ndarray) -> np.ndarray:
        sh = cells.astype(np.int64) - mins
        return (sh[:, 0] << (s1)) | (sh[:, 1] << s2) | sh[:, 2]

    return pack


def pack_cells(cells: np.ndarray) -> np.ndarray:
    """Pack one array of integer 3-cells into lex-order-preserving int64 keys."""
    pack = _shared_packer([cells])
    if pack is None:
        raise ValueError("cell index span too large to pack")
    return pack(cells)


def cell_inverse(cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group rows by identical cell; returns (parent ids, counts).

    Segment ids are assigned in lexicographic cell order, so results are
    independent of the input row order.
    """
    pack = _shared_packer([cells])
    if pack is not None:
        _, parent, counts = np.unique(pack(cells), return_inverse=True, return_counts=True)
    else:
        _, parent, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    return parent.reshape(-1), counts


@dataclass
class PointCloud:
    """Columnar point sample. ``coord`` is (N, 3) in meters.

    ``origin_coord`` / ``origin_index`` track each point's pre-augmentation
    position and its index in the source scene; freshly generated scenes use
    the identity (coord copy / arange).
    """

    coord: np.ndarray
    color: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    label: Optional[np.ndarray] = None
    origin_coord: np.ndarray = None
    origin_index: np.ndarray = None

    def __post_init__(self):
        self.coord = np.ascontiguousarray(self.coord)
        if self.coord.ndim != 2 or self.coord.shape[1] != 3 or self.coord.shape[0] < 1:
            raise ValueError(f"coord must be (N>=1, 3), got {self.coord.shape}")
        if self.origin_coord is None:
            self.origin_coord = self.coord.copy()
        if self.origin_index is None:
            self.origin_index = np.arange(self.coord.shape[0], dtype=np.int64)
        self.origin_index = np.asarray(self.origin_index, dtype=np.int64)

    def __len__(self) -> int:
        return self.coord.shape[0]

    @property
    def n(self) -> int:
        return self.coord.shape[0]

    def validate(self) -> "PointCloud":
        """Check the structural invariants; returns self for chaining."""
        n = self.n
        for name in ("color", "normal", "label", "origin_coord", "origin_index"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != n:
                raise ValueError(f"{name} length {arr.shape[0]} != {n}")
        if self.color is not None:
            if self.color.min() < -1e-6 or self.color.max() > 1.0 + 1e-6:
                raise ValueError("color components must lie in [0, 1]")
        if self.normal is not None:
            norms = np.linalg.norm(self.normal, axis=1)
            if np.abs(norms - 1.0).max() > 1e-4:
                raise ValueError("normals must be unit length within 1e-4")
        if self.label is not None and self.label.min(initial=0) < 0:
            raise ValueError("labels must be non-negative class ids")
        if np.unique(self.origin_index).size != n:
            raise ValueError("origin_index values must be unique within a view")
        return self

    def subset(self, index: np.ndarray) -> "PointCloud":
        """New cloud with the selected rows (all fields carried through)."""
        index = np.asarray(index)
        return PointCloud(
            coord=self.coord[index].copy(),
            color=None if self.color is None else self.color[index].copy(),
            normal=None if self.normal is None else self.normal[index].copy(),
            label=None if self.label is None else self.label[index].copy(),
            origin_coord=self.origin_coord[index].copy(),
            origin_index=self.origin_index[index].copy(),
        )

    def copy(self) -> "PointCloud":
        return self.subset(np.arange(self.n))


@dataclass
class PoolingMap:
    """Fine-to-coarse parent index array recorded by one grid pooling."""

    parent: np.ndarray  # (N_fine,) values in [0, N_coarse)
    counts: np.ndarray  # (N_coarse,) children per parent

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def n_fine(self) -> int:
        return self.parent.shape[0]

    @property
    def n_coarse(self) -> int:
        return self.counts.shape[0]

    def validate(self) -> "PoolingMap":
        if self.counts.min(initial=1) < 1:
            raise ValueError("every coarse index needs count >= 1")
        if self.counts.sum() != self.n_fine:
            raise ValueError("counts must sum to the number of fine points")
        got = np.bincount(self.parent, minlength=self.n_coarse)
        if got.shape[0] != self.n_coarse or not np.array_equal(got, self.counts):
            raise ValueError("parent values must cover [0, n_coarse) matching counts")
        return self


def compose_maps(first: PoolingMap, second: PoolingMap) -> PoolingMap:
    """Compose stage a->b with stage b->c into a->c."""
    if first.n_coarse != second.n_fine:
        raise ValueError(f"cannot compose maps: {first.n_coarse} != {second.n_fine}")
    parent = second.parent[first.parent]
    return PoolingMap(parent, np.bincount(parent, minlength=second.n_coarse))


@dataclass
class SpatialHash:
    """Uniform-grid hash from integer 3-cell keys to point index lists."""

    cell_size: float
    table: dict = field(default_factory=dict)

    def lookup(self, key: tuple) -> np.ndarray:
        return self.table.get(tuple(int(k) for k in key), np.empty(0, dtype=np.int64))


def build_hash(cloud: PointCloud, cell_size: float) -> SpatialHash:
    """Bucket every point of ``cloud`` by its floor-quantized cell."""
    if cell_size <= 0:
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    cells = voxel_cells(cloud.coord, cell_size)
    parent, counts = cell_inverse(cells)
    order = np.argsort(parent, kind="stable")
    bounds = np.append(0, np.cumsum(counts))
    table = {}
    for i in range(counts.shape[0]):
        idx = order[bounds[i]:bounds[i + 1]]
        cell = cells[idx[0]]
        table[(int(cell[0]), int(cell[1]), int(cell[2]))] = np.sort(idx)
    return SpatialHash(cell_size=cell_size, table=table)


def _segment_first_by(parent: np.ndarray, primary: np.ndarray, n_seg: int) -> np.ndarray:
    """Index of the row minimizing ``primary`` per segment (ties: lowest row)."""
    order = np.lexsort((np.arange(len(parent)), primary, parent))
    sorted_parent = parent[order]
    first = np.searchsorted(sorted_parent, np.arange(n_seg), side="left")
    return order[first]


def _majority_label(label: np.ndarray, parent: np.ndarray, n_seg: int) -> np.ndarray:
    """Per-segment majority vote; ties resolved toward the smallest class id."""
    classes, compact = np.unique(label, return_inverse=True)
    k = classes.shape[0]
    votes = np.zeros((n_seg, k), dtype=np.int64)
    np.add.at(votes, (parent, compact), 1)
    return classes[np.argmax(votes, axis=1)]


def grid_sample(cloud: PointCloud, grid_size: float) -> tuple[PointCloud, PoolingMap]:
    """Voxel-pool a cloud at ``grid_size``; returns the coarse cloud and parent map.

    Coarse coordinates are per-voxel means. Colors and normals are averaged
    (normals re-normalized; degenerate zero-sum normals fall back to +z).
    Labels use majority vote with smallest-id tie-break. Origin fields come
    from the member nearest the voxel mean. Output voxels are ordered
    lexicographically by integer cell key, which makes every downstream index
    map reproducible.
    """
    if grid_size <= 0:
        raise ValueError(f"grid_size must be positive, got {grid_size}")
    if cloud.n < 1:
        raise ValueError("cannot grid-sample an empty cloud")
    parent, counts = cell_inverse(voxel_cells(cloud.coord, grid_size))
    n_seg = counts.shape[0]
    inv = 1.0 / counts

    def seg_mean(arr):
        out = np.empty((n_seg, arr.shape[1]), dtype=np.float64)
        for c in range(arr.shape[1]):
            out[:, c] = np.bincount(parent, weights=arr[:, c], minlength=n_seg)
        return out * inv[:, None]

    mean_coord = seg_mean(cloud.coord)
    color = None
    if cloud.color is not None:
        color = np.clip(seg_mean(cloud.color), 0.0, 1.0).astype(cloud.color.dtype)
    normal = None
    if cloud.normal is not None:
        avg = seg_mean(cloud.normal)
        norms = np.linalg.norm(avg, axis=1)
        degenerate = norms < 1e-8
        if degenerate.any():
            log.debug("grid_sample: %d voxels with cancelled normals, using +z", int(degenerate.sum()))
            avg[degenerate] = (0.0, 0.0, 1.0)
            norms[degenerate] = 1.0
        normal = (avg / norms[:, None]).astype(cloud.normal.dtype)
    label = None
    if cloud.label is not None:
        label = _majority_label(cloud.label, parent, n_seg).astype(cloud.label.dtype)

    d2 = ((cloud.coord - mean_coord[parent]) ** 2).sum(axis=1)
    rep = _segment_first_by(parent, d2, n_seg)
    coarse = PointCloud(
        coord=mean_coord.astype(cloud.coord.dtype),
        color=color,
        normal=normal,
        label=label,
        origin_coord=cloud.origin_coord[rep].copy(),
        origin_index=cloud.origin_index[rep].copy(),
    )
    return coarse, PoolingMap(parent, counts)


def nearest_within(query: PointCloud, target: PointCloud, radius: float,
                   space: str = "current") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """For each query point, the single nearest target point within ``radius``.

    Returns (i, j, distance) arrays; query points with no target inside the
    radius are omitted. Ties resolve to the smallest target index. ``space``
    selects the coordinate set: "current" or "origin".
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if space not in ("current", "origin"):
        raise ValueError(f"space must be 'current' or 'origin', got {space!r}")
    q = query.coord if space == "current" else query.origin_coord
    t = target.coord if space == "current" else target.origin_coord
    q = np.asarray(q, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)

    # bucket targets by cells of edge = radius; candidates live in the 27
    # cells around each query point's cell
    q_cells = voxel_cells(q, radius)
    t_cells = voxel_cells(t, radius)
    pack = _shared_packer([q_cells, t_cells], margin=1)
    r2 = radius * radius
    cand_q, cand_t = [], []
    if pack is not None:
        t_keys = pack(t_cells)
        t_order = np.argsort(t_keys, kind="stable")
        t_sorted = t_keys[t_order]
        uniq, starts = np.unique(t_sorted, return_index=True)
        ends = np.append(starts[1:], len(t_sorted))
        for offset in np.ndindex(3, 3, 3):
            keys = pack(q_cells + (np.array(offset, dtype=np.int64) - 1))
            pos = np.searchsorted(uniq, keys)
            pos_clip = np.minimum(pos, max(len(uniq) - 1, 0))
            hit = uniq[pos_clip] == keys if len(uniq) else np.zeros(len(keys), dtype=bool)
            if not hit.any():
                continue
            qi = np.flatnonzero(hit)
            lo = starts[pos_clip[hit]]
            lens = ends[pos_clip[hit]] - lo
            total = int(lens.sum())
            flat = np.repeat(lo, lens) + (np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens))
            cand_q.append(np.repeat(qi, lens))
            cand_t.append(t_order[flat])
    else:
        # degenerate cell span (e.g. near-zero radius): exact dict-based path
        buckets: dict[tuple, list] = {}
        for idx, cell in enumerate(map(tuple, t_cells)):
            buckets.setdefault(cell, []).append(idx)
        for qi, cell in enumerate(map(tuple, q_cells)):
            for offset in np.ndindex(3, 3, 3):
                key = (cell[0] + offset[0] - 1, cell[1] + offset[1] - 1, cell[2] + offset[2] - 1)
                hits = buckets.get(key)
                if hits:
                    cand_q.append(np.full(len(hits), qi, dtype=np.int64))
                    cand_t.append(np.array(hits, dtype=np.int64))
    if not cand_q:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), np.empty(0, dtype=np.float64)
    ci = np.concatenate(cand_q)
    cj = np.concatenate(cand_t)
    d2 = ((q[ci] - t[cj]) ** 2).sum(axis=1)
    keep = d2 <= r2
    ci, cj, d2 = ci[keep], cj[keep], d2[keep]
    if ci.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), np.empty(0, dtype=np.float64)
    order = np.lexsort((cj, d2, ci))
    ci, cj, d2 = ci[order], cj[order], d2[order]
    _, first = np.unique(ci, return_index=True)
    return ci[first], cj[first], np.sqrt(d2[first])
