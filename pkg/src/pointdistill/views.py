"""Multi-view pretext-task generation: crops, augmentation, grid-patch masking.

One scene yields 2 global crops (40-100% of points), 4 local crops (5-40%)
and 2 masked copies of the globals. Photometric augmentation is drawn once
and shared by the global views; spatial augmentation is independent per
view; local views draw everything independently. Crop centers of all
non-principal views are sampled from the principal (first global) view's
members, so every view overlaps the principal one in origin space.

Masked views keep their geometry but masked points get an extra coordinate
jitter; their input features are replaced by the encoder's mask token
downstream (coordinates cannot be masked, only disturbed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cloud import PointCloud, cell_inverse, nearest_within, voxel_cells

CROP_POINT_CAP = 65536  # crop ratios apply to min(N, this)


@dataclass(frozen=True)
class ViewConfig:
    """Ranges for crop ratios and augmentation strengths."""

    n_global: int = 2
    n_local: int = 4
    global_ratio: tuple[float, float] = (0.4, 1.0)
    local_ratio: tuple[float, float] = (0.05, 0.4)
    scale_range: tuple[float, float] = (0.9, 1.1)
    coord_jitter_sigma: float = 0.005
    brightness: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.2)


@dataclass(frozen=True)
class MaskParams:
    """Grid-patch masking parameters (scheduled during training)."""

    mask_size: float = 0.1
    mask_ratio: float = 0.3
    masked_jitter_sigma: float = 0.01

    def validate(self) -> "MaskParams":
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.mask_size <= 0:
            raise ValueError(f"mask_size must be positive, got {self.mask_size}")
        if self.masked_jitter_sigma < 0:
            raise ValueError("masked_jitter_sigma must be >= 0")
        return self


@dataclass
class AugmentParams:
    """Record of the augmentation applied to one view."""

    rotation_z: float = 0.0
    flip_x: bool = False
    flip_y: bool = False
    scale: float = 1.0
    coord_jitter_sigma: float = 0.0
    color_brightness: Optional[np.ndarray] = None  # (3,) per-channel offsets
    color_contrast: Optional[np.ndarray] = None    # (3,) per-channel factors
    photometric_seed: int = 0
    spatial_seed: int = 0
    crop_ratio: float = 1.0
    crop_center_origin: Optional[np.ndarray] = None


@dataclass
class ViewSet:
    """The 2 global + 4 local + 2 masked views of one scene."""

    global_views: list[PointCloud]
    local_views: list[PointCloud]
    masked_views: list[tuple[PointCloud, np.ndarray]]
    provenance: dict = field(default_factory=dict)

    def validate(self, center_radius: float = 1e-5) -> "ViewSet":
        if len(self.global_views) != 2 or len(self.local_views) != 4 or len(self.masked_views) != 2:
            raise ValueError("a ViewSet holds exactly 2 global, 4 local and 2 masked views")
        principal = self.global_views[0]
        for i, (mview, mask) in enumerate(self.masked_views):
            src = self.global_views[i]
            if mview.n != src.n or not np.array_equal(mview.origin_index, src.origin_index):
                raise ValueError(f"masked view {i} must mirror global view {i}")
            frac = float(mask.mean())
            if not 0.0 < frac < 1.0:
                raise ValueError(f"masked fraction must be in (0, 1), got {frac}")
        for params in self.provenance.get("centers", []):
            d = np.linalg.norm(principal.origin_coord - params, axis=1).min()
            if d > center_radius:
                raise ValueError("crop center outside the principal view")
        return self


def crop(cloud: PointCloud, ratio: float, center_index: int) -> PointCloud:
    """kNN crop: the ceil(ratio * min(N, 2^16)) points nearest to a center point.

    Distances are measured in current coordinates; ties at the boundary break
    toward the lower point index. Origin fields are carried through.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"crop ratio must be in (0, 1], got {ratio}")
    n = cloud.n
    if not 0 <= center_index < n:
        raise ValueError(f"center_index {center_index} out of range for {n} points")
    k = min(n, math.ceil(ratio * min(n, CROP_POINT_CAP)))
    d = ((cloud.coord - cloud.coord[center_index]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(n), d))
    chosen = np.sort(order[:k])
    return cloud.subset(chosen)


def patch_mask(view: PointCloud, params: MaskParams, rng: np.random.Generator) -> np.ndarray:
    """Select whole voxel patches in random order until the mask ratio is crossed."""
    params.validate()
    parent, counts = cell_inverse(voxel_cells(view.coord, params.mask_size))
    order = rng.permutation(counts.shape[0])
    covered = np.cumsum(counts[order]) / view.n
    # stop at the first cell that reaches the ratio (overshoot allowed)
    take = int(np.searchsorted(covered, params.mask_ratio) + 1)
    selected = np.zeros(counts.shape[0], dtype=bool)
    selected[order[:take]] = True
    return selected[parent]


def _spatial_augment(cloud: PointCloud, params: AugmentParams,
                     rng: np.random.Generator) -> PointCloud:
    """Rotate about z, flip, scale about the crop centroid, jitter coordinates."""
    out = cloud.copy()
    flip = np.diag([-1.0 if params.flip_x else 1.0, -1.0 if params.flip_y else 1.0, 1.0])
    c, s = math.cos(params.rotation_z), math.sin(params.rotation_z)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    m = rot @ flip
    center = out.coord.mean(axis=0)
    coord = (out.coord - center) @ m.T * params.scale + center
    if params.coord_jitter_sigma > 0:
        coord = coord + rng.normal(0.0, params.coord_jitter_sigma, coord.shape)
    out.coord = coord.astype(cloud.coord.dtype)
    if out.normal is not None:
        out.normal = (out.normal @ m.T).astype(out.normal.dtype)
    return out


def _photometric_augment(cloud: PointCloud, params: AugmentParams) -> PointCloud:
    if cloud.color is None:
        return cloud
    shifted = 0.5 + (cloud.color - 0.5) * params.color_contrast + params.color_brightness
    cloud.color = np.clip(shifted, 0.0, 1.0).astype(cloud.color.dtype)
    return cloud


def _draw_photometric(cfg: ViewConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    brightness = rng.uniform(-cfg.brightness, cfg.brightness, 3)
    contrast = rng.uniform(cfg.contrast_range[0], cfg.contrast_range[1], 3)
    return brightness, contrast


def _draw_spatial(cfg: ViewConfig, seed: int) -> AugmentParams:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return AugmentParams(
        rotation_z=float(rng.uniform(0.0, 2.0 * math.pi)),
        flip_x=bool(rng.random() < 0.5),
        flip_y=bool(rng.random() < 0.5),
        scale=float(rng.uniform(cfg.scale_range[0], cfg.scale_range[1])),
        coord_jitter_sigma=cfg.coord_jitter_sigma,
        spatial_seed=seed,
    )


def generate_views(scene: PointCloud, cfg: ViewConfig, mask_params: MaskParams,
                   rng_seed: int) -> ViewSet:
    """Build the full ViewSet of one scene, fully determined by ``rng_seed``."""
    if scene.n < 1000:
        raise ValueError(f"scene must have at least 1000 points, got {scene.n}")
    mask_params.validate()
    root = np.random.default_rng(np.random.SeedSequence(rng_seed))
    n_views = cfg.n_global + cfg.n_local

    # one block of child seeds per purpose, drawn in a fixed documented order:
    # crops, shared global photometric, local photometrics, spatials, masking
    crop_rng = np.random.default_rng(np.random.SeedSequence(int(root.integers(2 ** 63))))
    photo_global_seed = int(root.integers(2 ** 63))
    photo_local_seeds = [int(root.integers(2 ** 63)) for _ in range(cfg.n_local)]
    spatial_seeds = [int(root.integers(2 ** 63)) for _ in range(n_views)]
    mask_seeds = [int(root.integers(2 ** 63)) for _ in range(cfg.n_global)]
    mask_jitter_seeds = [int(root.integers(2 ** 63)) for _ in range(cfg.n_global)]

    # principal view first; all other crop centers are principal members
    ratios_g = crop_rng.uniform(cfg.global_ratio[0], cfg.global_ratio[1], cfg.n_global)
    ratios_l = crop_rng.uniform(cfg.local_ratio[0], cfg.local_ratio[1], cfg.n_local)
    center0 = int(crop_rng.integers(scene.n))
    principal = crop(scene, float(ratios_g[0]), center0)
    member_indices = principal.origin_index
    other_centers = crop_rng.choice(member_indices, size=cfg.n_global - 1 + cfg.n_local,
                                    replace=True)

    crops = [principal]
    centers_origin = []
    for g in range(1, cfg.n_global):
        crops.append(crop(scene, float(ratios_g[g]), int(other_centers[g - 1])))
        centers_origin.append(scene.origin_coord[int(other_centers[g - 1])].copy())
    for l in range(cfg.n_local):
        idx = int(other_centers[cfg.n_global - 1 + l])
        crops.append(crop(scene, float(ratios_l[l]), idx))
        centers_origin.append(scene.origin_coord[idx].copy())

    gb, gc = _draw_photometric(cfg, photo_global_seed)
    provenance_params = []
    views = []
    for v, base in enumerate(crops):
        params = _draw_spatial(cfg, spatial_seeds[v])
        if v < cfg.n_global:
            params.color_brightness, params.color_contrast = gb, gc
            params.photometric_seed = photo_global_seed
            params.crop_ratio = float(ratios_g[v])
        else:
            seed = photo_local_seeds[v - cfg.n_global]
            params.color_brightness, params.color_contrast = _draw_photometric(cfg, seed)
            params.photometric_seed = seed
            params.crop_ratio = float(ratios_l[v - cfg.n_global])
        spatial_rng = np.random.default_rng(np.random.SeedSequence(params.spatial_seed + 1))
        view = _photometric_augment(_spatial_augment(base, params, spatial_rng), params)
        views.append(view)
        provenance_params.append(params)

    global_views = views[:cfg.n_global]
    local_views = views[cfg.n_global:]

    masked_views = []
    for g in range(cfg.n_global):
        src = global_views[g]
        mask = patch_mask(src, mask_params, np.random.default_rng(np.random.SeedSequence(mask_seeds[g])))
        mcloud = src.copy()
        jrng = np.random.default_rng(np.random.SeedSequence(mask_jitter_seeds[g]))
        jitter = jrng.normal(0.0, mask_params.masked_jitter_sigma, (int(mask.sum()), 3))
        mcloud.coord = mcloud.coord.copy()
        mcloud.coord[mask] += jitter.astype(mcloud.coord.dtype)
        masked_views.append((mcloud, mask))

    return ViewSet(
        global_views=global_views,
        local_views=local_views,
        masked_views=masked_views,
        provenance={"params": provenance_params, "centers": centers_origin,
                    "mask_params": mask_params, "seed": rng_seed},
    )


def match_pairs(view_a: PointCloud, view_b: PointCloud, radius: float):
    """Pairs of (index-in-a, index-in-b, distance) nearest in origin space."""
    return nearest_within(view_a, view_b, radius, space="origin")
