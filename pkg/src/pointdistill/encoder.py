"""Hierarchical grid-pooling point encoder with parameter-free feature up-casting.

Geometry and features are deliberately separated: point coordinates only ever
build pooling and neighborhood structure (voxel parent maps); the feature path
sees nothing but color and normal inputs. Masked points have their input
features replaced by a learned mask token before any aggregation, so their
appearance is fully occluded while their (jittered) coordinates still shape
the structure.

Stage s lives on a voxel grid of ``base_grid * grid_growth**s``. Every stage
runs ``depths[s]`` residual blocks of

    x -> LN(x) -> neighborhood mean (cells of neighbor_radius_factor * grid)
      -> two-layer MLP -> + LN(x)

and transitions between stages pool features by voxel mean and apply a linear
projection to the next width. The second MLP layer starts at zero, so a fresh
encoder is a pure multi-scale smoothing stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .cloud import PointCloud, PoolingMap, cell_inverse, grid_sample, voxel_cells

IN_DIM = 6  # color (3) + normal (3)


@dataclass(frozen=True)
class EncoderConfig:
    depths: tuple[int, ...] = (1, 1, 1, 2, 1)
    widths: tuple[int, ...] = (24, 48, 96, 192, 256)
    base_grid: float = 0.05
    grid_growth: float = 2.0
    neighbor_radius_factor: float = 2.5
    upcast_k: int = 2
    mlp_ratio: float = 2.0

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    def stage_grid(self, s: int) -> float:
        return self.base_grid * self.grid_growth ** s

    def upcast_channels(self, k: int) -> int:
        return int(sum(self.widths[self.n_stages - 1 - k:]))

    def validate(self) -> "EncoderConfig":
        if len(self.depths) != len(self.widths) or not 1 <= len(self.depths) <= 5:
            raise ValueError("depths and widths must have equal length in [1, 5]")
        if any(w2 <= w1 for w1, w2 in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must be strictly increasing")
        if not 0 <= self.upcast_k <= self.n_stages - 1:
            raise ValueError(f"upcast_k must be in [0, {self.n_stages - 1}]")
        if self.base_grid <= 0 or self.grid_growth < 1 or self.neighbor_radius_factor <= 0:
            raise ValueError("grid parameters must be positive (growth >= 1)")
        return self


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        dtype=np.float32) -> dict[str, ad.Tensor]:
    """Create all learnable encoder tensors keyed by hierarchical names."""
    cfg.validate()
    p: dict[str, ad.Tensor] = {}

    def linear(name, fan_in, fan_out, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        p[f"{name}.w"] = ad.parameter(w, dtype=dtype)
        p[f"{name}.b"] = ad.parameter(np.zeros(fan_out), dtype=dtype)

    linear("enc.embed", IN_DIM, cfg.widths[0])
    for s, (depth, width) in enumerate(zip(cfg.depths, cfg.widths)):
        hidden = max(1, int(round(width * cfg.mlp_ratio)))
        for d in range(depth):
            base = f"enc.stage{s}.block{d}"
            p[f"{base}.ln.gain"] = ad.parameter(np.ones(width), dtype=dtype)
            p[f"{base}.ln.bias"] = ad.parameter(np.zeros(width), dtype=dtype)
            linear(f"{base}.mlp1", width, hidden)
            linear(f"{base}.mlp2", hidden, width, zero=True)
        if s + 1 < cfg.n_stages:
            linear(f"enc.pool{s + 1}", width, cfg.widths[s + 1])
    p["enc.mask_token"] = ad.parameter(rng.standard_normal(IN_DIM) * 0.02, dtype=dtype)
    return p


def param_stage(name: str, n_stages: int) -> int:
    """Stage index for layer-wise lr decay; head-side params map to n_stages."""
    if name.startswith("enc.stage"):
        return int(name.split(".")[1][len("stage"):])
    if name.startswith("enc.pool"):
        return int(name.split(".")[1][len("pool"):])
    if name.startswith("enc.embed") or name == "enc.mask_token":
        return 0
    return n_stages


def param_uses_weight_decay(name: str, tensor: ad.Tensor) -> bool:
    """Decay only weight matrices (and prototypes); skip gains, biases, token."""
    return tensor.data.ndim >= 2


@dataclass
class ViewStructure:
    """Pure-geometry skeleton of one encoded view (no gradients involved)."""

    stage_clouds: list[PointCloud]
    pooling_maps: list[PoolingMap]          # stage s -> s+1
    input_map: PoolingMap                   # raw view -> stage 0
    neighbor_parents: list[np.ndarray]      # per stage: cell id per point
    neighbor_counts: list[np.ndarray]


def build_structure(view: PointCloud, cfg: EncoderConfig) -> ViewStructure:
    stage0, input_map = grid_sample(view, cfg.base_grid)
    clouds = [stage0]
    maps: list[PoolingMap] = []
    for s in range(1, cfg.n_stages):
        coarse, pm = grid_sample(clouds[-1], cfg.stage_grid(s))
        clouds.append(coarse)
        maps.append(pm)
    nparents, ncounts = [], []
    for s, cloud in enumerate(clouds):
        cell = cfg.neighbor_radius_factor * cfg.stage_grid(s)
        parent, counts = cell_inverse(voxel_cells(cloud.coord, cell))
        nparents.append(parent)
        ncounts.append(counts)
    return ViewStructure(clouds, maps, input_map, nparents, ncounts)


@dataclass
class EncoderBatch:
    """Batched encoding of several views on one tape.

    Per stage, features of all views are concatenated row-wise;
    ``stage_slices[s][v]`` recovers view ``v``. ``pool_parents[s]`` maps the
    batched rows of stage s to batched rows of stage s+1.
    """

    cfg: EncoderConfig
    stage_features: list[ad.Tensor]
    stage_slices: list[list[slice]]
    structures: list[ViewStructure]
    pool_parents: list[np.ndarray]

    @property
    def n_views(self) -> int:
        return len(self.structures)


@dataclass
class EncoderOutput:
    """Single-view encoding: per-stage features, clouds and pooling maps."""

    cfg: EncoderConfig
    stage_features: list[ad.Tensor]
    stage_clouds: list[PointCloud]
    pooling_maps: list[PoolingMap]
    input_map: PoolingMap


def _offsets(sizes: Sequence[int]) -> np.ndarray:
    return np.concatenate(([0], np.cumsum(sizes)))


def _input_features(view: PointCloud, mask: Optional[np.ndarray],
                    token: ad.Tensor, dtype) -> ad.Tensor:
    if view.color is None or view.normal is None:
        raise ValueError("encoder input views need both color and normal fields")
    feats = np.concatenate([view.color, view.normal], axis=1).astype(dtype)
    if mask is None:
        return ad.constant(feats)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] != view.n:
        raise ValueError(f"mask length {mask.shape[0]} != view size {view.n}")
    return ad.mask_rows(feats, mask, token)


def _block(x: ad.Tensor, params, base: str, parent: np.ndarray, counts: np.ndarray) -> ad.Tensor:
    h = ad.add(ad.mul(ad.layer_norm(x), params[f"{base}.ln.gain"]), params[f"{base}.ln.bias"])
    m = ad.gather(ad.segment_mean(h, parent, counts.shape[0], counts), parent)
    m = ad.gelu(ad.add(ad.matmul(m, params[f"{base}.mlp1.w"]), params[f"{base}.mlp1.b"]))
    m = ad.add(ad.matmul(m, params[f"{base}.mlp2.w"]), params[f"{base}.mlp2.b"])
    return ad.add(h, m)


def encode_views(items: list[tuple[PointCloud, Optional[np.ndarray]]],
                 params: dict[str, ad.Tensor], cfg: EncoderConfig) -> EncoderBatch:
    """Encode several views jointly (disjoint voxel id spaces, shared weights)."""
    cfg.validate()
    dtype = params["enc.embed.w"].dtype
    structures = [build_structure(view, cfg) for view, _ in items]

    feats = [_input_features(view, mask, params["enc.mask_token"], dtype)
             for view, mask in items]
    x = feats[0] if len(feats) == 1 else ad.concat(feats, axis=0)

    # batched input pooling: raw points -> stage-0 voxels
    s0_sizes = [st.stage_clouds[0].n for st in structures]
    stage_slices: list[list[slice]] = []
    off = _offsets(s0_sizes)
    stage_slices.append([slice(int(a), int(b)) for a, b in zip(off[:-1], off[1:])])
    in_parent = np.concatenate([st.input_map.parent + off[v] for v, st in enumerate(structures)])
    in_counts = np.concatenate([st.input_map.counts for st in structures])
    x = ad.segment_mean(x, in_parent, int(off[-1]), in_counts)
    x = ad.add(ad.matmul(x, params["enc.embed.w"]), params["enc.embed.b"])

    pool_parents: list[np.ndarray] = []
    stage_features: list[ad.Tensor] = []
    for s in range(cfg.n_stages):
        if s > 0:
            sizes = [st.stage_clouds[s].n for st in structures]
            off_next = _offsets(sizes)
            stage_slices.append([slice(int(a), int(b)) for a, b in zip(off_next[:-1], off_next[1:])])
            parent = np.concatenate([st.pooling_maps[s - 1].parent + off_next[v]
                                     for v, st in enumerate(structures)])
            counts = np.concatenate([st.pooling_maps[s - 1].counts for st in structures])
            pool_parents.append(parent)
            x = ad.segment_mean(x, parent, int(off_next[-1]), counts)
            x = ad.add(ad.matmul(x, params[f"enc.pool{s}.w"]), params[f"enc.pool{s}.b"])
            off = off_next
        ncounts = [st.neighbor_counts[s] for st in structures]
        cell_off = _offsets([c.shape[0] for c in ncounts])
        nb_parent = np.concatenate([st.neighbor_parents[s] + cell_off[v]
                                    for v, st in enumerate(structures)])
        nb_counts = np.concatenate(ncounts)
        for d in range(cfg.depths[s]):
            x = _block(x, params, f"enc.stage{s}.block{d}", nb_parent, nb_counts)
        stage_features.append(x)

    return EncoderBatch(cfg=cfg, stage_features=stage_features, stage_slices=stage_slices,
                        structures=structures, pool_parents=pool_parents)


def upcast_batch(batch: EncoderBatch, k: int) -> tuple[ad.Tensor, list[slice]]:
    """Replicate coarse features down k stages, concatenating along channels."""
    cfg = batch.cfg
    if not 0 <= k <= cfg.n_stages - 1:
        raise ValueError(f"upcast level must be in [0, {cfg.n_stages - 1}], got {k}")
    top = cfg.n_stages - 1
    f = batch.stage_features[top]
    for j in range(k):
        fine = top - 1 - j
        f = ad.concat([ad.gather(f, batch.pool_parents[fine]), batch.stage_features[fine]], axis=1)
    return f, batch.stage_slices[top - k]


def encode(view: PointCloud, mask: Optional[np.ndarray], params: dict[str, ad.Tensor],
           cfg: EncoderConfig) -> EncoderOutput:
    """Single-view encoding (the library-surface form of ``encode_views``)."""
    batch = encode_views([(view, mask)], params, cfg)
    st = batch.structures[0]
    return EncoderOutput(cfg=cfg, stage_features=batch.stage_features,
                         stage_clouds=st.stage_clouds, pooling_maps=st.pooling_maps,
                         input_map=st.input_map)


def upcast(out: EncoderOutput, k: int) -> tuple[ad.Tensor, PointCloud]:
    """Up-cast a single-view encoding; returns features and the matching cloud."""
    cfg = out.cfg
    if not 0 <= k <= cfg.n_stages - 1:
        raise ValueError(f"upcast level must be in [0, {cfg.n_stages - 1}], got {k}")
    top = cfg.n_stages - 1
    f = out.stage_features[top]
    for j in range(k):
        fine = top - 1 - j
        f = ad.concat([ad.gather(f, out.pooling_maps[fine].parent), out.stage_features[fine]], axis=1)
    return f, out.stage_clouds[top - k]


def upcast_full(out: EncoderOutput) -> tuple[ad.Tensor, PointCloud]:
    """Features replicated all the way back to stage-0 resolution (probing)."""
    return upcast(out, out.cfg.n_stages - 1)


def count_params(params: dict[str, ad.Tensor]) -> int:
    return int(sum(t.data.size for t in params.values()))


def params_checksum(params: dict[str, ad.Tensor]) -> str:
    """Order-independent digest of all parameter bytes (frozenness checks)."""
    import hashlib
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
