"""Point self-distillation objective.

A student encoder embeds the hard views (4 local crops + 2 masked globals),
an EMA teacher embeds the 2 unmasked global views. Both are up-cast ``k``
stages, projected by a bottleneck head onto unit-norm prototypes, and points
matched by original coordinates are aligned with a temperature-sharpened
cross-entropy. Teacher assignments are balanced by Sinkhorn-Knopp iteration
(uniform prototype marginal) to block cluster collapse; a nearest-neighbor
spreading term (KoLeo) regularizes student features.

Loss pairing: each local view aligns with the principal global view, each
masked view with both global views — 8 pairs, evenly weighted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ShapeError, Tensor
from .cloud import nearest_within
from .encoder import EncoderConfig, encode_views, init_encoder_params, upcast_batch
from .views import ViewSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 256
    bottleneck_dim: int = 64
    n_prototypes: int = 256
    student_temp: float = 0.1

    def validate(self) -> "HeadConfig":
        if self.n_prototypes < 2:
            raise ValueError("need at least 2 prototypes")
        if self.student_temp <= 0:
            raise ValueError("student_temp must be positive")
        return self


@dataclass(frozen=True)
class LossConfig:
    koleo_weight: float = 0.1
    match_radius: Optional[float] = None   # None: the grid size of the distillation stage
    max_pairs_per_item: int = 256          # cap on matched pairs per (scene, pair)
    koleo_max_points: int = 256            # cap on rows entering the KoLeo term
    sinkhorn_iters: int = 3
    centering: str = "sinkhorn"            # "sinkhorn" | "softmax" (plain sharpening)


PAIR_NAMES = ("local0-g0", "local1-g0", "local2-g0", "local3-g0",
              "masked0-g0", "masked0-g1", "masked1-g0", "masked1-g1")


@dataclass(frozen=True)
class PairSpec:
    """The 8 evenly weighted (student view, teacher view) alignment pairs."""

    entries: tuple = (
        ("local", 0, 0), ("local", 1, 0), ("local", 2, 0), ("local", 3, 0),
        ("masked", 0, 0), ("masked", 0, 1), ("masked", 1, 0), ("masked", 1, 1),
    )
    weight: float = 1.0 / 8.0

    def validate(self) -> "PairSpec":
        if len(self.entries) != 8 or abs(self.weight * len(self.entries) - 1.0) > 1e-12:
            raise ValueError("pair spec must hold 8 entries with weights summing to 1")
        return self


@dataclass
class DistillState:
    """Student/teacher parameter sets and the step counter."""

    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    step: int = 0

    def assert_teacher_detached(self):
        for name, t in self.teacher.items():
            if t.requires_grad or t.grad is not None:
                raise AssertionError(f"teacher parameter {name} acquired a gradient")


def init_head_params(in_dim: int, cfg: HeadConfig, rng: np.random.Generator,
                     dtype=np.float32) -> dict[str, Tensor]:
    cfg.validate()
    p = {
        "head.mlp1.w": ad.parameter(rng.standard_normal((in_dim, cfg.hidden_dim)) / np.sqrt(in_dim), dtype=dtype),
        "head.mlp1.b": ad.parameter(np.zeros(cfg.hidden_dim), dtype=dtype),
        "head.mlp2.w": ad.parameter(rng.standard_normal((cfg.hidden_dim, cfg.bottleneck_dim)) / np.sqrt(cfg.hidden_dim), dtype=dtype),
        "head.mlp2.b": ad.parameter(np.zeros(cfg.bottleneck_dim), dtype=dtype),
        "head.prototypes": ad.parameter(rng.standard_normal((cfg.n_prototypes, cfg.bottleneck_dim)), dtype=dtype),
    }
    return p


def init_distill_state(enc_cfg: EncoderConfig, head_cfg: HeadConfig, seed: int,
                       dtype=np.float32) -> DistillState:
    """Fresh student; teacher starts as an exact copy with gradients disabled."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x51)))
    student = init_encoder_params(enc_cfg, rng, dtype=dtype)
    student.update(init_head_params(enc_cfg.upcast_channels(enc_cfg.upcast_k), head_cfg, rng, dtype=dtype))
    teacher = {name: ad.Tensor(t.data.copy(), requires_grad=False) for name, t in student.items()}
    return DistillState(student=student, teacher=teacher)


def head_forward(features: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Bottleneck MLP onto the unit sphere, cosine logits against prototypes."""
    w1 = params["head.mlp1.w"]
    if features.shape[1] != w1.shape[0]:
        raise ShapeError(f"head_forward: feature dim {features.shape[1]} != {w1.shape[0]}")
    z = ad.gelu(ad.add(ad.matmul(features, w1), params["head.mlp1.b"]))
    z = ad.add(ad.matmul(z, params["head.mlp2.w"]), params["head.mlp2.b"])
    z = ad.l2_normalize(z, axis=1)
    protos = ad.l2_normalize(params["head.prototypes"], axis=1)
    return ad.matmul(z, protos, transpose_b=True)


def sinkhorn_center(teacher_logits, n_iter: int = 3, tpt: float = 0.04) -> np.ndarray:
    """Balance exp(logits / tpt) toward a uniform prototype marginal.

    Alternates column normalization (each prototype holds total mass 1/K) and
    row normalization; a final row normalization makes every row a
    distribution. Runs in float64 regardless of input dtype.
    """
    logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"sinkhorn_center expects a (B, K) matrix, got {logits.shape}")
    if not np.isfinite(logits).all():
        raise NumericError("sinkhorn_center: non-finite teacher logits")
    b, k = logits.shape
    # a global shift only rescales Q, which the first column normalization absorbs
    q = np.exp((logits.astype(np.float64) - logits.max()) / tpt)
    tiny = np.finfo(np.float64).tiny
    for _ in range(n_iter):
        q /= np.maximum(q.sum(axis=0, keepdims=True), tiny) * k
        q /= np.maximum(q.sum(axis=1, keepdims=True), tiny) * b
    q /= np.maximum(q.sum(axis=1, keepdims=True), tiny)
    return q


def distill_loss(student_logits: Tensor, teacher_assign: np.ndarray, tps: float) -> Tensor:
    """Mean cross-entropy between teacher rows and tps-sharpened student rows."""
    if student_logits.shape != tuple(np.shape(teacher_assign)):
        raise ShapeError(f"distill_loss: {student_logits.shape} vs {np.shape(teacher_assign)}")
    n = student_logits.shape[0]
    logp = ad.log(ad.softmax(ad.smul(student_logits, 1.0 / tps), axis=1))
    target = np.asarray(teacher_assign, dtype=student_logits.dtype)
    return ad.smul(ad.sum_(ad.mul(logp, ad.constant(target))), -1.0 / n)


def koleo(features: Tensor, eps: float = 1e-8) -> Tensor:
    """Nearest-neighbor differential-entropy spread estimator.

    On l2-normalized rows f_i returns -(1/N) sum_i log(min_{j != i}
    ||f_i - f_j|| + eps); larger is more clumped, minimizing spreads features
    over the sphere.
    """
    n = features.shape[0]
    if n < 2:
        raise ValueError("koleo needs at least 2 rows")
    f = ad.l2_normalize(features, axis=1)
    gram = ad.matmul(f, f, transpose_b=True)
    d2 = ad.relu(ad.sadd(ad.smul(gram, -2.0), 2.0))       # ||fi-fj||^2 on the sphere
    d2 = ad.add(d2, ad.constant(np.eye(n, dtype=features.dtype) * 8.0))  # exclude self (max d2 is 4)
    dmin = ad.sqrt(ad.amin(d2, axis=1))
    return ad.smul(ad.sum_(ad.log(ad.sadd(dmin, eps))), -1.0 / n)


def ema_update(state: DistillState, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, prototypes included."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    if m == 1.0:
        return  # exact fixed point, keep teacher bit-identical
    for name, t in state.teacher.items():
        t.data = t.data * m + state.student[name].data * (1.0 - m)


def _subsample(n: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cap, replace=False))


def step_loss(viewsets, state: DistillState, schedule_values: dict,
              enc_cfg: EncoderConfig, head_cfg: HeadConfig,
              loss_cfg: LossConfig = LossConfig(), step_seed: int = 0):
    """Full self-distillation loss over a batch of ViewSets.

    ``schedule_values`` must provide ``teacher_temp``. Returns the scalar loss
    tensor and a breakdown dict with per-pair means, the KoLeo term and match
    counts. The teacher path never records gradients.
    """
    if isinstance(viewsets, ViewSet):
        viewsets = [viewsets]
    tpt = float(schedule_values["teacher_temp"])
    tps = head_cfg.student_temp
    n_scenes = len(viewsets)
    k = enc_cfg.upcast_k
    level = enc_cfg.n_stages - 1 - k
    radius = loss_cfg.match_radius if loss_cfg.match_radius else enc_cfg.stage_grid(level)
    pair_spec = PairSpec().validate()
    rng = np.random.default_rng(np.random.SeedSequence((step_seed, 0x3A7)))

    student_items, teacher_items = [], []
    s_pos, t_pos = {}, {}
    for sc, vs in enumerate(viewsets):
        for i, v in enumerate(vs.local_views):
            s_pos[(sc, "local", i)] = len(student_items)
            student_items.append((v, None))
        for i, (mv, mask) in enumerate(vs.masked_views):
            s_pos[(sc, "masked", i)] = len(student_items)
            student_items.append((mv, mask))
        for i, v in enumerate(vs.global_views):
            t_pos[(sc, "global", i)] = len(teacher_items)
            teacher_items.append((v, None))

    s_batch = encode_views(student_items, state.student, enc_cfg)
    t_batch = encode_views(teacher_items, state.teacher, enc_cfg)
    s_feat, s_slices = upcast_batch(s_batch, k)
    t_feat, t_slices = upcast_batch(t_batch, k)

    t_logits = head_forward(t_feat, state.teacher).data
    centered = {}
    for key, pos in t_pos.items():
        rows = t_logits[t_slices[pos]]
        if loss_cfg.centering == "sinkhorn":
            centered[key] = sinkhorn_center(rows, loss_cfg.sinkhorn_iters, tpt)
        else:
            z = rows.astype(np.float64) / tpt
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            centered[key] = e / e.sum(axis=1, keepdims=True)

    # match each pair at the distillation stage, in origin coordinates
    matches = []      # (pair_index, scene, student rows, teacher assignment rows)
    sel_rows = []
    zero_match_pairs = 0
    for sc, vs in enumerate(viewsets):
        for p, (kind, idx, tgt) in enumerate(pair_spec.entries):
            spos = s_pos[(sc, kind, idx)]
            tpos = t_pos[(sc, "global", tgt)]
            s_cloud = s_batch.structures[spos].stage_clouds[level]
            t_cloud = t_batch.structures[tpos].stage_clouds[level]
            mi, mj, _ = nearest_within(s_cloud, t_cloud, radius, space="origin")
            if mi.size == 0:
                zero_match_pairs += 1
                log.debug("zero matches for pair %s in scene %d", PAIR_NAMES[p], sc)
                matches.append((p, sc, None, None))
                continue
            take = _subsample(mi.size, loss_cfg.max_pairs_per_item, rng)
            mi, mj = mi[take], mj[take]
            start = sum(r.size for r in sel_rows)
            sel_rows.append(mi + s_slices[spos].start)
            matches.append((p, sc, slice(start, start + mi.size),
                            centered[(sc, "global", tgt)][mj]))

    loss_terms = []
    pair_sums = np.zeros(len(pair_spec.entries))
    pair_counts = np.zeros(len(pair_spec.entries), dtype=np.int64)
    if sel_rows:
        all_rows = np.concatenate(sel_rows)
        s_logits = head_forward(ad.gather(s_feat, all_rows), state.student)
        for p, sc, rows, target in matches:
            if target is None:
                continue
            seg = ad.gather(s_logits, np.arange(rows.start, rows.stop))
            term = distill_loss(seg, target, tps)
            loss_terms.append(ad.smul(term, pair_spec.weight / n_scenes))
            pair_sums[p] += float(term.data)
            pair_counts[p] += 1

    koleo_terms = []
    koleo_value = 0.0
    if loss_cfg.koleo_weight > 0:
        for sl in s_slices:
            rows = np.arange(sl.start, sl.stop)[_subsample(sl.stop - sl.start,
                                                           loss_cfg.koleo_max_points, rng)]
            if rows.size < 2:
                continue
            koleo_terms.append(koleo(ad.gather(s_feat, rows)))
        if koleo_terms:
            koleo_value = float(np.mean([float(t.data) for t in koleo_terms]))

    total = None
    for term in loss_terms:
        total = term if total is None else ad.add(total, term)
    if koleo_terms:
        kt = None
        for term in koleo_terms:
            kt = term if kt is None else ad.add(kt, term)
        kt = ad.smul(kt, loss_cfg.koleo_weight / len(koleo_terms))
        total = kt if total is None else ad.add(total, kt)
    if total is None:
        total = ad.constant(np.zeros((), dtype=s_feat.dtype))

    breakdown = {
        "pair_losses": [float(pair_sums[p] / pair_counts[p]) if pair_counts[p] else 0.0
                        for p in range(len(pair_spec.entries))],
        "pair_names": list(PAIR_NAMES),
        "koleo": koleo_value,
        "n_matches": int(sum(r.size for r in sel_rows)),
        "zero_match_pairs": zero_match_pairs,
    }
    return total, breakdown
