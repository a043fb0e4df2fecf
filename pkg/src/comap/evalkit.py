"""Evaluation: isosurface extraction from trained fields, geometric and
semantic surface metrics, and open-vocabulary instance retrieval."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError
from .field import InstanceField, field_eval
from .percept import InstanceRecord

log = logging.getLogger(__name__)


@dataclass
class SurfaceCloud:
    points: np.ndarray             # (n, 3)
    instance_ids: np.ndarray       # (n,) global ids
    class_ids: np.ndarray          # (n,)
    source: str = "reconstruction"

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, source: str = "reconstruction") -> "SurfaceCloud":
        return cls(points=np.zeros((0, 3)), instance_ids=np.zeros(0, dtype=np.int64),
                   class_ids=np.zeros(0, dtype=np.int64), source=source)

    @classmethod
    def concat(cls, clouds: list["SurfaceCloud"], source: str) -> "SurfaceCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls.empty(source)
        return cls(points=np.vstack([c.points for c in clouds]),
                   instance_ids=np.concatenate([c.instance_ids for c in clouds]),
                   class_ids=np.concatenate([c.class_ids for c in clouds]),
                   source=source)


def classify_features(f_clip: np.ndarray, f_caption: np.ndarray,
                      class_features: dict[int, tuple[np.ndarray, np.ndarray]]) -> int:
    """Zero-shot class assignment: argmax combined cosine against class features."""
    best, best_score = -1, -np.inf
    for cid in sorted(class_features):
        clip, caption = class_features[cid]
        score = 0.5 * (float(f_clip @ clip) + float(f_caption @ caption))
        if score > best_score:
            best, best_score = cid, score
    return best


def extract_surface(
    fields: dict[int, InstanceField],
    resolution: int,
    class_of_gid: dict[int, int] | None = None,
) -> tuple[SurfaceCloud, list[int]]:
    """Marching-cubes isosurface (sigma = 0.5) of every field, tagged with ids.

    Returns the combined cloud and the list of degenerate global ids (fields
    whose sigma grid never crosses the level).
    """
    from skimage import measure

    if resolution < 16:
        raise ContractError("surface grid must be at least 16^3 per instance")
    parts: list[SurfaceCloud] = []
    degenerate: list[int] = []
    for gid in sorted(fields):
        field_ = fields[gid]
        lo, hi = field_.aabb
        axes = [np.linspace(lo[a], hi[a], resolution) for a in range(3)]
        xs, ys, zs = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
        sigma, _ = field_eval(field_, pts)
        vol = sigma.reshape(resolution, resolution, resolution)
        if vol.min() >= 0.5 or vol.max() <= 0.5:
            degenerate.append(gid)
            log.warning("field %d produced no 0.5 crossing; flagged degenerate", gid)
            continue
        spacing = tuple((hi - lo) / (resolution - 1))
        verts, _, _, _ = measure.marching_cubes(vol, level=0.5, spacing=spacing)
        verts = verts + lo
        cls = (class_of_gid or {}).get(gid, 0)
        parts.append(SurfaceCloud(
            points=verts,
            instance_ids=np.full(len(verts), gid, dtype=np.int64),
            class_ids=np.full(len(verts), cls, dtype=np.int64)))
    return SurfaceCloud.concat(parts, "reconstruction"), degenerate


# --- geometric metrics --------------------------------------------------------

@dataclass
class GeometricMetrics:
    accuracy_cm: float
    completion_cm: float
    completion_ratio_pct: float

    def as_dict(self) -> dict:
        return {"accuracy_cm": self.accuracy_cm, "completion_cm": self.completion_cm,
                "completion_ratio_pct": self.completion_ratio_pct}


def geometric_metrics(recon: SurfaceCloud, gt: SurfaceCloud,
                      threshold: float = 0.05) -> GeometricMetrics:
    """Accuracy (recon->gt), completion (gt->recon) in cm, and the percentage
    of gt points with a reconstructed point within threshold meters."""
    if len(gt) == 0:
        raise ContractError("ground-truth cloud is empty")
    if len(recon) == 0:
        return GeometricMetrics(accuracy_cm=float("nan"),
                                completion_cm=float("inf"),
                                completion_ratio_pct=0.0)
    d_rg = cKDTree(gt.points).query(recon.points)[0]
    d_gr = cKDTree(recon.points).query(gt.points)[0]
    return GeometricMetrics(
        accuracy_cm=float(d_rg.mean()) * 100.0,
        completion_cm=float(d_gr.mean()) * 100.0,
        completion_ratio_pct=float((d_gr <= threshold).mean()) * 100.0)


# --- semantic metrics -----------------------------------------------------------

@dataclass
class SemanticMetrics:
    f_miou: float
    f_macc: float

    def as_dict(self) -> dict:
        return {"f_miou": self.f_miou, "f_macc": self.f_macc}


def semantic_metrics(recon: SurfaceCloud, gt: SurfaceCloud,
                     threshold: float = 0.05) -> SemanticMetrics:
    """Frequency-weighted IoU and per-class accuracy over matched labels.

    Each gt point takes the class of its nearest reconstructed point within
    the threshold; unmatched gt points count against their class.
    """
    if len(gt) == 0:
        raise ContractError("ground-truth cloud is empty")
    if len(recon) == 0:
        return SemanticMetrics(0.0, 0.0)
    dist, idx = cKDTree(recon.points).query(gt.points)
    matched = dist <= threshold
    pred = np.where(matched, recon.class_ids[idx], -1)

    classes = np.unique(gt.class_ids)
    total = len(gt)
    f_miou = 0.0
    f_macc = 0.0
    for cls in classes:
        sel = gt.class_ids == cls
        tp = int(np.count_nonzero(sel & (pred == cls)))
        fn = int(np.count_nonzero(sel & (pred != cls)))
        fp = int(np.count_nonzero(~sel & (pred == cls)))
        weight = sel.sum() / total
        iou = tp / (tp + fp + fn) if (tp + fp + fn) else 0.0
        acc = tp / (tp + fn) if (tp + fn) else 0.0
        f_miou += weight * iou
        f_macc += weight * acc
    return SemanticMetrics(f_miou=100.0 * f_miou, f_macc=100.0 * f_macc)


# --- retrieval --------------------------------------------------------------------

@dataclass
class RetrievalHit:
    global_id: int
    score: float


def retrieve(query: tuple[np.ndarray, np.ndarray], records: list[InstanceRecord],
             weights: tuple[float, float] = (0.5, 0.5)) -> list[RetrievalHit]:
    """Rank instances by weighted cosine against the query feature pair.

    Records sharing a global id count once (lowest agent id wins); ties break
    toward the lower global id.
    """
    if not records:
        raise ContractError("retrieve needs at least one record")
    w1, w2 = weights
    if abs(w1 + w2 - 1.0) > 1e-9:
        raise ContractError("retrieval weights must sum to 1")
    q_clip, q_caption = query

    by_gid: dict[int, InstanceRecord] = {}
    for rec in sorted(records, key=lambda r: (r.global_id, r.agent_id)):
        if rec.global_id is None:
            continue
        by_gid.setdefault(rec.global_id, rec)
    if not by_gid:
        raise ContractError("no records carry a global id")

    hits = []
    for gid, rec in sorted(by_gid.items()):
        score = w1 * float(q_clip @ rec.f_clip) + w2 * float(q_caption @ rec.f_caption)
        hits.append(RetrievalHit(global_id=gid, score=score))
    hits.sort(key=lambda h: (-h.score, h.global_id))
    return hits
