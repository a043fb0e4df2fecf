"""Segmentation corruption injection: semantic errors, over-segmentation,
under-segmentation and viewpoint loss, with a verifiable injection log.

All four transforms preserve the set of nonzero mask pixels; only ids and
codebook features change. Victims for semantic and merge errors are sampled
among (instance, agent) pairs that do not hold the top view confidence for
the instance, the regime the confidence-based repair is built for.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .align import backproject, frame_confidence, instance_confidence
from .errors import ConfigError, ContractError
from .percept import Codebook
from .scene import FrameBundle, Scene


@dataclass(frozen=True)
class CorruptionSpec:
    semantic_error_rate: float = 0.0
    overseg_rate: float = 0.0
    underseg_rate: float = 0.0
    viewpoint_loss_rate: float = 0.0
    rng_seed: int = 0
    feature_noise_deg: float = 2.0
    overseg_feature_angle_deg: float = 15.0
    border_band: float = 0.1
    underseg_max_gap: float = 0.5      # max AABB gap (m) for "adjacent" pairs
    min_part_pixels: int = 5

    def __post_init__(self):
        for name in ("semantic_error_rate", "overseg_rate", "underseg_rate",
                     "viewpoint_loss_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")


@dataclass
class InjectedError:
    kind: str                       # semantic | overseg | underseg | viewpoint
    agent_id: int
    gt_instances: tuple[int, ...]
    corrupted_ids: tuple[int, ...]
    detail: dict = field(default_factory=dict)


@dataclass
class CorruptionLog:
    errors: list[InjectedError] = field(default_factory=list)
    # (agent, corrupted id) -> gt instance ids covered by that id
    id_map: dict[tuple[int, int], tuple[int, ...]] = field(default_factory=dict)
    # (agent, corrupted id) -> class id whose features were stored (None = garbage)
    feature_class: dict[tuple[int, int], int | None] = field(default_factory=dict)

    def gt_of(self, agent_id: int, corrupted_id: int) -> tuple[int, ...]:
        return self.id_map[(agent_id, corrupted_id)]

    def errors_of_kind(self, kind: str) -> list[InjectedError]:
        return [e for e in self.errors if e.kind == kind]


def perturb_unit(f: np.ndarray, angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate a unit vector by a fixed angle in a random tangent direction."""
    if angle_deg == 0.0:
        return f.copy()
    u = _random_tangent(f, rng)
    a = np.radians(angle_deg)
    return np.cos(a) * f + np.sin(a) * u


def rotate_in_plane(f: np.ndarray, u: np.ndarray, angle_deg: float) -> np.ndarray:
    a = np.radians(angle_deg)
    return np.cos(a) * f + np.sin(a) * u


def _random_tangent(f: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(f.shape[0])
    v -= (v @ f) * f
    return v / np.linalg.norm(v)


def corrupt_masks(
    frames_by_agent: dict[int, list[FrameBundle]],
    scene: Scene,
    spec: CorruptionSpec,
) -> tuple[dict[int, Codebook], CorruptionLog]:
    """Populate corrupted_masks and per-agent codebooks; returns the injection log.

    With all rates zero the corrupted maps equal the gt maps and every observed
    id carries its own class features (plus small per-id jitter).
    """
    if spec.underseg_rate > 0 and len(scene.instances) < 2:
        raise ContractError("under-segmentation needs at least 2 scene instances")

    rng = np.random.default_rng(spec.rng_seed)
    agents = sorted(frames_by_agent)
    n_inst = len(scene.instances)

    for agent in agents:
        for f in frames_by_agent[agent]:
            f.corrupted_masks = f.gt_masks.astype(np.int32).copy()

    observed = {a: _observed_ids(frames_by_agent[a]) for a in agents}
    conf = _gt_confidences(frames_by_agent, n_inst, spec.border_band)
    observers = {i: [a for a in agents if i in observed[a]] for i in range(1, n_inst + 1)}
    top_agent = {
        i: (max(obs, key=lambda a: (conf[a][i], -a)) if obs else None)
        for i, obs in observers.items()
    }

    claimed: set[tuple[int, int]] = set()
    targets: list[tuple[str, int, tuple[int, ...]]] = []

    def claim(kind: str, agent: int, ids: tuple[int, ...]) -> None:
        targets.append((kind, agent, ids))
        claimed.update((agent, i) for i in ids)

    # semantic errors
    for agent in agents:
        for i in sorted(observed[agent]):
            eligible = (len(observers[i]) >= 2 and top_agent[i] != agent
                        and (agent, i) not in claimed)
            if eligible and rng.random() < spec.semantic_error_rate:
                claim("semantic", agent, (i,))
    # over-segmentation
    for agent in agents:
        for i in sorted(observed[agent]):
            eligible = (len(observers[i]) >= 2 and top_agent[i] != agent
                        and (agent, i) not in claimed)
            if eligible and rng.random() < spec.overseg_rate:
                claim("overseg", agent, (i,))
    # under-segmentation
    for agent in agents:
        for pair in _adjacent_pairs(scene, observed[agent], frames_by_agent[agent], spec):
            i1, i2 = pair
            eligible = (
                (agent, i1) not in claimed and (agent, i2) not in claimed
                and len(observers[i1]) >= 2 and len(observers[i2]) >= 2
                and top_agent[i1] != agent and top_agent[i2] != agent)
            if eligible and rng.random() < spec.underseg_rate:
                claim("underseg", agent, pair)
    # viewpoint loss
    for agent in agents:
        for i in sorted(observed[agent]):
            eligible = ((agent, i) not in claimed and len(observers[i]) >= 2
                        and top_agent[i] != agent
                        and _border_only(frames_by_agent[agent], i, spec.border_band))
            if eligible and rng.random() < spec.viewpoint_loss_rate:
                claim("viewpoint", agent, (i,))

    codebooks = {a: Codebook() for a in agents}
    log_out = CorruptionLog()

    next_id = {a: n_inst + 1 for a in agents}

    for agent in agents:
        frames = frames_by_agent[agent]
        handled: set[int] = set()

        for kind, t_agent, ids in targets:
            if t_agent != agent:
                continue
            if kind == "semantic":
                _inject_semantic(agent, ids[0], scene, codebooks[agent], log_out, rng, spec)
                handled.add(ids[0])
            elif kind == "viewpoint":
                _inject_viewpoint(agent, ids[0], scene, codebooks[agent], log_out, rng)
                handled.add(ids[0])
            elif kind == "overseg":
                nid = _inject_overseg(agent, ids[0], frames, scene, codebooks[agent],
                                      log_out, rng, next_id[agent], spec)
                next_id[agent] = nid
                handled.update(ids)
            elif kind == "underseg":
                nid = _inject_underseg(agent, ids, frames, scene, codebooks[agent],
                                       log_out, rng, next_id[agent], spec)
                next_id[agent] = nid
                handled.update(ids)

        # untouched ids keep their class features (with per-id jitter)
        for i in sorted(observed[agent] - handled):
            clip, caption = scene.gt_features(i)
            codebooks[agent].add(i, perturb_unit(clip, spec.feature_noise_deg, rng),
                                 perturb_unit(caption, spec.feature_noise_deg, rng))
            log_out.id_map[(agent, i)] = (i,)
            log_out.feature_class[(agent, i)] = scene.class_of(i)

    return codebooks, log_out


def _observed_ids(frames: list[FrameBundle]) -> set[int]:
    ids: set[int] = set()
    for f in frames:
        u = np.unique(f.gt_masks)
        ids.update(int(i) for i in u[u > 0])
    return ids


def _gt_confidences(frames_by_agent, n_inst: int, border_band: float) -> dict[int, dict[int, float]]:
    conf: dict[int, dict[int, float]] = {}
    for agent, frames in sorted(frames_by_agent.items()):
        conf[agent] = {}
        for i in range(1, n_inst + 1):
            rows = [frame_confidence(f.gt_masks == i, border_band) for f in frames]
            conf[agent][i] = instance_confidence(rows)
    return conf


def _border_only(frames: list[FrameBundle], instance_id: int, band: float) -> bool:
    """True when every visible mask centroid lies in the outer border band."""
    seen = False
    for f in frames:
        mask = f.gt_masks == instance_id
        if not mask.any():
            continue
        seen = True
        h, w = mask.shape
        vs, us = np.nonzero(mask)
        cv, cu = vs.mean(), us.mean()
        bh, bw = band * h, band * w
        inside_band = (cv < bh or cv >= h - bh or cu < bw or cu >= w - bw)
        if not inside_band:
            return False
    return seen


def _adjacent_pairs(scene: Scene, observed: set[int], frames: list[FrameBundle],
                    spec: CorruptionSpec) -> list[tuple[int, int]]:
    """Co-visible instance pairs whose world AABBs are within the gap threshold."""
    pairs = []
    ids = sorted(observed)
    for ai, i1 in enumerate(ids):
        for i2 in ids[ai + 1:]:
            covisible = any(
                (f.gt_masks == i1).any() and (f.gt_masks == i2).any() for f in frames)
            if not covisible:
                continue
            a1 = scene.instances[i1 - 1].world_aabb()
            a2 = scene.instances[i2 - 1].world_aabb()
            gap = np.maximum(0.0, np.maximum(a1[0] - a2[1], a2[0] - a1[1]))
            if np.linalg.norm(gap) <= spec.underseg_max_gap:
                pairs.append((i1, i2))
    return pairs


def _inject_semantic(agent, instance_id, scene, codebook, log_out, rng,
                     spec: CorruptionSpec) -> None:
    true_class = scene.class_of(instance_id)
    others = sorted(c for c in scene.class_features if c != true_class)
    if not others:
        others = [true_class]
    wrong = int(others[rng.integers(len(others))])
    clip, caption = scene.class_features[wrong]
    codebook.add(instance_id, perturb_unit(clip, spec.feature_noise_deg, rng),
                 perturb_unit(caption, spec.feature_noise_deg, rng))
    log_out.id_map[(agent, instance_id)] = (instance_id,)
    log_out.feature_class[(agent, instance_id)] = wrong
    log_out.errors.append(InjectedError(
        "semantic", agent, (instance_id,), (instance_id,),
        {"true_class": true_class, "wrong_class": wrong}))


def _inject_viewpoint(agent, instance_id, scene, codebook, log_out, rng) -> None:
    dim = scene.feature_dim
    v1 = rng.standard_normal(dim)
    v2 = rng.standard_normal(dim)
    codebook.add(instance_id, v1 / np.linalg.norm(v1), v2 / np.linalg.norm(v2))
    log_out.id_map[(agent, instance_id)] = (instance_id,)
    log_out.feature_class[(agent, instance_id)] = None
    log_out.errors.append(InjectedError(
        "viewpoint", agent, (instance_id,), (instance_id,),
        {"true_class": scene.class_of(instance_id)}))


def _inject_overseg(agent, instance_id, frames, scene, codebook, log_out, rng,
                    next_id, spec: CorruptionSpec) -> int:
    """Split one instance's masks by a world plane through its centroid."""
    prim = scene.instances[instance_id - 1]
    center = prim.pose[:3, 3]
    # horizontal plane normal: splits survive most viewpoints
    az = rng.uniform(0.0, 2.0 * np.pi)
    normal = np.array([np.cos(az), np.sin(az), 0.0])

    id_a, id_b = next_id, next_id + 1
    for f in frames:
        mask = f.gt_masks == instance_id
        if not mask.any():
            continue
        vs, us = np.nonzero(mask)
        pts = backproject(mask, f.depth, f.intrinsics, f.pose)
        side = (pts - center) @ normal >= 0.0
        f.corrupted_masks[vs[side], us[side]] = id_a
        f.corrupted_masks[vs[~side], us[~side]] = id_b

    clip, caption = scene.gt_features(instance_id)
    u_clip = _random_tangent(clip, rng)
    u_cap = _random_tangent(caption, rng)
    ang = spec.overseg_feature_angle_deg
    codebook.add(id_a, rotate_in_plane(clip, u_clip, ang), rotate_in_plane(caption, u_cap, ang))
    codebook.add(id_b, rotate_in_plane(clip, u_clip, -ang), rotate_in_plane(caption, u_cap, -ang))
    cls = scene.class_of(instance_id)
    for cid in (id_a, id_b):
        log_out.id_map[(agent, cid)] = (instance_id,)
        log_out.feature_class[(agent, cid)] = cls
    log_out.errors.append(InjectedError(
        "overseg", agent, (instance_id,), (id_a, id_b),
        {"plane_normal": normal.tolist(), "true_class": cls}))
    return next_id + 2


def _inject_underseg(agent, pair, frames, scene, codebook, log_out, rng,
                     next_id, spec: CorruptionSpec) -> int:
    """Merge two adjacent instances into a single corrupted id."""
    i1, i2 = pair
    merged_id = next_id
    counts = {i1: 0, i2: 0}
    for f in frames:
        for i in pair:
            sel = f.gt_masks == i
            counts[i] += int(sel.sum())
            f.corrupted_masks[sel] = merged_id

    major = i1 if counts[i1] >= counts[i2] else i2
    clip, caption = scene.gt_features(major)
    codebook.add(merged_id, perturb_unit(clip, spec.feature_noise_deg, rng),
                 perturb_unit(caption, spec.feature_noise_deg, rng))
    log_out.id_map[(agent, merged_id)] = (i1, i2)
    log_out.feature_class[(agent, merged_id)] = scene.class_of(major)
    log_out.errors.append(InjectedError(
        "underseg", agent, pair, (merged_id,),
        {"majority_instance": major,
         "true_classes": [scene.class_of(i1), scene.class_of(i2)]}))
    return next_id + 1
