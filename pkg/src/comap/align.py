"""Cross-agent instance alignment.

Per-frame/per-instance view confidence, back-projection, voxel downsampling,
threshold overlap ratios, the instance collaborative graph, reference election
and the correction rules, ending in an injective instance-to-instance mapping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .geometry import Intrinsics, transform_points
from .percept import Codebook, InstanceRecord, feature_cos
from .scene import FrameBundle

log = logging.getLogger(__name__)

Vertex = tuple[int, int]  # (agent_id, record local id)


@dataclass(frozen=True)
class AlignParams:
    voxel: float = 0.05
    tau: float = 0.01
    iou_threshold: float = 0.25
    iob_threshold: float = 0.5
    overseg_cos: float = 0.8
    center_margin: float = 0.1
    min_split_pixels: int = 20


# --- confidence (image-center positioning) --------------------------------

def frame_confidence(mask: np.ndarray, center_margin: float = 0.1) -> float:
    """Per-frame confidence of one instance mask.

    0 when the instance has no pixels; S(mask)/S(image) when any pixel falls
    in the border band; 1 when the mask lies entirely in the central region.
    """
    h, w = mask.shape
    if h < 16 or w < 16:
        raise ContractError("image must be at least 16x16")
    n = int(np.count_nonzero(mask))
    if n == 0:
        return 0.0
    bh = int(round(center_margin * h))
    bw = int(round(center_margin * w))
    interior = np.zeros_like(mask, dtype=bool)
    interior[bh:h - bh, bw:w - bw] = True
    if np.any(mask & ~interior):
        return n / float(h * w)
    return 1.0


def instance_confidence(per_frame: list[float]) -> float:
    """Time-averaged confidence; zero entries for absent frames count."""
    if not per_frame:
        raise ContractError("instance_confidence needs at least one frame")
    return float(np.mean(per_frame))


def compute_confidences(
    records: list[InstanceRecord], frames: list[FrameBundle], center_margin: float = 0.1
) -> dict[int, list[float]]:
    """Fill record.confidence from all of the agent's frames; returns per-frame rows."""
    per_frame: dict[int, list[float]] = {}
    for rec in records:
        row = [frame_confidence(rec.pixels_in(f), center_margin) for f in frames]
        rec.confidence = instance_confidence(row)
        per_frame[rec.local_id] = row
    return per_frame


# --- point cloud machinery -------------------------------------------------

def backproject(mask: np.ndarray, depth: np.ndarray, intrinsics: Intrinsics,
                pose: np.ndarray) -> np.ndarray:
    """World-space points for every masked pixel with positive depth."""
    vs, us = np.nonzero(mask)
    d = depth[vs, us]
    valid = d > 0
    skipped = int((~valid).sum())
    if skipped:
        log.debug("backproject: skipped %d zero-depth pixels", skipped)
    us, vs, d = us[valid], vs[valid], d[valid]
    x = d * (us - intrinsics.cx) / intrinsics.fx
    y = d * (vs - intrinsics.cy) / intrinsics.fy
    pts_cam = np.stack([x, y, d], axis=1)
    return transform_points(pose, pts_cam)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One representative (the voxel center) per occupied voxel, key-ordered.

    Center snapping keeps representatives at least one voxel apart and makes
    clouds of the same surface observed from different viewpoints coincide
    exactly, which the sub-voxel overlap threshold relies on.
    """
    if voxel <= 0:
        raise ContractError("voxel size must be positive")
    if len(points) == 0:
        return points.reshape(0, 3)
    keys = np.floor(points / voxel).astype(np.int64)
    keys = np.unique(keys, axis=0)
    return (keys + 0.5) * voxel


@dataclass(frozen=True)
class OverlapStats:
    m12: int
    m21: int
    iou: float
    iob12: float
    iob21: float


def _pack_keys(keys: np.ndarray) -> np.ndarray:
    # 21 bits per axis, bias keeps values positive
    bias = 1 << 20
    return ((keys[:, 0] + bias) << 42) | ((keys[:, 1] + bias) << 21) | (keys[:, 2] + bias)


def _match_counts(p1: np.ndarray, p2: np.ndarray, tau: float) -> int:
    """#points of p1 with a p2 point within tau (uniform grid, exact d^2 test)."""
    packed2 = _pack_keys(np.floor(p2 / tau).astype(np.int64))
    order2 = np.argsort(packed2, kind="stable")
    keys2 = packed2[order2]
    p2s = p2[order2]
    keys1 = np.floor(p1 / tau).astype(np.int64)
    matched = np.zeros(len(p1), dtype=bool)
    tau2 = tau * tau
    offset_range = (-1, 0, 1)
    for dx in offset_range:
        for dy in offset_range:
            for dz in offset_range:
                shifted = _pack_keys(keys1 + np.array([dx, dy, dz]))
                lo = np.searchsorted(keys2, shifted, side="left")
                hi = np.searchsorted(keys2, shifted, side="right")
                counts = hi - lo
                sel = np.nonzero(counts > 0)[0]
                if len(sel) == 0:
                    continue
                c = counts[sel]
                idx1 = np.repeat(sel, c)
                within = np.arange(c.sum()) - np.repeat(np.concatenate([[0], np.cumsum(c)[:-1]]), c)
                idx2 = np.repeat(lo[sel], c) + within
                d2 = ((p1[idx1] - p2s[idx2]) ** 2).sum(axis=1)
                matched[idx1[d2 <= tau2]] = True
    return int(matched.sum())


def overlap(p1: np.ndarray, p2: np.ndarray, tau: float) -> OverlapStats:
    """Threshold-matched IoU / IoB between two instance clouds.

    The intersection count is the symmetric average (m12 + m21) / 2, keeping
    IoU symmetric under argument exchange.
    """
    if len(p1) == 0 or len(p2) == 0:
        raise ContractError("overlap of an empty cloud")
    if tau <= 0:
        raise ContractError("tau must be positive")
    m12 = _match_counts(p1, p2, tau)
    m21 = _match_counts(p2, p1, tau)
    inter = (m12 + m21) / 2.0
    union = len(p1) + len(p2) - inter
    return OverlapStats(m12=m12, m21=m21, iou=inter / union,
                        iob12=m12 / len(p1), iob21=m21 / len(p2))


# --- collaborative graph ----------------------------------------------------

@dataclass
class CollabGraph:
    vertices: list[Vertex]
    edges: dict[tuple[Vertex, Vertex], OverlapStats]
    clusters: list[list[Vertex]]
    pair_stats: dict[tuple[Vertex, Vertex], OverlapStats] = field(default_factory=dict)

    def stats(self, a: Vertex, b: Vertex) -> OverlapStats:
        """Overlap stats oriented as (a, b) regardless of stored key order."""
        if (a, b) in self.pair_stats:
            return self.pair_stats[(a, b)]
        s = self.pair_stats[(b, a)]
        return OverlapStats(m12=s.m21, m21=s.m12, iou=s.iou, iob12=s.iob21, iob21=s.iob12)


def build_graph(clouds: dict[Vertex, np.ndarray], tau: float,
                iou_threshold: float, iob_threshold: float) -> CollabGraph:
    """Edge iff IoU >= threshold or either IoB >= threshold, across agents only."""
    vertices = sorted(clouds)
    agents = {v[0] for v in vertices}
    if len(agents) < 2:
        raise ContractError("graph construction needs at least 2 agents")
    edges: dict[tuple[Vertex, Vertex], OverlapStats] = {}
    pair_stats: dict[tuple[Vertex, Vertex], OverlapStats] = {}
    for i, v1 in enumerate(vertices):
        for v2 in vertices[i + 1:]:
            if v1[0] == v2[0]:
                continue
            stats = overlap(clouds[v1], clouds[v2], tau)
            pair_stats[(v1, v2)] = stats
            if stats.iou >= iou_threshold or max(stats.iob12, stats.iob21) >= iob_threshold:
                edges[(v1, v2)] = stats

    clusters = _connected_components(vertices, edges)
    return CollabGraph(vertices=vertices, edges=edges, clusters=clusters,
                       pair_stats=pair_stats)


def _connected_components(vertices: list[Vertex],
                          edges: dict[tuple[Vertex, Vertex], OverlapStats]) -> list[list[Vertex]]:
    adj: dict[Vertex, list[Vertex]] = {v: [] for v in vertices}
    for (a, b) in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen: set[Vertex] = set()
    clusters = []
    for v in vertices:
        if v in seen:
            continue
        stack, comp = [v], []
        seen.add(v)
        while stack:
            u = stack.pop()
            comp.append(u)
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        clusters.append(sorted(comp))
    return clusters


def verify_injective(graph: CollabGraph, gid_of: dict[Vertex, int]):
    """Post-correction check: one instance per agent per cluster, one gid per cluster."""
    violations = []
    for cluster in graph.clusters:
        per_agent: dict[int, int] = {}
        for v in cluster:
            per_agent[v[0]] = per_agent.get(v[0], 0) + 1
        for agent, n in sorted(per_agent.items()):
            if n > 1:
                violations.append({"cluster": cluster, "agent": agent, "kind": "duplicate-agent", "count": n})
        gids = sorted({gid_of[v] for v in cluster if v in gid_of})
        if len(gids) > 1:
            violations.append({"cluster": cluster, "kind": "split-global-id", "gids": gids})
    return len(violations) == 0, violations


# --- cluster corrections ----------------------------------------------------

@dataclass
class CorrectionAction:
    rule: str
    agent_id: int
    local_id: int
    reference: Vertex | None
    global_id: int
    frames: list[int] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "rule": self.rule, "agent_id": self.agent_id, "local_id": self.local_id,
            "reference": list(self.reference) if self.reference else None,
            "global_id": self.global_id, "frames": self.frames, "info": self.info,
        }


@dataclass
class AlignmentResult:
    records: dict[int, list[InstanceRecord]]
    actions: list[CorrectionAction]
    graph: CollabGraph
    final_graph: CollabGraph | None
    injective: bool
    violations: list
    gid_features: dict[int, tuple[np.ndarray, np.ndarray]]
    clouds: dict[Vertex, np.ndarray]

    def gids(self) -> list[int]:
        return sorted(self.gid_features)


def record_cloud(rec: InstanceRecord, frames: list[FrameBundle], params: AlignParams) -> np.ndarray:
    """Downsampled world cloud of every pixel observation of a record."""
    pts = []
    for f in frames:
        mask = rec.pixels_in(f)
        if mask.any():
            pts.append(backproject(mask, f.depth, f.intrinsics, f.pose))
    if not pts:
        return np.zeros((0, 3))
    return voxel_downsample(np.vstack(pts), params.voxel)


def align_all(
    records_by_agent: dict[int, list[InstanceRecord]],
    frames_by_agent: dict[int, list[FrameBundle]],
    codebooks: dict[int, Codebook],
    params: AlignParams = AlignParams(),
) -> AlignmentResult:
    """Run the full alignment phase over already-fused agent records.

    Two passes: under-segmented records are first split geometrically (their
    merged vertices bridge otherwise-separate clusters), then the rebuilt
    graph yields one cluster per physical instance and each cluster elects its
    own highest-confidence reference for feature/id unification. Mutates
    records and, for splits, the victims' corrupted mask maps; fills
    aligned_masks (global-id maps) on every frame.
    """
    for agent, records in sorted(records_by_agent.items()):
        compute_confidences(records, frames_by_agent[agent], params.center_margin)

    clouds: dict[Vertex, np.ndarray] = {}
    for agent, records in sorted(records_by_agent.items()):
        for rec in records:
            clouds[(agent, rec.local_id)] = record_cloud(rec, frames_by_agent[agent], params)

    graph = build_graph(clouds, params.tau, params.iou_threshold, params.iob_threshold)

    ctx = _AlignContext(records_by_agent, frames_by_agent, codebooks, clouds, graph, params)
    for cluster in graph.clusters:
        repair_undersegmentation(cluster, ctx)

    ctx.rebuild()
    for cluster in ctx.graph.clusters:
        align_cluster(cluster, ctx)

    # final records are the survivors plus split products
    final_records = {agent: sorted(recs, key=lambda r: r.local_id)
                     for agent, recs in ctx.records.items()}
    _fill_aligned_masks(final_records, frames_by_agent)

    final_clouds: dict[Vertex, np.ndarray] = {}
    for agent, records in sorted(final_records.items()):
        for rec in records:
            c = record_cloud(rec, frames_by_agent[agent], params)
            if len(c):
                final_clouds[(agent, rec.local_id)] = c
    gid_of = {(agent, rec.local_id): rec.global_id
              for agent, recs in final_records.items() for rec in recs
              if rec.global_id is not None}
    try:
        final_graph = build_graph(final_clouds, params.tau,
                                  params.iou_threshold, params.iob_threshold)
        injective, violations = verify_injective(final_graph, gid_of)
    except ContractError:
        final_graph, injective, violations = None, True, []

    return AlignmentResult(records=final_records, actions=ctx.actions, graph=graph,
                           final_graph=final_graph, injective=injective,
                           violations=violations, gid_features=ctx.gid_features,
                           clouds=final_clouds)


class _AlignContext:
    def __init__(self, records_by_agent, frames_by_agent, codebooks, clouds, graph, params):
        self.records = {a: list(rs) for a, rs in records_by_agent.items()}
        self.frames = frames_by_agent
        self.codebooks = codebooks
        self.clouds = clouds
        self.graph = graph
        self.params = params
        self.actions: list[CorrectionAction] = []
        self.gid_features: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._next_gid = 1  # 0 is background in aligned mask maps
        self._next_local: dict[int, int] = {
            a: (max((r.local_id for r in rs), default=-1) + 1) for a, rs in self.records.items()
        }
        self._next_mask_id: dict[int, int] = {}
        for a, frames in frames_by_agent.items():
            top = 0
            for f in frames:
                if f.corrupted_masks is not None and f.corrupted_masks.size:
                    top = max(top, int(f.corrupted_masks.max()))
            self._next_mask_id[a] = top + 1

    def fresh_gid(self) -> int:
        gid = self._next_gid
        self._next_gid += 1
        return gid

    def fresh_local(self, agent: int) -> int:
        lid = self._next_local[agent]
        self._next_local[agent] += 1
        return lid

    def fresh_mask_id(self, agent: int) -> int:
        mid = self._next_mask_id[agent]
        self._next_mask_id[agent] += 1
        return mid

    def record(self, v: Vertex) -> InstanceRecord:
        for rec in self.records[v[0]]:
            if rec.local_id == v[1]:
                return rec
        raise KeyError(v)

    def rebuild(self) -> None:
        """Recompute confidences, clouds and the graph after mask surgery."""
        for agent, records in sorted(self.records.items()):
            compute_confidences(records, self.frames[agent], self.params.center_margin)
        self.clouds = {}
        for agent, records in sorted(self.records.items()):
            for rec in records:
                c = record_cloud(rec, self.frames[agent], self.params)
                if len(c):
                    self.clouds[(agent, rec.local_id)] = c
        self.graph = build_graph(self.clouds, self.params.tau,
                                 self.params.iou_threshold, self.params.iob_threshold)

    def stats(self, a: Vertex, b: Vertex) -> OverlapStats:
        """Pair overlap, computed on demand for same-agent pairs."""
        if (a, b) in self.graph.pair_stats or (b, a) in self.graph.pair_stats:
            return self.graph.stats(a, b)
        s = overlap(self.clouds[a], self.clouds[b], self.params.tau)
        self.graph.pair_stats[(a, b)] = s
        return s


def _distinct_objects(refs: list[Vertex], ctx: _AlignContext) -> bool:
    """True when the reference records look like different objects, not
    over-segmented parts of one (which share similar features)."""
    for i, a in enumerate(refs):
        ra = ctx.record(a)
        for b in refs[i + 1:]:
            rb = ctx.record(b)
            if feature_cos(ra.f_clip, ra.f_caption, rb.f_clip, rb.f_caption) >= ctx.params.overseg_cos:
                return False
    return True


def repair_undersegmentation(cluster: list[Vertex], ctx: _AlignContext) -> None:
    """Split merged records whose cloud is covered by several of one agent's
    distinct instances; geometry only, features and ids come later."""
    if len(cluster) < 2:
        return
    params = ctx.params
    per_agent: dict[int, list[Vertex]] = {}
    for v in cluster:
        per_agent.setdefault(v[0], []).append(v)
    # candidate reference agents by their best vertex confidence
    ranked = sorted(per_agent,
                    key=lambda a: (-max(ctx.record(v).confidence for v in per_agent[a]), a))

    def suspect(agent: int) -> bool:
        # an agent whose single vertex swallows >= 2 distinct vertices of a peer
        for v in per_agent[agent]:
            for other, verts in per_agent.items():
                if other == agent:
                    continue
                covered = [r for r in verts
                           if ctx.graph.stats(r, v).iob12 >= params.iob_threshold]
                if len(covered) >= 2 and _distinct_objects(covered, ctx):
                    return True
        return False

    k_star = next((a for a in ranked if not suspect(a)), ranked[0])
    refs = sorted(per_agent[k_star])
    if len(refs) < 2:
        return
    for agent in sorted(a for a in per_agent if a != k_star):
        for v in sorted(per_agent[agent]):
            covering = [r for r in refs
                        if ctx.graph.stats(r, v).iob12 >= params.iob_threshold]
            if len(covering) >= 2 and _distinct_objects(covering, ctx):
                _rule3_split(v, covering, ctx)


def align_cluster(cluster: list[Vertex], ctx: _AlignContext) -> None:
    """Resolve one (per-instance) cluster: elect the highest-confidence
    reference, then unify features, ids and over-segmented masks."""
    if len(cluster) == 1:
        v = cluster[0]
        rec = ctx.record(v)
        gid = ctx.fresh_gid()
        rec.global_id = gid
        ctx.gid_features[gid] = (rec.f_clip.copy(), rec.f_caption.copy())
        ctx.actions.append(CorrectionAction("singleton", v[0], v[1], None, gid))
        return

    by_conf = sorted(cluster, key=lambda v: (-ctx.record(v).confidence, v[0], v[1]))
    ref = by_conf[0]
    ref_rec = ctx.record(ref)
    gid = ctx.fresh_gid()
    ref_rec.global_id = gid
    ctx.gid_features[gid] = (ref_rec.f_clip.copy(), ref_rec.f_caption.copy())
    ctx.actions.append(CorrectionAction("reference", ref[0], ref[1], ref, gid))

    for agent in sorted({v[0] for v in cluster}):
        group = sorted(v for v in cluster if v[0] == agent and v != ref)
        if not group:
            continue
        if len(group) + (1 if agent == ref[0] else 0) >= 2:
            _rule2_or_fallback(group, ref, gid, ctx)
        else:
            _rule1_adopt(group[0], ref, gid, ctx)


def _rule1_adopt(v: Vertex, ref: Vertex, gid: int, ctx: _AlignContext,
                 rule: str = "feature-adopt") -> None:
    rec = ctx.record(v)
    ref_rec = ctx.record(ref)
    rec.f_clip = ref_rec.f_clip.copy()
    rec.f_caption = ref_rec.f_caption.copy()
    rec.global_id = gid
    ctx.actions.append(CorrectionAction(rule, v[0], v[1], ref, gid,
                                        frames=sorted({t for t, _ in rec.frame_masks})))


def _rule2_or_fallback(group: list[Vertex], ref: Vertex, gid: int, ctx: _AlignContext) -> None:
    """Merge same-agent over-segmented parts; the group may include parts of
    the reference's own agent, in which case the reference record joins the
    merge and keeps its identity."""
    params = ctx.params
    agent = group[0][0]
    members = list(group) + ([ref] if agent == ref[0] else [])
    contained = all(ctx.stats(v, ref).iob12 >= params.iob_threshold for v in group)
    recs = [ctx.record(v) for v in members]
    similar = all(
        feature_cos(a.f_clip, a.f_caption, b.f_clip, b.f_caption) >= params.overseg_cos
        for i, a in enumerate(recs) for b in recs[i + 1:]
    )
    if not (contained and similar):
        for v in group:
            _rule1_adopt(v, ref, gid, ctx, rule="ambiguous-adopt")
        return

    ref_rec = ctx.record(ref)
    merged = InstanceRecord(
        agent_id=agent, local_id=ctx.fresh_local(agent),
        frame_masks=sorted({fm for m in recs for fm in m.frame_masks}),
        f_clip=ref_rec.f_clip.copy(), f_caption=ref_rec.f_caption.copy(),
        confidence=max(m.confidence for m in recs), global_id=gid)
    drop_ids = {m.local_id for m in recs}
    ctx.records[agent] = [r for r in ctx.records[agent] if r.local_id not in drop_ids]
    ctx.records[agent].append(merged)
    ctx.actions.append(CorrectionAction(
        "overseg-merge", agent, merged.local_id, ref, gid,
        frames=sorted({t for t, _ in merged.frame_masks}),
        info={"merged_locals": sorted(drop_ids)}))


def _rule3_split(v: Vertex, refs: list[Vertex], ctx: _AlignContext) -> None:
    """Split an under-segmented record by projecting reference clouds into its
    frames; pixels follow their nearest reference cloud. Pieces keep the
    victim's features until the per-instance pass assigns a reference."""
    from scipy.spatial import cKDTree

    params = ctx.params
    agent = v[0]
    victim = ctx.record(v)
    frames = {f.t: f for f in ctx.frames[agent]}
    trees = {r: cKDTree(ctx.clouds[r]) for r in refs}

    new_ids = {r: ctx.fresh_mask_id(agent) for r in refs}
    new_frame_masks: dict[Vertex, set[tuple[int, int]]] = {r: set() for r in refs}
    kept_frames: list[int] = []

    for t in sorted({t for t, _ in victim.frame_masks}):
        frame = frames[t]
        mask = victim.pixels_in(frame)
        vs, us = np.nonzero(mask)
        d = frame.depth[vs, us]
        valid = d > 0
        vs, us = vs[valid], us[valid]
        pts = backproject(mask, frame.depth, frame.intrinsics, frame.pose)
        dists = np.stack([trees[r].query(pts)[0] for r in refs], axis=1)
        choice = np.argmin(dists, axis=1)
        piece_sizes = [(choice == i).sum() for i in range(len(refs))]
        nonzero = [s for s in piece_sizes if s > 0]
        if len(nonzero) >= 2 and any(0 < s < params.min_split_pixels for s in piece_sizes):
            # unresolvable at this resolution: whole frame goes to the majority piece
            kept_frames.append(t)
            best = int(np.argmax(piece_sizes))
            frame.corrupted_masks[vs, us] = new_ids[refs[best]]
            new_frame_masks[refs[best]].add((t, new_ids[refs[best]]))
            continue
        for i, r in enumerate(refs):
            sel = choice == i
            if not sel.any():
                continue
            frame.corrupted_masks[vs[sel], us[sel]] = new_ids[r]
            new_frame_masks[r].add((t, new_ids[r]))

    ctx.records[agent] = [r for r in ctx.records[agent] if r.local_id != victim.local_id]
    for r in refs:
        if not new_frame_masks[r]:
            continue
        piece = InstanceRecord(
            agent_id=agent, local_id=ctx.fresh_local(agent),
            frame_masks=sorted(new_frame_masks[r]),
            f_clip=victim.f_clip.copy(), f_caption=victim.f_caption.copy(),
            confidence=victim.confidence)
        ctx.records[agent].append(piece)
        if agent in ctx.codebooks:
            ctx.codebooks[agent].add(new_ids[r], victim.f_clip, victim.f_caption)
        ctx.actions.append(CorrectionAction(
            "underseg-split", agent, piece.local_id, r, -1,
            frames=sorted({t for t, _ in piece.frame_masks}),
            info={"source_local": victim.local_id, "mask_id": new_ids[r],
                  "kept_frames": kept_frames}))
    if kept_frames:
        log.info("underseg split on agent %d record %d kept %d unresolvable frames",
                 agent, victim.local_id, len(kept_frames))


def _fill_aligned_masks(records_by_agent: dict[int, list[InstanceRecord]],
                        frames_by_agent: dict[int, list[FrameBundle]]) -> None:
    for agent, frames in sorted(frames_by_agent.items()):
        for frame in frames:
            aligned = np.zeros(frame.shape, dtype=np.int64)
            for rec in records_by_agent.get(agent, []):
                if rec.global_id is None:
                    continue
                mask = rec.pixels_in(frame)
                aligned[mask] = rec.global_id
            frame.aligned_masks = aligned
