"""Per-agent cross-frame fusion of instance masks into fused records.

Observations are (frame, mask-id) pairs; the coarse phase groups them by
spatial overlap of their back-projected clouds, the fine phase merges groups
whose features agree and whose clouds touch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import FrameBundle


@dataclass(frozen=True)
class CodebookEntry:
    f_clip: np.ndarray
    f_caption: np.ndarray


class Codebook:
    """Maps an agent's mask ids to their semantic feature pair."""

    def __init__(self) -> None:
        self.entries: dict[int, CodebookEntry] = {}

    def add(self, mask_id: int, f_clip: np.ndarray, f_caption: np.ndarray) -> None:
        self.entries[mask_id] = CodebookEntry(_unit(f_clip), _unit(f_caption))

    def __getitem__(self, mask_id: int) -> CodebookEntry:
        return self.entries[mask_id]

    def __contains__(self, mask_id: int) -> bool:
        return mask_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class InstanceRecord:
    """A fused agent-level instance."""

    agent_id: int
    local_id: int
    frame_masks: list[tuple[int, int]]       # (t, mask id)
    f_clip: np.ndarray
    f_caption: np.ndarray
    confidence: float = 0.0
    global_id: int | None = None

    def pixels_in(self, frame: FrameBundle) -> np.ndarray:
        """Boolean (H, W) membership of this record's masks in one frame."""
        ids = [m for (t, m) in self.frame_masks if t == frame.t]
        if not ids:
            return np.zeros(frame.shape, dtype=bool)
        return np.isin(frame.corrupted_masks, ids)


def _unit(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64) / np.linalg.norm(v)


def feature_cos(a_clip, a_caption, b_clip, b_caption) -> float:
    """Combined feature agreement: mean of the clip and caption cosines."""
    return 0.5 * (float(a_clip @ b_clip) + float(a_caption @ b_caption))


@dataclass
class _Group:
    observations: list[tuple[int, int]]
    cloud: np.ndarray
    clip_sum: np.ndarray = field(repr=False, default=None)
    caption_sum: np.ndarray = field(repr=False, default=None)

    def mean_clip(self) -> np.ndarray:
        return _unit(self.clip_sum)

    def mean_caption(self) -> np.ndarray:
        return _unit(self.caption_sum)


def fuse_frames(
    frames: list[FrameBundle],
    codebook: Codebook,
    coarse_iob: float = 0.3,
    fine_cos: float = 0.9,
    fine_min_overlap: float = 0.05,
    voxel: float = 0.05,
    tau: float = 0.01,
) -> list[InstanceRecord]:
    """Fuse one agent's per-frame mask observations into instance records.

    Coarse phase: an observation joins the first existing group whose running
    cloud it overlaps with IoB >= coarse_iob (best group wins), else opens a
    new group. Fine phase: groups with touching clouds and mean-feature cosine
    >= fine_cos merge. Record features are the renormalized mean over member
    observations.
    """
    from .align import backproject, overlap, voxel_downsample

    if not frames:
        return []
    agent_id = frames[0].agent_id

    groups: list[_Group] = []
    for frame in sorted(frames, key=lambda f: f.t):
        ids = np.unique(frame.corrupted_masks)
        for m in ids[ids > 0]:
            mask = frame.corrupted_masks == m
            pts = backproject(mask, frame.depth, frame.intrinsics, frame.pose)
            if len(pts) == 0:
                continue
            cloud = voxel_downsample(pts, voxel)
            best_idx, best_iob = -1, 0.0
            for idx, g in enumerate(groups):
                iob = overlap(cloud, g.cloud, tau).iob12
                if iob > best_iob:
                    best_idx, best_iob = idx, iob
            entry = codebook[int(m)]
            if best_idx >= 0 and best_iob >= coarse_iob:
                g = groups[best_idx]
                g.observations.append((frame.t, int(m)))
                g.cloud = voxel_downsample(np.vstack([g.cloud, cloud]), voxel)
                g.clip_sum = g.clip_sum + entry.f_clip
                g.caption_sum = g.caption_sum + entry.f_caption
            else:
                groups.append(_Group([(frame.t, int(m))], cloud,
                                     entry.f_clip.copy(), entry.f_caption.copy()))

    merged = _fine_merge(groups, fine_cos, fine_min_overlap, tau)

    records = []
    for i, g in enumerate(merged):
        records.append(InstanceRecord(
            agent_id=agent_id, local_id=i,
            frame_masks=sorted(g.observations),
            f_clip=_unit(g.clip_sum), f_caption=_unit(g.caption_sum)))
    return records


def _fine_merge(groups: list[_Group], fine_cos: float, fine_min_overlap: float,
                tau: float) -> list[_Group]:
    """Union-find merge of spatially touching, feature-consistent groups."""
    from .align import overlap

    n = len(groups)
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            ov = overlap(groups[i].cloud, groups[j].cloud, tau)
            if max(ov.iob12, ov.iob21) <= fine_min_overlap:
                continue
            cos = feature_cos(groups[i].mean_clip(), groups[i].mean_caption(),
                              groups[j].mean_clip(), groups[j].mean_caption())
            if cos >= fine_cos:
                parent[find(i)] = find(j)

    from .align import voxel_downsample

    buckets: dict[int, _Group] = {}
    for i, g in enumerate(groups):
        root = find(i)
        if root not in buckets:
            buckets[root] = _Group(list(g.observations), g.cloud,
                                   g.clip_sum.copy(), g.caption_sum.copy())
        else:
            b = buckets[root]
            b.observations.extend(g.observations)
            b.cloud = np.vstack([b.cloud, g.cloud])
            b.clip_sum = b.clip_sum + g.clip_sum
            b.caption_sum = b.caption_sum + g.caption_sum
    out = sorted(buckets.values(), key=lambda g: min(g.observations))
    return out


def records_to_json(records: list[InstanceRecord]) -> list[dict]:
    """Debug/export form of fused records."""
    return [
        {
            "agent_id": r.agent_id,
            "local_id": r.local_id,
            "global_id": r.global_id,
            "confidence": r.confidence,
            "frame_masks": [list(fm) for fm in r.frame_masks],
            "f_clip": r.f_clip.tolist(),
            "f_caption": r.f_caption.tolist(),
        }
        for r in records
    ]
