"""Round-based distributed training: per-agent Adam over the combined loss,
parameter sharing, blind-zone ray sharing and gossip mixing.

Each agent is a self-contained worker touching only its own state; rounds are
synchronous and messages emitted in round r arrive in round r+1. All
randomness flows through named per-agent streams so a run is reproducible and
a fully-partitioned agent matches single-agent training bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ContractError
from .field import (FieldArch, InstanceField, init_params, render_batch,
                    sample_depth_matrix)
from .geometry import Intrinsics
from .losses import (LossWeights, RayBatch, data_loss, param_consistency_loss,
                     render_consistency_loss)
from .netsim import (KIND_PARAM, KIND_RAY, BROADCAST, Message, RayShareData,
                     param_share, parse_param_share, parse_ray_share, ray_share)
from .scene import FrameBundle

log = logging.getLogger(__name__)

PENALTY = "penalty-consensus"
GOSSIP = "gossip-averaging"


@dataclass(frozen=True)
class TrainParams:
    rounds: int = 300
    rays_per_round: int = 1024
    shared_rays_per_peer: int = 256
    samples_per_ray: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    strategy: str = PENALTY
    weights: LossWeights = LossWeights()
    cross_rendering: bool = True
    octant_min_hits: int = 10

    def __post_init__(self):
        if self.strategy not in (PENALTY, GOSSIP):
            raise ContractError(f"unknown strategy {self.strategy!r}")


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_theta(cls, theta: np.ndarray, params: TrainParams) -> "AdamState":
        return cls(m=np.zeros_like(theta), v=np.zeros_like(theta),
                   lr=params.lr, beta1=params.beta1, beta2=params.beta2,
                   eps=params.eps)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray):
    """Bias-corrected moment update; non-finite gradients skip and flag."""
    if grad.shape != theta.shape:
        raise ContractError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        log.warning("adam step skipped: non-finite gradient")
        return theta, False
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), True


# --- octant coverage ------------------------------------------------------------

def octant_indices(points: np.ndarray, aabb: np.ndarray) -> np.ndarray:
    center = 0.5 * (aabb[0] + aabb[1])
    bits = (points > center).astype(np.int64)
    return bits[:, 0] | (bits[:, 1] << 1) | (bits[:, 2] << 2)


def coverage_mask(points: np.ndarray, aabb: np.ndarray, min_hits: int) -> int:
    """8-bit mask of aabb octants holding at least min_hits observed points."""
    if len(points) == 0:
        return 0
    idx = octant_indices(points, aabb)
    counts = np.bincount(idx, minlength=8)
    return int(sum(1 << o for o in range(8) if counts[o] >= min_hits))


def derive_seed(*parts: int) -> int:
    """Stable 64-bit stream seed from integer coordinates."""
    ss = np.random.SeedSequence([int(p) & 0x7FFFFFFF for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


# --- ray helpers -----------------------------------------------------------------

def rays_from_pixels(pose: np.ndarray, intr: Intrinsics, pixels: np.ndarray):
    """World rays for integer pixels: (origin, unit dirs (n,3), z-to-length factor)."""
    u = pixels[:, 0].astype(np.float64)
    v = pixels[:, 1].astype(np.float64)
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy,
                      np.ones_like(u)], axis=1)
    nf = np.linalg.norm(d_cam, axis=1)
    dirs = (d_cam / nf[:, None]) @ pose[:3, :3].T
    return pose[:3, 3].copy(), dirs, nf


def clip_rays_batch(origins: np.ndarray, dirs: np.ndarray, aabb: np.ndarray):
    """Vectorized slab clip; returns (t0, t1, valid)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (aabb[0] - origins) * inv
        t_hi = (aabb[1] - origins) * inv
    parallel = dirs == 0.0
    inside = (origins >= aabb[0]) & (origins <= aabb[1])
    t_min = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t_lo, t_hi))
    t_max = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t_lo, t_hi))
    t0 = np.maximum(t_min.max(axis=1), 0.0)
    t1 = t_max.min(axis=1)
    valid = t1 > t0 + 1e-9
    return t0, t1, valid


# --- per-agent worker ---------------------------------------------------------------

@dataclass
class RoundStats:
    round: int
    agent_id: int
    loss_occ: float = 0.0
    loss_depth: float = 0.0
    loss_color: float = 0.0
    loss_data: float = 0.0
    loss_con: float = 0.0
    loss_rend: float = 0.0
    rays: int = 0
    shared_rays_in: int = 0
    shared_rays_skipped: int = 0
    steps_skipped: int = 0

    def total(self, w: LossWeights) -> float:
        return self.loss_data + w.rho_con * self.loss_con + w.rho_rend * self.loss_rend


class AgentWorker:
    """One agent's training state: owned fields, replicas, peer caches."""

    def __init__(
        self,
        agent_id: int,
        n_agents: int,
        frames: list[FrameBundle],
        fields: dict[int, InstanceField],
        params: TrainParams,
        master_seed: int,
    ) -> None:
        self.agent_id = agent_id
        self.n_agents = n_agents
        self.frames = frames
        self.fields = dict(sorted(fields.items()))
        self.owned = set(self.fields)
        self.params = params
        self.master_seed = master_seed
        self.rng_batch = np.random.default_rng(derive_seed(master_seed, 1, agent_id))
        self.rng_share = np.random.default_rng(derive_seed(master_seed, 2, agent_id))

        self.optim = {gid: AdamState.for_theta(f.theta, params)
                      for gid, f in self.fields.items()}
        # latest peer parameters / coverage per (peer, gid)
        self.peer_theta: dict[tuple[int, int], tuple[int, np.ndarray]] = {}
        self.peer_coverage: dict[tuple[int, int], int] = {}
        self.replica_from: dict[int, int] = {}

        self.coverage: dict[int, int] = {}
        self._share_index: dict[int, dict[int, np.ndarray]] = {}
        self._build_coverage()

        self._pixel_pool = self._build_pixel_pool()

    # -- setup helpers --

    def _build_coverage(self) -> None:
        for gid, field_ in self.fields.items():
            per_octant: dict[int, list[np.ndarray]] = {o: [] for o in range(8)}
            pts_all = []
            for fi, frame in enumerate(self.frames):
                sel = (frame.aligned_masks == gid) & (frame.depth > 0)
                if not sel.any():
                    continue
                vs, us = np.nonzero(sel)
                d = frame.depth[vs, us]
                x = d * (us - frame.intrinsics.cx) / frame.intrinsics.fx
                y = d * (vs - frame.intrinsics.cy) / frame.intrinsics.fy
                pts = np.stack([x, y, d], axis=1) @ frame.pose[:3, :3].T + frame.pose[:3, 3]
                pts_all.append(pts)
                oct_idx = octant_indices(pts, field_.aabb)
                for o in range(8):
                    m = oct_idx == o
                    if m.any():
                        rows = np.stack([np.full(m.sum(), fi), vs[m], us[m]], axis=1)
                        per_octant[o].append(rows)
            pts_all = np.vstack(pts_all) if pts_all else np.zeros((0, 3))
            self.coverage[gid] = coverage_mask(pts_all, field_.aabb, self.params.octant_min_hits)
            self._share_index[gid] = {
                o: np.vstack(rows) for o, rows in per_octant.items() if rows}

    def _build_pixel_pool(self) -> np.ndarray:
        rows = []
        for fi, frame in enumerate(self.frames):
            h, w = frame.shape
            rows.append(np.stack([
                np.full(h * w, fi),
                np.repeat(np.arange(h), w),
                np.tile(np.arange(w), h)], axis=1))
        return np.vstack(rows)

    # -- round --

    def run_round(self, rnd: int, inbox: list[Message]) -> tuple[list[Message], RoundStats]:
        stats = RoundStats(round=rnd, agent_id=self.agent_id)
        fresh_params: dict[int, list[np.ndarray]] = {}
        ray_jobs: list[RayShareData] = []

        for msg in inbox:
            if msg.kind == KIND_PARAM:
                self._ingest_params(msg, fresh_params)
            elif msg.kind == KIND_RAY:
                ray_jobs.append(parse_ray_share(msg))

        batch_pixels = self._draw_pixels()
        for gid in sorted(self.owned):
            self._optimize_field(gid, batch_pixels, ray_jobs, stats)

        if self.params.strategy == GOSSIP:
            self._gossip_mix(fresh_params)

        outbox = self._emit(rnd)
        return outbox, stats

    def _ingest_params(self, msg: Message, fresh: dict[int, list[np.ndarray]]) -> None:
        field_, coverage = parse_param_share(msg)
        gid = field_.global_id
        key = (msg.sender, gid)
        prev = self.peer_theta.get(key)
        if prev is None or field_.version >= prev[0]:
            self.peer_theta[key] = (field_.version, field_.theta)
            self.peer_coverage[key] = coverage
        if gid in self.owned:
            fresh.setdefault(gid, []).append(field_.theta)
        else:
            replica = self.fields.get(gid)
            if replica is None:
                self.fields[gid] = field_
                self.replica_from[gid] = msg.sender
            elif field_.version >= replica.version:
                replica.theta = field_.theta
                replica.version = field_.version

    def _draw_pixels(self) -> np.ndarray:
        n = min(self.params.rays_per_round, len(self._pixel_pool))
        idx = self.rng_batch.choice(len(self._pixel_pool), size=n, replace=False)
        return self._pixel_pool[np.sort(idx)]

    def _local_batch(self, gid: int, pixels: np.ndarray) -> tuple[RayBatch, np.ndarray]:
        field_ = self.fields[gid]
        origins, dirs, nf, tgt, d, rgb = [], [], [], [], [], []
        for fi in np.unique(pixels[:, 0]):
            frame = self.frames[int(fi)]
            sel = pixels[:, 0] == fi
            pix = pixels[sel][:, [2, 1]]  # (u, v)
            o, dr, f = rays_from_pixels(frame.pose, frame.intrinsics, pix)
            vs, us = pixels[sel][:, 1], pixels[sel][:, 2]
            origins.append(np.tile(o, (sel.sum(), 1)))
            dirs.append(dr)
            nf.append(f)
            tgt.append(frame.aligned_masks[vs, us])
            d.append(frame.depth[vs, us])
            rgb.append(frame.rgb[vs, us])
        origins = np.vstack(origins)
        dirs = np.vstack(dirs)
        nf = np.concatenate(nf)
        tgt = np.concatenate(tgt)
        d = np.concatenate(d)
        rgb = np.vstack(rgb)

        t0, t1, valid = clip_rays_batch(origins, dirs, field_.aabb)
        supervised = tgt == gid
        ray_len = d * nf
        # beyond an observed foreign hit the ray carries no information
        occluded = (~supervised) & (d > 0) & (ray_len <= t0 + 1e-9)
        t1_eff = np.where((~supervised) & (d > 0), np.minimum(t1, ray_len), t1)
        keep = valid & ~occluded & (t1_eff > t0 + 1e-9)

        batch = RayBatch(
            origins=origins[keep], directions=dirs[keep],
            t_near=t0[keep], t_far=t1_eff[keep],
            occ_target=supervised[keep].astype(np.float64),
            depth_target=ray_len[keep], color_target=rgb[keep],
            supervised=supervised[keep])
        depths = sample_depth_matrix(batch.t_near, batch.t_far,
                                     self.params.samples_per_ray, self.rng_batch)
        return batch, depths

    def _optimize_field(self, gid: int, pixels: np.ndarray,
                        ray_jobs: list[RayShareData], stats: RoundStats) -> None:
        field_ = self.fields[gid]
        w = self.params.weights
        batch, depths = self._local_batch(gid, pixels)
        res = data_loss(field_, batch, depths, w)
        total_grad = res.grad
        stats.loss_occ += res.occ
        stats.loss_depth += res.depth
        stats.loss_color += res.color
        stats.loss_data += res.total
        stats.rays += res.n_rays

        if self.params.strategy == PENALTY:
            peers = [theta for (peer, g), (_, theta) in sorted(self.peer_theta.items())
                     if g == gid]
            if peers:
                con_val, con_grad = param_consistency_loss(field_.theta, peers)
                stats.loss_con += con_val
                total_grad = total_grad + w.rho_con * con_grad

        if self.params.cross_rendering and w.rho_rend > 0:
            for job in ray_jobs:
                if job.global_id != gid:
                    continue
                rend = self._render_consistency(field_, job)
                if rend is None:
                    continue
                stats.loss_rend += rend.loss
                stats.shared_rays_in += rend.n_rays
                stats.shared_rays_skipped += rend.n_skipped
                total_grad = total_grad + rend.grad

        new_theta, ok = adam_step(self.optim[gid], field_.theta, total_grad)
        if ok:
            field_.apply_update(new_theta)
        else:
            stats.steps_skipped += 1

    def _render_consistency(self, field_: InstanceField, job: RayShareData):
        origin, dirs, _ = rays_from_pixels(job.pose, job.intrinsics, job.pixels)
        origins = np.tile(origin, (len(dirs), 1))
        t0, t1, valid = clip_rays_batch(origins, dirs, field_.aabb)
        n_skipped = int((~valid).sum())
        if not valid.any():
            return None
        batch = RayBatch(
            origins=origins[valid], directions=dirs[valid],
            t_near=t0[valid], t_far=t1[valid],
            occ_target=np.zeros(valid.sum()),
            depth_target=np.zeros(valid.sum()),
            color_target=np.zeros((valid.sum(), 3)),
            supervised=np.zeros(valid.sum(), dtype=bool))
        depths = sample_depth_matrix(batch.t_near, batch.t_far,
                                     self.params.samples_per_ray,
                                     np.random.default_rng(job.seed))
        res = render_consistency_loss(field_, batch, depths, job.depths[valid],
                                      grad_scale=self.params.weights.rho_rend)
        res.n_skipped = n_skipped
        return res

    def _gossip_mix(self, fresh: dict[int, list[np.ndarray]]) -> None:
        k = float(self.n_agents)
        for gid in sorted(self.owned):
            thetas = fresh.get(gid, [])
            if not thetas:
                continue
            field_ = self.fields[gid]
            mixed = (1.0 - len(thetas) / k) * field_.theta
            for theta in thetas:
                mixed = mixed + theta / k
            field_.apply_update(mixed)

    def _emit(self, rnd: int) -> list[Message]:
        outbox: list[Message] = []
        if self.n_agents < 2:
            return outbox
        for gid in sorted(self.owned):
            outbox.append(param_share(self.agent_id, BROADCAST, rnd,
                                      self.fields[gid], self.coverage.get(gid, 0)))
        if self.params.cross_rendering:
            outbox.extend(self._emit_ray_shares(rnd))
        return outbox

    def _emit_ray_shares(self, rnd: int) -> list[Message]:
        msgs: list[Message] = []
        peers = sorted({peer for (peer, _) in self.peer_coverage})
        for peer in peers:
            for gid in sorted(self.owned):
                pc = self.peer_coverage.get((peer, gid))
                if pc is None:
                    continue
                blind = (~pc) & self.coverage.get(gid, 0) & 0xFF
                if blind == 0:
                    continue
                data = self._build_ray_share(gid, blind, rnd, peer)
                if data is not None:
                    msgs.append(ray_share(self.agent_id, peer, rnd, data))
        return msgs

    def _build_ray_share(self, gid: int, blind: int, rnd: int, peer: int) -> RayShareData | None:
        index = self._share_index.get(gid, {})
        rows = [index[o] for o in range(8) if (blind >> o) & 1 and o in index]
        if not rows:
            return None
        cand = np.vstack(rows)
        frames_with = np.unique(cand[:, 0])
        fi = int(frames_with[rnd % len(frames_with)])
        cand = cand[cand[:, 0] == fi]
        n = min(self.params.shared_rays_per_peer, len(cand))
        pick = self.rng_share.choice(len(cand), size=n, replace=False)
        cand = cand[np.sort(pick)]
        frame = self.frames[fi]
        pixels = cand[:, [2, 1]]  # (u, v)

        field_ = self.fields[gid]
        origin, dirs, _ = rays_from_pixels(frame.pose, frame.intrinsics, pixels)
        origins = np.tile(origin, (len(dirs), 1))
        t0, t1, valid = clip_rays_batch(origins, dirs, field_.aabb)
        if not valid.any():
            return None
        pixels = pixels[valid]
        seed = derive_seed(self.master_seed, 3, rnd, self.agent_id, peer, gid)
        depths = sample_depth_matrix(t0[valid], t1[valid], self.params.samples_per_ray,
                                     np.random.default_rng(seed))
        from .field import field_eval

        pts = origins[valid][:, None, :] + dirs[valid][:, None, :] * depths[..., None]
        sigma, color = field_eval(field_, pts.reshape(-1, 3))
        r = int(valid.sum())
        _, rendered, _, _ = render_batch(
            depths, sigma.reshape(r, -1), color.reshape(r, -1, 3))
        return RayShareData(global_id=gid, seed=seed, pose=frame.pose,
                            intrinsics=frame.intrinsics, pixels=pixels,
                            depths=rendered)


def make_field(gid: int, aabb: np.ndarray, arch: FieldArch, master_seed: int,
               agent_id: int) -> InstanceField:
    """Fresh field with an agent-specific deterministic init."""
    rng = np.random.default_rng(derive_seed(master_seed, 4, agent_id, gid))
    return InstanceField(theta=init_params(arch, rng), arch=arch, aabb=aabb,
                         global_id=gid)
