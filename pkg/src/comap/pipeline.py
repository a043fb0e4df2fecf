"""Experiment pipeline: generate -> align -> co-train -> evaluate.

The orchestrator owns phase barriers; agents are independent workers between
barriers and exchange messages only through the bus. Alignment-phase cloud
exchange runs over a reliable channel; the configured lossy channel applies
to the co-training phase.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .align import AlignmentResult, align_all, record_cloud
from .config import ExperimentConfig, dump_config
from .corruption import CorruptionLog, corrupt_masks
from .errors import ConfigError
from .evalkit import (SurfaceCloud, classify_features, extract_surface,
                      geometric_metrics, semantic_metrics)
from .field import InstanceField
from .geometry import points_aabb
from .netsim import (BROADCAST, Bus, ChannelModel, CloudShareData, cloud_share,
                     parse_cloud_share, serialize)
from .percept import Codebook, InstanceRecord, fuse_frames, records_to_json
from .pipeline_util import json_ready
from .scene import FrameBundle, Scene, build_scene, render_frame, sample_scene_surface
from .sceneio import write_frames, write_ply
from .training import AgentWorker, derive_seed

log = logging.getLogger(__name__)

GLOBAL_FIELD_GID = 1


@dataclass
class RunResult:
    report: dict
    out_dir: Path | None
    scene: Scene
    frames_by_agent: dict[int, list[FrameBundle]]
    corruption_log: CorruptionLog
    alignment: AlignmentResult | None
    workers: dict[int, AgentWorker]
    round_rows: list[dict] = dc_field(default_factory=list)
    timings: dict = dc_field(default_factory=dict)


def generate_phase(cfg: ExperimentConfig):
    scene = build_scene(cfg.scene, feature_dim=cfg.feature_dim, seed=cfg.seed)
    intr = cfg.camera.intrinsics()
    resolution = (cfg.camera.height, cfg.camera.width)
    frames_by_agent: dict[int, list[FrameBundle]] = {}
    for agent, poses in sorted(cfg.agent_poses().items()):
        frames_by_agent[agent] = [
            render_frame(scene, pose, intr, resolution, agent_id=agent, t=t)
            for t, pose in enumerate(poses)]
    codebooks, corruption_log = corrupt_masks(frames_by_agent, scene,
                                              cfg.corruption_spec())
    return scene, frames_by_agent, codebooks, corruption_log


def align_phase(cfg: ExperimentConfig, frames_by_agent, codebooks) -> tuple[AlignmentResult | None, Bus]:
    """Fuse per-agent records, exchange clouds, run graph alignment.

    In global (non-instance) mode the aligned mask is simply the hit mask and
    no alignment runs.
    """
    align_bus = Bus(sorted(frames_by_agent), ChannelModel(
        success_rate=1.0, seed=derive_seed(cfg.seed, 8)))
    if not cfg.train.instance_level:
        for frames in frames_by_agent.values():
            for f in frames:
                f.aligned_masks = (f.depth > 0).astype(np.int64) * GLOBAL_FIELD_GID
        return None, align_bus

    a = cfg.align
    params = cfg.align_params()
    records_by_agent: dict[int, list[InstanceRecord]] = {}
    for agent, frames in sorted(frames_by_agent.items()):
        records_by_agent[agent] = fuse_frames(
            frames, codebooks[agent], coarse_iob=a.coarse_iob, fine_cos=a.fine_cos,
            fine_min_overlap=a.fine_min_overlap, voxel=a.voxel, tau=a.tau)

    # clouds transit the bus so the wire surface and byte accounting are real
    outboxes = {}
    for agent, records in sorted(records_by_agent.items()):
        box = []
        for rec in records:
            cloud = record_cloud(rec, frames_by_agent[agent], params)
            box.append(cloud_share(agent, BROADCAST, 0, CloudShareData(
                agent_id=agent, local_id=rec.local_id, confidence=rec.confidence,
                f_clip=rec.f_clip, f_caption=rec.f_caption, points=cloud)))
        outboxes[agent] = box
    inboxes = align_bus.exchange(outboxes, 0)
    for agent, msgs in inboxes.items():
        for msg in msgs:
            parse_cloud_share(msg)  # validates the wire path

    result = align_all(records_by_agent, frames_by_agent, codebooks, params)
    if not result.injective:
        log.warning("alignment left %d injectivity violations", len(result.violations))
    return result, align_bus


def _field_setup(cfg: ExperimentConfig, scene: Scene, alignment: AlignmentResult | None,
                 frames_by_agent) -> dict[int, dict[int, InstanceField]]:
    """Per-agent owned fields; AABBs are identical across agents by construction."""
    from .training import make_field

    arch = cfg.field_.arch()
    pad = cfg.field_.aabb_pad
    fields: dict[int, dict[int, InstanceField]] = {a: {} for a in frames_by_agent}
    if not cfg.train.instance_level:
        aabb = np.stack([scene.bounds[0] - pad, scene.bounds[1] + pad])
        for agent in sorted(frames_by_agent):
            fields[agent][GLOBAL_FIELD_GID] = make_field(
                GLOBAL_FIELD_GID, aabb, arch, cfg.seed, agent)
        return fields

    by_gid: dict[int, list[np.ndarray]] = {}
    owners: dict[int, set[int]] = {}
    for agent, records in sorted(alignment.records.items()):
        for rec in records:
            if rec.global_id is None:
                continue
            cloud = alignment.clouds.get((agent, rec.local_id))
            if cloud is None or not len(cloud):
                continue
            by_gid.setdefault(rec.global_id, []).append(cloud)
            owners.setdefault(rec.global_id, set()).add(agent)
    aabbs = {gid: points_aabb(np.vstack(clouds), pad=pad)
             for gid, clouds in by_gid.items()}
    for gid in sorted(owners):
        for agent in sorted(owners[gid]):
            fields[agent][gid] = make_field(gid, aabbs[gid], arch, cfg.seed, agent)
    return fields


def train_phase(cfg: ExperimentConfig, frames_by_agent, fields_by_agent,
                channel: ChannelModel, sequential: bool = False):
    params = cfg.train.params()
    agents = sorted(frames_by_agent)
    workers = {a: AgentWorker(a, len(agents), frames_by_agent[a], fields_by_agent[a],
                              params, cfg.seed) for a in agents}
    bus = Bus(agents, channel)
    inboxes: dict[int, list] = {a: [] for a in agents}
    rows: list[dict] = []

    def step(agent: int, rnd: int, inbox):
        return workers[agent].run_round(rnd, inbox)

    pool = None if sequential or len(agents) == 1 else ThreadPoolExecutor(len(agents))
    try:
        for rnd in range(params.rounds):
            t0 = time.perf_counter()
            if pool is None:
                results = {a: step(a, rnd, inboxes[a]) for a in agents}
            else:
                futures = {a: pool.submit(step, a, rnd, inboxes[a]) for a in agents}
                results = {a: futures[a].result() for a in agents}
            outboxes = {a: results[a][0] for a in agents}
            wall = time.perf_counter() - t0
            for a in agents:
                stats = results[a][1]
                bytes_out = sum(
                    len(serialize(m)) * (len(agents) - 1 if m.receiver == BROADCAST else 1)
                    for m in outboxes[a])
                bytes_in = sum(len(serialize(m)) for m in inboxes[a])
                rows.append({
                    "round": rnd, "agent_id": a,
                    "loss_occ": stats.loss_occ, "loss_depth": stats.loss_depth,
                    "loss_color": stats.loss_color, "loss_data": stats.loss_data,
                    "loss_con": stats.loss_con, "loss_rend": stats.loss_rend,
                    "rays": stats.rays, "shared_rays_in": stats.shared_rays_in,
                    "bytes_in": bytes_in, "bytes_out": bytes_out,
                    "wall_s": wall / len(agents)})
            inboxes = bus.exchange(outboxes, rnd)
    finally:
        if pool is not None:
            pool.shutdown()
    return workers, bus, rows


def eval_phase(cfg: ExperimentConfig, scene: Scene, workers, alignment):
    gt_pts, gt_iids, gt_cids = sample_scene_surface(
        scene, cfg.eval.gt_surface_density, seed=derive_seed(cfg.seed, 7))
    gt = SurfaceCloud(points=gt_pts, instance_ids=gt_iids.astype(np.int64),
                      class_ids=gt_cids.astype(np.int64), source="ground-truth")

    if cfg.train.instance_level and alignment is not None:
        class_of_gid = {
            gid: classify_features(clip, caption, scene.class_features)
            for gid, (clip, caption) in sorted(alignment.gid_features.items())}
    else:
        class_of_gid = {GLOBAL_FIELD_GID: 0}

    per_agent = {}
    recons = {}
    for agent in sorted(workers):
        recon, degenerate = extract_surface(
            workers[agent].fields, cfg.eval.surface_resolution, class_of_gid)
        recons[agent] = recon
        geo = geometric_metrics(recon, gt, cfg.eval.completion_threshold)
        entry = {
            "accuracy_cm": None if np.isnan(geo.accuracy_cm) else geo.accuracy_cm,
            "completion_cm": None if np.isinf(geo.completion_cm) else geo.completion_cm,
            "completion_ratio_pct": geo.completion_ratio_pct,
            "recon_points": len(recon),
            "degenerate_fields": degenerate,
            "miss": len(recon) == 0,
        }
        if cfg.train.instance_level:
            sem = semantic_metrics(recon, gt, cfg.eval.completion_threshold)
            entry["f_miou"] = sem.f_miou
            entry["f_macc"] = sem.f_macc
        per_agent[agent] = entry

    def mean_of(key):
        vals = [m[key] for m in per_agent.values() if m.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    mean = {k: mean_of(k) for k in
            ("accuracy_cm", "completion_cm", "completion_ratio_pct", "f_miou", "f_macc")}
    return per_agent, mean, gt, recons


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   sequential: bool = False, dump_frame_container: bool = False,
                   channel_override: float | None = None) -> RunResult:
    """Execute the three phases; optionally write all artifacts under out_dir."""
    timings = {}
    t0 = time.perf_counter()
    scene, frames_by_agent, codebooks, corruption_log = generate_phase(cfg)
    timings["generate_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    alignment, align_bus = align_phase(cfg, frames_by_agent, codebooks)
    timings["align_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fields_by_agent = _field_setup(cfg, scene, alignment, frames_by_agent)
    channel = cfg.channel_model(channel_override)
    workers, train_bus, round_rows = train_phase(cfg, frames_by_agent, fields_by_agent,
                                                 channel, sequential=sequential)
    timings["train_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    per_agent, mean, gt, recons = eval_phase(cfg, scene, workers, alignment)
    timings["eval_s"] = time.perf_counter() - t0

    report = {
        "seed": cfg.seed,
        "n_agents": len(frames_by_agent),
        "rounds": cfg.train.rounds,
        "instance_level": cfg.train.instance_level,
        "cross_rendering": cfg.train.cross_rendering,
        "strategy": cfg.train.strategy,
        "channel_success_rate": channel.success_rate,
        "alignment_injective": None if alignment is None else alignment.injective,
        "per_agent": {str(a): per_agent[a] for a in sorted(per_agent)},
        "mean": mean,
        "traffic": {
            "align": align_bus.traffic.summary(),
            "train": train_bus.traffic.summary(),
        },
    }

    result = RunResult(report=report, out_dir=None, scene=scene,
                       frames_by_agent=frames_by_agent,
                       corruption_log=corruption_log, alignment=alignment,
                       workers=workers, round_rows=round_rows, timings=timings)
    if out_dir is not None:
        result.out_dir = Path(out_dir)
        _write_outputs(cfg, result, gt, recons, align_bus, train_bus,
                       dump_frame_container)
    return result


def _write_outputs(cfg, result: RunResult, gt, recons, align_bus, train_bus,
                   dump_frame_container: bool) -> None:
    out = result.out_dir
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")

    (out / "metrics.json").write_text(
        json.dumps(json_ready(result.report), sort_keys=True, indent=2) + "\n")
    _write_metrics_csv(out / "metrics.csv", result.report)
    (out / "timings.json").write_text(
        json.dumps(result.timings, sort_keys=True, indent=2) + "\n")

    with open(out / "traffic.csv", "w") as fh:
        fh.write("phase,round,kind,sent_count,sent_bytes,delivered_count,delivered_bytes\n")
        for phase, bus in (("align", align_bus), ("train", train_bus)):
            body = bus.traffic.to_csv().splitlines()[1:]
            fh.writelines(f"{phase},{line}\n" for line in body)

    if result.round_rows:
        cols = list(result.round_rows[0])
        with open(out / "rounds.csv", "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in result.round_rows:
                fh.write(",".join(str(row[c]) for c in cols) + "\n")

    if result.alignment is not None:
        with open(out / "corrections.jsonl", "w") as fh:
            for action in result.alignment.actions:
                fh.write(json.dumps(json_ready(action.to_json()), sort_keys=True) + "\n")
        semantics = {
            "class_features": {
                str(cid): {"clip": clip.tolist(), "caption": caption.tolist()}
                for cid, (clip, caption) in sorted(result.scene.class_features.items())},
            "gid_features": {
                str(gid): {"clip": clip.tolist(), "caption": caption.tolist()}
                for gid, (clip, caption) in sorted(result.alignment.gid_features.items())},
            "records": {str(a): records_to_json(recs)
                        for a, recs in sorted(result.alignment.records.items())},
        }
        (out / "records.json").write_text(
            json.dumps(semantics, sort_keys=True, indent=2) + "\n")

    write_ply(out / "gt.ply", gt.points, gt.instance_ids, gt.class_ids)
    for agent, recon in sorted(recons.items()):
        write_ply(out / f"agent_{agent}.ply", recon.points,
                  recon.instance_ids, recon.class_ids)

    if dump_frame_container:
        for agent, frames in sorted(result.frames_by_agent.items()):
            write_frames(out / f"frames_agent_{agent}.omsf", frames)


def _write_metrics_csv(path: Path, report: dict) -> None:
    mean = report["mean"]
    cols = ["seed", "n_agents", "rounds", "instance_level", "cross_rendering",
            "channel_success_rate", "accuracy_cm", "completion_cm",
            "completion_ratio_pct", "f_miou", "f_macc"]
    vals = [report["seed"], report["n_agents"], report["rounds"],
            report["instance_level"], report["cross_rendering"],
            report["channel_success_rate"],
            mean["accuracy_cm"], mean["completion_cm"],
            mean["completion_ratio_pct"], mean["f_miou"], mean["f_macc"]]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        fh.write(",".join("" if v is None else str(v) for v in vals) + "\n")


# --- sweeps -------------------------------------------------------------------

ABLATION_CELLS = [
    {"instance_level": False, "cross_rendering": False},
    {"instance_level": False, "cross_rendering": True},
    {"instance_level": True, "cross_rendering": False},
    {"instance_level": True, "cross_rendering": True},
]


def with_train_overrides(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    new_train = dataclasses.replace(cfg.train, **kwargs)
    return dataclasses.replace(cfg, train=new_train)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return dataclasses.replace(cfg, seed=seed)


def run_sweep(cfg: ExperimentConfig, axis: str, out_dir: str | Path,
              sequential: bool = False) -> list[dict]:
    """Run the pipeline per axis value with shared seeds; one CSV row per cell."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []

    if axis == "comm_rate":
        rates = list(cfg.sweep.comm_rates)
        if not rates:
            raise ConfigError("sweep.comm_rates is empty")
        for rate in rates:
            cell = {"comm_rate": rate}
            try:
                res = run_experiment(cfg, out / f"rate_{int(round(rate * 100))}",
                                     sequential=sequential, channel_override=rate)
                cell.update(_row_from(res.report))
                cell["status"] = "ok"
            except Exception as e:  # cell failures must not kill the sweep
                log.exception("comm_rate cell %.2f failed", rate)
                cell["status"] = f"error: {e}"
            rows.append(cell)
        _write_sweep_csv(out / "sweep_comm_rate.csv", rows)
        return rows

    if axis == "ablation":
        for cell_cfg in ABLATION_CELLS:
            name = (f"inst_{'on' if cell_cfg['instance_level'] else 'off'}"
                    f"_cross_{'on' if cell_cfg['cross_rendering'] else 'off'}")
            cell = dict(cell_cfg)
            try:
                res = run_experiment(with_train_overrides(cfg, **cell_cfg),
                                     out / name, sequential=sequential)
                cell.update(_row_from(res.report))
                cell["train_s"] = res.timings["train_s"]
                cell["status"] = "ok"
            except Exception as e:
                log.exception("ablation cell %s failed", name)
                cell["status"] = f"error: {e}"
            rows.append(cell)
        _write_sweep_csv(out / "sweep_ablation.csv", rows)
        return rows

    raise ConfigError(f"unknown sweep axis {axis!r}; use comm_rate or ablation")


def _row_from(report: dict) -> dict:
    mean = report["mean"]
    return {
        "accuracy_cm": mean["accuracy_cm"],
        "completion_cm": mean["completion_cm"],
        "completion_ratio_pct": mean["completion_ratio_pct"],
        "f_miou": mean["f_miou"], "f_macc": mean["f_macc"],
        "param_bytes": report["traffic"]["train"]["param"]["sent_bytes"],
        "ray_bytes": report["traffic"]["train"]["ray"]["sent_bytes"],
    }


def _write_sweep_csv(path: Path, rows: list[dict]) -> None:
    cols: list[str] = []
    for row in rows:
        for key in row:
            if key not in cols:
                cols.append(key)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(c, "")) for c in cols) + "\n")
