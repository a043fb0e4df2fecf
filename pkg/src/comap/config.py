"""Experiment configuration: YAML schema, strict validation, and builders
for the per-module parameter objects. Unknown fields are rejected by name."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .align import AlignParams
from .corruption import CorruptionSpec
from .errors import ConfigError
from .field import FieldArch
from .geometry import Intrinsics, orbit_poses
from .losses import LossWeights
from .netsim import ChannelModel
from .training import TrainParams, derive_seed


def _check_keys(data: dict, allowed: set[str], path: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be a mapping")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown field '{path}.{unknown[0]}'")


def _build(cls, data: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(data, names, path)
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid '{path}' section: {e}") from e


@dataclass(frozen=True)
class CameraSection:
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ConfigError("camera resolution must be at least 16x16")
        if not 10.0 <= self.fov_deg <= 170.0:
            raise ConfigError("fov_deg must lie in [10, 170]")

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.fov_deg)


@dataclass(frozen=True)
class CorruptionSection:
    semantic_error_rate: float = 0.0
    overseg_rate: float = 0.0
    underseg_rate: float = 0.0
    viewpoint_loss_rate: float = 0.0
    feature_noise_deg: float = 2.0
    overseg_feature_angle_deg: float = 15.0
    border_band: float = 0.1
    underseg_max_gap: float = 0.5


@dataclass(frozen=True)
class AlignSection:
    voxel: float = 0.05
    tau: float = 0.01
    iou_threshold: float = 0.25
    iob_threshold: float = 0.5
    overseg_cos: float = 0.8
    center_margin: float = 0.1
    min_split_pixels: int = 20
    coarse_iob: float = 0.3
    fine_cos: float = 0.9
    fine_min_overlap: float = 0.05


@dataclass(frozen=True)
class FieldSection:
    n_freqs: int = 6
    hidden_layers: int = 2
    width: int = 32
    aabb_pad: float = 0.05

    def arch(self) -> FieldArch:
        return FieldArch(n_freqs=self.n_freqs, hidden_layers=self.hidden_layers,
                         width=self.width)


@dataclass(frozen=True)
class TrainSection:
    rounds: int = 300
    rays_per_round: int = 1024
    shared_rays_per_peer: int = 256
    samples_per_ray: int = 32
    lr: float = 1e-3
    strategy: str = "penalty-consensus"
    lambda_occ: float = 1.0
    lambda_depth: float = 1.0
    lambda_color: float = 1.0
    rho_con: float = 0.1
    rho_rend: float = 1.0
    instance_level: bool = True
    cross_rendering: bool = True
    octant_min_hits: int = 10

    def params(self) -> TrainParams:
        return TrainParams(
            rounds=self.rounds, rays_per_round=self.rays_per_round,
            shared_rays_per_peer=self.shared_rays_per_peer,
            samples_per_ray=self.samples_per_ray, lr=self.lr,
            strategy=self.strategy, cross_rendering=self.cross_rendering,
            octant_min_hits=self.octant_min_hits,
            weights=LossWeights(
                lambda_occ=self.lambda_occ, lambda_depth=self.lambda_depth,
                lambda_color=self.lambda_color, rho_con=self.rho_con,
                rho_rend=self.rho_rend))


@dataclass(frozen=True)
class ChannelSection:
    success_rate: float = 1.0
    latency_rounds: int = 0


@dataclass(frozen=True)
class EvalSection:
    surface_resolution: int = 24
    completion_threshold: float = 0.05
    gt_surface_density: float = 10000.0
    retrieval_w1: float = 0.5
    retrieval_w2: float = 0.5


@dataclass(frozen=True)
class SweepSection:
    comm_rates: tuple = (1.0, 0.8, 0.5, 0.2)
    seeds: tuple = (0, 1, 2)


_SCENE_KEYS = {"bounds", "primitives"}
_PRIM_KEYS = {"kind", "center", "rotation_deg", "albedo", "class_id",
              "radius", "height", "size"}
_AGENT_KEYS = {"trajectory"}
_ORBIT_KEYS = {"type", "center", "radius", "height", "azimuth_deg", "frames"}
_POSES_KEYS = {"type", "poses"}


@dataclass
class ExperimentConfig:
    scene: dict
    agents: list[dict]
    seed: int = 0
    feature_dim: int = 32
    camera: CameraSection = field(default_factory=CameraSection)
    corruption: CorruptionSection = field(default_factory=CorruptionSection)
    align: AlignSection = field(default_factory=AlignSection)
    field_: FieldSection = field(default_factory=FieldSection)
    train: TrainSection = field(default_factory=TrainSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        allowed = {"seed", "feature_dim", "scene", "camera", "agents", "corruption",
                   "align", "field", "train", "channel", "eval", "sweep"}
        _check_keys(data, allowed, "config")
        if "scene" not in data:
            raise ConfigError("config needs a 'scene' section")
        if "agents" not in data or not data["agents"]:
            raise ConfigError("config needs a non-empty 'agents' list")

        scene = data["scene"]
        _check_keys(scene, _SCENE_KEYS, "scene")
        for i, prim in enumerate(scene.get("primitives", [])):
            _check_keys(prim, _PRIM_KEYS, f"scene.primitives[{i}]")
        agents = data["agents"]
        for i, agent in enumerate(agents):
            _check_keys(agent, _AGENT_KEYS, f"agents[{i}]")
            traj = agent.get("trajectory", {})
            kind = traj.get("type")
            if kind == "orbit":
                _check_keys(traj, _ORBIT_KEYS, f"agents[{i}].trajectory")
            elif kind == "poses":
                _check_keys(traj, _POSES_KEYS, f"agents[{i}].trajectory")
            else:
                raise ConfigError(f"agents[{i}].trajectory.type must be orbit or poses")

        def section(name, klass):
            return _build(klass, data.get(name, {}), name)

        return cls(
            scene=scene, agents=agents,
            seed=int(data.get("seed", 0)),
            feature_dim=int(data.get("feature_dim", 32)),
            camera=section("camera", CameraSection),
            corruption=section("corruption", CorruptionSection),
            align=section("align", AlignSection),
            field_=section("field", FieldSection),
            train=section("train", TrainSection),
            channel=section("channel", ChannelSection),
            eval=section("eval", EvalSection),
            sweep=section("sweep", SweepSection),
        )

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed, "feature_dim": self.feature_dim,
            "scene": self.scene, "agents": self.agents,
            "camera": dataclasses.asdict(self.camera),
            "corruption": dataclasses.asdict(self.corruption),
            "align": dataclasses.asdict(self.align),
            "field": dataclasses.asdict(self.field_),
            "train": dataclasses.asdict(self.train),
            "channel": dataclasses.asdict(self.channel),
            "eval": dataclasses.asdict(self.eval),
            "sweep": {"comm_rates": list(self.sweep.comm_rates),
                      "seeds": list(self.sweep.seeds)},
        }
        return out

    # -- derived parameter objects --

    def corruption_spec(self) -> CorruptionSpec:
        c = self.corruption
        return CorruptionSpec(
            semantic_error_rate=c.semantic_error_rate, overseg_rate=c.overseg_rate,
            underseg_rate=c.underseg_rate, viewpoint_loss_rate=c.viewpoint_loss_rate,
            rng_seed=derive_seed(self.seed, 5),
            feature_noise_deg=c.feature_noise_deg,
            overseg_feature_angle_deg=c.overseg_feature_angle_deg,
            border_band=c.border_band, underseg_max_gap=c.underseg_max_gap)

    def align_params(self) -> AlignParams:
        a = self.align
        return AlignParams(voxel=a.voxel, tau=a.tau, iou_threshold=a.iou_threshold,
                           iob_threshold=a.iob_threshold, overseg_cos=a.overseg_cos,
                           center_margin=a.center_margin,
                           min_split_pixels=a.min_split_pixels)

    def channel_model(self, success_rate: float | None = None) -> ChannelModel:
        rate = self.channel.success_rate if success_rate is None else success_rate
        return ChannelModel(success_rate=rate, seed=derive_seed(self.seed, 6),
                            latency_rounds=self.channel.latency_rounds)

    def agent_poses(self) -> dict[int, list[np.ndarray]]:
        poses: dict[int, list[np.ndarray]] = {}
        for idx, agent in enumerate(self.agents):
            traj = agent["trajectory"]
            if traj["type"] == "orbit":
                poses[idx] = orbit_poses(
                    center=np.asarray(traj.get("center", [0.0, 0.0, 0.0]), dtype=np.float64),
                    radius=float(traj.get("radius", 1.0)),
                    height=float(traj.get("height", 0.5)),
                    azimuth_deg=tuple(traj.get("azimuth_deg", [0.0, 360.0])),
                    n_frames=int(traj.get("frames", 8)))
            else:
                mats = [np.asarray(p, dtype=np.float64).reshape(4, 4)
                        for p in traj["poses"]]
                if not mats:
                    raise ConfigError("trajectory.poses must list at least one pose")
                poses[idx] = mats
        return poses


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not contain a config mapping")
    return ExperimentConfig.from_dict(data)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def bundled_config_path(name: str) -> Path:
    """Path of a packaged example config (e.g. 'two_boxes')."""
    root = Path(__file__).parent / "configs"
    path = root / f"{name}.yaml"
    if not path.exists():
        available = sorted(p.stem for p in root.glob("*.yaml"))
        raise ConfigError(f"no bundled config {name!r}; available: {available}")
    return path
