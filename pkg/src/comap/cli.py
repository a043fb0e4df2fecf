"""Experiment runner CLI: run, sweep, retrieve."""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from .config import ExperimentConfig, load_config
from .errors import ConfigError
from .pipeline import run_experiment, run_sweep

log = logging.getLogger("comap")


def _setup_logging() -> None:
    level = os.environ.get("COMAP_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)-7s %(name)s %(message)s")


def _load(config_path: str, seed, agents, rounds) -> ExperimentConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = int(seed)
    if agents is not None:
        if agents > len(cfg.agents):
            raise ConfigError(
                f"--agents {agents} exceeds the {len(cfg.agents)} trajectories configured")
        cfg.agents = cfg.agents[:agents]
    if rounds is not None:
        import dataclasses
        cfg.train = dataclasses.replace(cfg.train, rounds=int(rounds))
    return cfg


@click.group()
def main() -> None:
    """Desk-scale multi-agent collaborative implicit mapping simulator."""
    _setup_logging()


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--agents", type=int, default=None)
@click.option("--rounds", type=int, default=None)
@click.option("--sequential", is_flag=True, help="Force strictly sequential rounds.")
@click.option("--dump-frames", is_flag=True, help="Also write raw frame containers.")
def run(config_path, out_dir, seed, agents, rounds, sequential, dump_frames) -> None:
    """Run generate -> align -> co-train -> evaluate and write all artifacts."""
    try:
        cfg = _load(config_path, seed, agents, rounds)
        result = run_experiment(cfg, out_dir, sequential=sequential,
                                dump_frame_container=dump_frames)
    except Exception as e:
        _fail(out_dir, e)
    mean = result.report["mean"]
    click.echo(f"run complete: {out_dir}")
    for key in ("accuracy_cm", "completion_cm", "completion_ratio_pct",
                "f_miou", "f_macc"):
        if mean.get(key) is not None:
            click.echo(f"  {key}: {mean[key]:.3f}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--axis", required=True, type=click.Choice(["comm_rate", "ablation"]))
@click.option("--seed", type=int, default=None)
@click.option("--sequential", is_flag=True)
def sweep(config_path, out_dir, axis, seed, sequential) -> None:
    """Comparative sweep over communication rates or the ablation grid."""
    try:
        cfg = _load(config_path, seed, None, None)
        rows = run_sweep(cfg, axis, out_dir, sequential=sequential)
    except Exception as e:
        _fail(out_dir, e)
    click.echo(f"sweep complete: {len(rows)} cells -> {out_dir}")
    for row in rows:
        click.echo(f"  {row}")


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--query-class", required=True, type=int)
@click.option("--weights", default="0.5,0.5", show_default=True)
@click.option("--perturb-deg", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--top", type=int, default=5)
def retrieve(run_dir, query_class, weights, perturb_deg, seed, top) -> None:
    """Rank instances of a finished run against a synthesized class query."""
    from .corruption import perturb_unit
    from .evalkit import retrieve as retrieve_op
    from .percept import InstanceRecord

    try:
        w1, w2 = (float(x) for x in weights.split(","))
        semantics = json.loads((Path(run_dir) / "records.json").read_text())
        cls = semantics["class_features"].get(str(query_class))
        if cls is None:
            raise ConfigError(f"class {query_class} not present in this run")
        rng = np.random.default_rng(seed)
        q_clip = perturb_unit(np.array(cls["clip"]), perturb_deg, rng)
        q_caption = perturb_unit(np.array(cls["caption"]), perturb_deg, rng)
        records = []
        for agent, recs in semantics["records"].items():
            for r in recs:
                records.append(InstanceRecord(
                    agent_id=int(agent), local_id=r["local_id"],
                    frame_masks=[tuple(fm) for fm in r["frame_masks"]],
                    f_clip=np.array(r["f_clip"]), f_caption=np.array(r["f_caption"]),
                    confidence=r["confidence"], global_id=r["global_id"]))
        hits = retrieve_op((q_clip, q_caption), records, (w1, w2))
    except Exception as e:
        _fail(None, e)
    for hit in hits[:top]:
        click.echo(f"  instance {hit.global_id}: score {hit.score:.4f}")


def _fail(out_dir, exc) -> None:
    log.error("failed: %s", exc, exc_info=True)
    if out_dir is not None:
        try:
            path = Path(out_dir)
            path.mkdir(parents=True, exist_ok=True)
            (path / "error.json").write_text(json.dumps(
                {"error": type(exc).__name__, "message": str(exc)}, indent=2) + "\n")
        except OSError:
            pass
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


if __name__ == "__main__":
    main()
