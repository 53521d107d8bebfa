"""Experiment configuration, scenario runners and map reporting.

Four scenarios share one flat configuration record:

* ``single_agent``  one mapper trained on one agent's path with a KL-to-prior loss;
* ``kl_sweep``      the single-agent run repeated over several ``kl_weight`` values;
* ``online``        the path streamed in communication rounds with CDR or DR retention;
* ``distributed``   every agent trained with the consensus optimizer, states exchanged
  through the peer protocol (in-process simulation or TCP between OS processes).

All randomness derives from ``Stream(seed)`` so a (config, seed) pair reproduces
every artifact exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml
from scipy import ndimage, stats

from . import protocol
from .autodiff import Stream
from .consensus import STRATEGIES, ConsensusAgent, ConsensusConfig, consensus_residual, validation_loss, write_metrics
from .losses import LossConfig, inv_softplus
from .model import MapperNet, StateVector, forward_sample, init_mapper, load_checkpoint, predict_with_uncertainty, save_checkpoint
from .training import TrainConfig, make_optimizer, train_local
from .world import (
    AgentPath,
    Floorplan,
    PointSet,
    SensorConfig,
    default_paths,
    generate_floorplan,
    grid_centers,
    kde_density,
    load_floorplan,
    retained,
    stream_segments,
)

log = logging.getLogger(__name__)

SCENARIOS = ("single_agent", "kl_sweep", "online", "distributed")
RETENTION = ("cdr", "dr")
TRANSPORTS = ("sim", "socket")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class _GeometricPenalty:
    def __init__(self, growth: float):
        self.growth = growth

    def __call__(self, round_no: int) -> float:
        return self.growth**round_no


@dataclass
class ExperimentConfig:
    scenario: str = "single_agent"
    seed: int = 0
    out: str = "runs/default"

    # world
    world_seed: int = 0
    size_m: float = 20.0
    resolution: float = 0.05
    floorplan: str | None = None
    paths: list[str] | None = None
    n_agents: int = 7
    agent: int = 0
    n_beams: int = 90
    max_range: float = 4.0
    noise_sigma: float = 0.01
    free_samples: int = 4
    scan_stride: float = 0.5
    holdout: float = 0.1

    # model
    width: int = 256
    depth: int = 4
    omega: float = 30.0

    # training (iters per segment in online runs; distributed runs use round_iters)
    iters: int = 1500
    batch_size: int = 1024
    optimizer: str = "adam"
    lr: float = 3e-3
    kl_weight: float = 5e-3
    kl_reduction: str = "mean"
    prior_sigma: float = 1.0
    kl_weights: list[float] = field(default_factory=lambda: [1e-4, 5e-3, 5e-1])

    # online
    comm_rounds: int = 18
    retention: str = "cdr"
    map_every: int = 1

    # distributed
    rounds: int = 20
    round_iters: int = 30
    w_mu: float = 1.0
    w_rho: float = 1.0
    lr_mu: float = 3e-3
    lr_rho: float = 3e-3
    dual_step_mu: float | None = None
    dual_step_rho: float | None = None
    # penalty weights and dual steps scale by penalty_growth ** round
    penalty_growth: float = 1.0
    strategy: str = "split_kl"
    rho_pred_grad: bool = True
    transport: str = "sim"
    base_port: int = 0
    host: str = "127.0.0.1"
    timeout: float = 60.0
    max_skew: int | None = None
    val_every: int = 1
    val_passes: int = 10

    # evaluation
    grid: int = 256
    passes: int = 50
    explored_radius: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.scenario in SCENARIOS, f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        need(self.retention in RETENTION, f"retention must be one of {RETENTION}")
        need(self.transport in TRANSPORTS, f"transport must be one of {TRANSPORTS}")
        need(self.strategy in STRATEGIES, f"strategy must be one of {STRATEGIES}")
        need(self.kl_reduction in ("sum", "mean"), "kl_reduction must be sum or mean")
        need(self.optimizer in ("sgd", "adam"), "optimizer must be sgd or adam")
        need(self.passes >= 2, "passes must be >= 2")
        need(self.val_passes >= 2, "val_passes must be >= 2")
        need(self.n_agents >= 1, "n_agents must be >= 1")
        need(0 <= self.agent < self.n_agents, "agent must index one of the n_agents paths")
        need(0.0 <= self.holdout < 1.0, "holdout must be in [0, 1)")
        need(self.n_beams >= 1 and self.max_range > 0, "sensor needs >= 1 beam and a positive range")
        need(self.free_samples >= 0, "free_samples must be >= 0")
        need(self.width >= 1 and self.depth >= 0 and self.grid >= 1, "width, depth and grid must be positive")
        need(self.iters >= 1 and self.rounds >= 1 and self.comm_rounds >= 1, "iters and rounds must be >= 1")
        need(self.lr > 0 and self.lr_mu > 0 and self.lr_rho > 0, "learning rates must be positive")
        need(self.w_mu > 0 and self.w_rho > 0, "w_mu and w_rho must be positive")
        need(self.round_iters >= 1, "round_iters must be >= 1")
        need(self.penalty_growth > 0, "penalty_growth must be positive")
        need(self.kl_weight >= 0 and all(k >= 0 for k in self.kl_weights), "kl weights must be non-negative")
        need(self.prior_sigma > 0, "prior_sigma must be positive")
        need(self.explored_radius >= 0, "explored_radius must be >= 0")
        need((self.floorplan is None) == (self.paths is None), "floorplan and paths must be given together")
        if self.scenario == "distributed":
            need(self.n_agents >= 2, "distributed runs need at least 2 agents")

    @classmethod
    def from_dict(cls, data: dict[str, Any], **overrides) -> "ExperimentConfig":
        merged = {**(data or {}), **{k: v for k, v in overrides.items() if v is not None}}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(merged) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_yaml(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data or {}, **overrides)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_yaml(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def sensor(self) -> SensorConfig:
        return SensorConfig(self.n_beams, self.max_range, self.noise_sigma, self.free_samples)

    def loss_config(self, kl_weight: float | None = None) -> LossConfig:
        return LossConfig(
            kl_weight=self.kl_weight if kl_weight is None else kl_weight,
            prior_rho=float(inv_softplus(self.prior_sigma)),
            kl_reduction=self.kl_reduction,
        )

    def consensus_config(self) -> ConsensusConfig:
        return ConsensusConfig(
            w_mu=self.w_mu,
            w_rho=self.w_rho,
            iters=self.round_iters,
            lr_mu=self.lr_mu,
            lr_rho=self.lr_rho,
            rounds=self.rounds,
            dual_step_mu=self.dual_step_mu,
            dual_step_rho=self.dual_step_rho,
            batch_size=self.batch_size,
            strategy=self.strategy,
            optimizer=self.optimizer,
            rho_pred_grad=self.rho_pred_grad,
            penalty_schedule=None if self.penalty_growth == 1.0 else _GeometricPenalty(self.penalty_growth),
        )


# ----------------------------------------------------------------------------
# rasters


@dataclass
class MapRaster:
    """Grid of values over [-1, 1]^2; ``cells[i, j]`` sits at ``(x=c[j], y=c[i])`` with row 0 at y = -1."""

    cells: np.ndarray
    kind: str

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.ndim != 2:
            raise ValueError("raster cells must be 2-D")
        if self.kind not in ("mean", "std", "density", "sample"):
            raise ValueError(f"unknown raster kind {self.kind!r}")
        if not np.all(np.isfinite(self.cells)):
            raise ValueError("raster cells must be finite")
        if self.kind in ("mean", "sample") and (self.cells.min(initial=0.0) < 0 or self.cells.max(initial=0.0) > 1):
            raise ValueError("probability raster outside [0, 1]")
        if self.kind in ("std", "density") and self.cells.min(initial=0.0) < 0:
            raise ValueError(f"{self.kind} raster must be non-negative")

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]


def raster_export(raster: MapRaster, path: str | Path) -> dict[str, Path]:
    """Write ``<path>.pgm`` (16-bit, min/max scaled, north up), ``<path>.csv`` and ``<path>.json``."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    lo, hi = float(raster.cells.min()), float(raster.cells.max())
    span = hi - lo
    scaled = np.zeros(raster.cells.shape) if span == 0 else (raster.cells - lo) / span
    img = np.round(np.flipud(scaled) * 65535).astype(">u2")
    pgm = base.with_suffix(".pgm")
    with open(pgm, "wb") as fh:
        fh.write(f"P5\n{raster.width} {raster.height}\n65535\n".encode("ascii"))
        fh.write(img.tobytes())
    csv_path = base.with_suffix(".csv")
    np.savetxt(csv_path, raster.cells, delimiter=",", fmt="%.17g")
    meta = base.with_suffix(".json")
    meta.write_text(
        json.dumps(
            {"kind": raster.kind, "width": raster.width, "height": raster.height, "min": lo, "max": hi, "origin": "lower-left"},
            indent=2,
        )
    )
    return {"pgm": pgm, "csv": csv_path, "json": meta}


def read_raster_csv(path: str | Path, kind: str) -> MapRaster:
    return MapRaster(np.loadtxt(path, delimiter=",", ndmin=2), kind)


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary 16-bit PGM written by :func:`raster_export` (rows top to bottom)."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(parts[4], dtype=dtype, count=w * h).reshape(h, w)


# ----------------------------------------------------------------------------
# world and data


@dataclass
class World:
    floorplan: Floorplan
    paths: list[AgentPath]


def build_world(cfg: ExperimentConfig) -> World:
    if cfg.floorplan is not None:
        fp = load_floorplan(cfg.floorplan, cfg.resolution)
        paths = [AgentPath.from_csv(p, cfg.scan_stride) for p in cfg.paths]
        for p in paths:
            p.validate(fp)
    else:
        layout = generate_floorplan(cfg.world_seed, cfg.size_m, cfg.resolution)
        fp = layout.floorplan
        paths = default_paths(layout, cfg.n_agents, seed=cfg.world_seed, scan_stride=cfg.scan_stride)
    if len(paths) < cfg.n_agents:
        raise ConfigError(f"{cfg.n_agents} agents configured but only {len(paths)} paths available")
    return World(fp, paths[: cfg.n_agents])


@dataclass
class Segment:
    train: PointSet
    holdout: PointSet


def agent_segments(cfg: ExperimentConfig, world: World, agent: int, n_segments: int) -> list[Segment]:
    """The agent's path data cut into ``n_segments`` arc-length pieces, each split train/holdout."""
    root = Stream(cfg.seed)
    try:
        pieces = stream_segments(world.paths[agent], world.floorplan, n_segments, cfg.sensor, root.child("sensor", agent))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = []
    for k, pts in enumerate(pieces):
        train, hold = pts.split(cfg.holdout, root.child("split", agent, k))
        out.append(Segment(train, hold))
    return out


def eval_coords(grid: int) -> np.ndarray:
    c = grid_centers(grid)
    xs, ys = np.meshgrid(c, c)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def explored_mask(points: PointSet, grid: int, radius: int = 2) -> np.ndarray:
    """Cells with a training point within ``radius`` cells (square neighbourhood)."""
    hist, _, _ = np.histogram2d(points.xy[:, 1], points.xy[:, 0], bins=grid, range=[[-1, 1], [-1, 1]])
    occupied = hist > 0
    if radius == 0:
        return occupied
    return ndimage.binary_dilation(occupied, structure=np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool))


def free_mask(fp: Floorplan, grid: int) -> np.ndarray:
    return ~fp.wall_mask_on(eval_coords(grid)).reshape(grid, grid)


def std_summary(std: np.ndarray, explored: np.ndarray, free: np.ndarray) -> dict[str, float]:
    e = std[free & explored]
    u = std[free & ~explored]
    e_mean = float(e.mean()) if e.size else float("nan")
    u_mean = float(u.mean()) if u.size else float("nan")
    return {
        "std_explored": e_mean,
        "std_unexplored": u_mean,
        "std_ratio": u_mean / e_mean if e.size and u.size and e_mean > 0 else float("nan"),
        "std_global": float(std.mean()),
        "explored_cells": int((free & explored).sum()),
        "unexplored_cells": int((free & ~explored).sum()),
    }


@dataclass
class Maps:
    mean: np.ndarray
    std: np.ndarray
    sample: np.ndarray | None = None


def predict_maps(net: MapperNet, grid: int, passes: int, stream: Stream, with_sample: bool = False) -> Maps:
    uv = eval_coords(grid)
    mean, std = predict_with_uncertainty(net, uv, passes, stream.child("passes"))
    sample = None
    if with_sample:
        sample = np.concatenate(
            [forward_sample(net, uv[i : i + 8192], stream.child("single")).data[:, 0] for i in range(0, len(uv), 8192)]
        ).reshape(grid, grid)
    return Maps(mean.reshape(grid, grid), std.reshape(grid, grid), sample)


def export_maps(maps: Maps, out: Path, prefix: str = "") -> dict[str, str]:
    files = {}
    for kind, arr in (("mean", maps.mean), ("std", maps.std), ("sample", maps.sample)):
        if arr is not None:
            raster_export(MapRaster(arr, kind), out / f"{prefix}{kind}")
            files[kind] = str(out / f"{prefix}{kind}.csv")
    return files


def _write_rows(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("")
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _prepare_out(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    path = Path(out if out is not None else cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    cfg.to_yaml(path / "config.yaml")
    return path


def _write_summary(out: Path, summary: dict) -> None:
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))


# ----------------------------------------------------------------------------
# single agent, sweep and online learning


@dataclass
class SegmentRun:
    net: MapperNet
    rows: list[dict]
    train_points: PointSet
    holdout: PointSet
    val_losses: list[float]


def train_segments(
    cfg: ExperimentConfig,
    segments: Sequence[Segment],
    retention: str,
    kl_weight: float | None = None,
    on_round=None,
) -> SegmentRun:
    """Train one mapper through the segments, ``cfg.iters`` iterations after each arrives.

    The optimizer state carries over between rounds. ``on_round(k, net, seen)`` is
    called after every round with the training points seen so far.
    """
    root = Stream(cfg.seed)
    net = init_mapper(root.child("init"), cfg.width, cfg.depth, cfg.omega)
    opt = make_optimizer(cfg.optimizer, net.parameters(), cfg.lr)
    loss_cfg = cfg.loss_config(kl_weight)
    train_cfg = TrainConfig(cfg.iters, cfg.lr, cfg.batch_size, cfg.optimizer)
    trains = [s.train for s in segments]
    holdout = PointSet.concat([s.holdout for s in segments])
    rows: list[dict] = []
    vals: list[float] = []
    for k in range(len(segments)):
        data = retained(trains, k, retention)
        if len(data) == 0:
            raise ConfigError(f"round {k} has no training points")
        recs = train_local(net, data, loss_cfg, train_cfg, root.child("train", cfg.agent, k), optimizer=opt)
        for r in recs:
            rows.append({"round": k, **r})
        if on_round is not None:
            on_round(k, net, PointSet.concat(trains[: k + 1]))
    if len(holdout):
        vals.append(validation_loss(net, holdout, cfg.passes, root.child("validation")))
    return SegmentRun(net, rows, PointSet.concat(trains), holdout, vals)


def _map_report(cfg: ExperimentConfig, world: World, net: MapperNet, points: PointSet, stream: Stream, with_sample: bool) -> tuple[Maps, dict]:
    maps = predict_maps(net, cfg.grid, cfg.passes, stream, with_sample)
    summary = std_summary(maps.std, explored_mask(points, cfg.grid, cfg.explored_radius), free_mask(world.floorplan, cfg.grid))
    return maps, summary


def _check_data(segments: Sequence[Segment]) -> None:
    if sum(len(s.train) for s in segments) == 0:
        raise ConfigError("the configured path produces an empty training set")


def run_single_agent(cfg: ExperimentConfig, out: str | Path | None = None, world: World | None = None) -> dict:
    """Train one agent on its own data; write sample/mean/std maps, metrics, checkpoint."""
    world = world or build_world(cfg)
    segments = agent_segments(cfg, world, cfg.agent, 1)
    _check_data(segments)
    outp = _prepare_out(cfg, out)
    run = train_segments(cfg, segments, "cdr")
    maps, summary = _map_report(cfg, world, run.net, run.train_points, Stream(cfg.seed).child("maps"), True)
    files = export_maps(maps, outp)
    _write_rows(run.rows, outp / "metrics.csv")
    save_checkpoint(run.net, outp / "checkpoint.npz", {"scenario": "single_agent", "seed": cfg.seed})
    summary.update(validation_loss=run.val_losses[-1] if run.val_losses else float("nan"), train_points=len(run.train_points))
    _write_summary(outp, summary)
    return {"out": str(outp), "summary": summary, "maps": maps, "net": run.net, "files": files}


def run_kl_sweep(cfg: ExperimentConfig, out: str | Path | None = None, world: World | None = None) -> dict:
    """Repeat the single-agent run for every value in ``cfg.kl_weights`` on shared data and seed."""
    world = world or build_world(cfg)
    outp = _prepare_out(cfg, out)
    table = []
    results = {}
    for kw in cfg.kl_weights:
        sub = cfg.replace(kl_weight=float(kw), scenario="single_agent")
        res = run_single_agent(sub, outp / f"kl_{kw:g}", world)
        results[float(kw)] = res
        table.append({"kl_weight": float(kw), **res["summary"]})
    _write_rows(table, outp / "sweep.csv")
    _write_summary(outp, {"sweep": table})
    return {"out": str(outp), "table": table, "runs": results}


def run_online(cfg: ExperimentConfig, out: str | Path | None = None, world: World | None = None) -> dict:
    """Stream the path in ``comm_rounds`` segments, training after each under the retention policy."""
    world = world or build_world(cfg)
    segments = agent_segments(cfg, world, cfg.agent, cfg.comm_rounds)
    _check_data(segments)
    outp = _prepare_out(cfg, out)
    map_stream = Stream(cfg.seed).child("maps")
    per_round = []

    def on_round(k, net, seen):
        last = k == cfg.comm_rounds - 1
        if last or (cfg.map_every and (k + 1) % cfg.map_every == 0):
            maps, summ = _map_report(cfg, world, net, seen, map_stream.child("round", k), False)
            export_maps(maps, outp / f"cr_{k + 1:02d}")
            per_round.append({"round": k + 1, **summ})

    run = train_segments(cfg, segments, cfg.retention, on_round=on_round)
    _write_rows(run.rows, outp / "metrics.csv")
    _write_rows(per_round, outp / "rounds.csv")
    save_checkpoint(run.net, outp / "checkpoint.npz", {"scenario": "online", "seed": cfg.seed, "retention": cfg.retention})
    summary = {
        "retention": cfg.retention,
        "comm_rounds": cfg.comm_rounds,
        "validation_loss": run.val_losses[-1] if run.val_losses else float("nan"),
        **(per_round[-1] if per_round else {}),
    }
    _write_summary(outp, summary)
    return {"out": str(outp), "summary": summary, "net": run.net, "rows": run.rows}


# ----------------------------------------------------------------------------
# distributed


def make_agent(cfg: ExperimentConfig, world: World, agent: int) -> ConsensusAgent:
    root = Stream(cfg.seed)
    seg = agent_segments(cfg, world, agent, 1)[0]
    if len(seg.train) == 0:
        raise ConfigError(f"agent {agent} has no training points")
    net = init_mapper(root.child("init"), cfg.width, cfg.depth, cfg.omega)
    return ConsensusAgent(agent, net, seg.train, cfg.consensus_config(), root.child("agent", agent), seg.holdout, cfg.val_passes)


class _ValidatedAgent:
    """Wraps an agent's node update with the configured validation cadence."""

    def __init__(self, agent: ConsensusAgent, val_every: int):
        self.agent = agent
        self.val_every = val_every

    def __call__(self, state: StateVector, peers) -> StateVector:
        a = self.agent
        due = self.val_every > 0 and ((a.round + 1) % self.val_every == 0 or a.round + 1 == a.cfg.rounds)
        holdout = a.holdout
        if not due:
            a.holdout = None
        try:
            return a.node_update(state, peers)
        finally:
            a.holdout = holdout


def consensus_net(template: MapperNet, states: Sequence[StateVector]) -> MapperNet:
    """A mapper holding the element-wise mean of the agents' states."""
    net = template.copy()
    mu = np.mean(np.stack([s.mu_block for s in states]), axis=0)
    rho = np.mean(np.stack([s.rho_block for s in states]), axis=0)
    net.load_state(StateVector(mu, rho, states[0].fingerprint))
    return net


def _run_sim(cfg: ExperimentConfig, agents: list[ConsensusAgent]) -> list[StateVector]:
    updates = [_ValidatedAgent(a, cfg.val_every) for a in agents]
    finals, _, _ = protocol.simulate([a.state() for a in agents], cfg.rounds, updates, seed=cfg.seed, max_skew=cfg.max_skew)
    return finals


def _agent_dir(out: Path, agent: int) -> Path:
    return out / f"agent_{agent}"


def run_socket_peer(cfg: ExperimentConfig, agent_id: int, out: str | Path) -> Path:
    """Entry point of one socket-mode peer process; writes the final state and metrics."""
    world = build_world(cfg)
    agent = make_agent(cfg, world, agent_id)
    if cfg.base_port <= 0:
        raise ConfigError("socket transport needs base_port > 0")
    addrs = protocol.local_addresses(cfg.n_agents, cfg.base_port, cfg.host)
    st = agent.state()
    ps = protocol.ProtocolState(agent_id, list(range(cfg.n_agents)), cfg.rounds, st)
    with protocol.SocketTransport(agent_id, addrs, protocol.StateLayout.of(st), cfg.timeout) as tr:
        final = protocol.run_rounds(ps, tr, _ValidatedAgent(agent, cfg.val_every), cfg.timeout)
        # keep the listener up until every peer has finished reading our frames
        time.sleep(0.5)
    d = _agent_dir(Path(out), agent_id)
    d.mkdir(parents=True, exist_ok=True)
    np.savez(d / "state.npz", mu=final.mu_block, rho=final.rho_block, fingerprint=np.frombuffer(final.fingerprint, dtype=np.uint8))
    write_metrics(agent.log, d / "metrics.csv")
    return d


def _run_socket(cfg: ExperimentConfig, out: Path) -> tuple[list[StateVector], list[list[dict]]]:
    if cfg.base_port <= 0:
        cfg = cfg.replace(base_port=protocol.free_port_block(cfg.n_agents, cfg.host))
    cfg_path = out / "peer_config.yaml"
    cfg.to_yaml(cfg_path)
    procs = [
        subprocess.Popen(
            [sys.executable, "-m", "bnnmap.cli", "peer", "--id", str(i), "--config", str(cfg_path), "--out", str(out)],
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
        )
        for i in range(cfg.n_agents)
    ]
    failures = []
    for i, p in enumerate(procs):
        output, _ = p.communicate()
        if p.returncode != 0:
            failures.append(f"peer {i} exited with {p.returncode}:\n{output.decode(errors='replace')[-2000:]}")
    if failures:
        raise RuntimeError("\n".join(failures))
    states, logs = [], []
    for i in range(cfg.n_agents):
        d = _agent_dir(out, i)
        with np.load(d / "state.npz") as z:
            states.append(StateVector(z["mu"], z["rho"], z["fingerprint"].tobytes()))
        with open(d / "metrics.csv", newline="") as fh:
            logs.append(list(csv.DictReader(fh)))
    return states, logs


def run_distributed(cfg: ExperimentConfig, out: str | Path | None = None, world: World | None = None) -> dict:
    """Consensus training of all agents; writes consensus maps, density map, metrics and curves."""
    world = world or build_world(cfg)
    outp = _prepare_out(cfg, out)
    agents = [make_agent(cfg, world, i) for i in range(cfg.n_agents)]
    if cfg.transport == "sim":
        finals = _run_sim(cfg, agents)
        rows = [r for a in agents for r in a.log]
    else:
        finals, logs = _run_socket(cfg, outp)
        rows = [r for lg in logs for r in lg]
    write_metrics(rows, outp / "metrics.csv")

    root = Stream(cfg.seed)
    net = consensus_net(agents[0].net, finals)
    holdout = PointSet.concat([a.holdout for a in agents])
    train_pts = PointSet.concat([a.data for a in agents])
    # headline: each agent's final model scored on its own held-out points
    agent_vals = [
        validation_loss(_net_of(net, s), a.holdout, cfg.passes, root.child("validation", a.id)) for a, s in zip(agents, finals)
    ]
    pooled = validation_loss(net, holdout, cfg.passes, root.child("validation"))

    maps, summ = _map_report(cfg, world, net, train_pts, root.child("maps"), False)
    files = export_maps(maps, outp)
    density = kde_density(train_pts, cfg.grid)
    raster_export(MapRaster(density.raw, "density"), outp / "density")
    free = free_mask(world.floorplan, cfg.grid)
    rho_s = stats.spearmanr(maps.std[free], 1.0 / (density.raw[free] + 1e-12)).statistic
    save_checkpoint(net, outp / "checkpoint.npz", {"scenario": "distributed", "seed": cfg.seed, "strategy": cfg.strategy})

    curves = _curves(rows)
    _write_rows(curves, outp / "curves.csv")
    summary = {
        "strategy": cfg.strategy,
        "transport": cfg.transport,
        "validation_loss": float(np.mean(agent_vals)),
        "agent_validation_loss": agent_vals,
        "consensus_model_validation_loss": pooled,
        "consensus_residual": consensus_residual(finals),
        "consensus_residual_rho": consensus_residual(finals, "rho"),
        "spearman_std_vs_inverse_density": float(rho_s),
        **summ,
    }
    _write_summary(outp, summary)
    return {"out": str(outp), "summary": summary, "states": finals, "net": net, "maps": maps, "rows": rows, "files": files}


def _net_of(template: MapperNet, state: StateVector) -> MapperNet:
    net = template.copy()
    net.load_state(state)
    return net


def _curves(rows: list[dict]) -> list[dict]:
    """Per-round mean over agents of the validation loss and the residual seen by each agent."""
    by_round: dict[int, dict[str, list[float]]] = {}
    for r in rows:
        for key in ("validation_loss", "consensus_residual"):
            v = r.get(key, "")
            if v in ("", None):
                continue
            v = float(v)
            if np.isfinite(v):
                by_round.setdefault(int(r["round"]), {}).setdefault(key, []).append(v)
    out = []
    for k in sorted(by_round):
        d = by_round[k]
        out.append(
            {
                "round": k,
                "validation_loss": float(np.mean(d["validation_loss"])) if "validation_loss" in d else "",
                "consensus_residual": float(np.max(d["consensus_residual"])) if "consensus_residual" in d else "",
            }
        )
    return out


# ----------------------------------------------------------------------------
# export


def export_checkpoint(path: str | Path, out: str | Path, grid: int = 256, passes: int = 50, seed: int = 0) -> dict[str, str]:
    """Render mean and std rasters from a saved checkpoint."""
    net, _ = load_checkpoint(path)
    outp = Path(out)
    outp.mkdir(parents=True, exist_ok=True)
    maps = predict_maps(net, grid, passes, Stream(seed).child("maps"))
    return export_maps(maps, outp)


RUNNERS = {
    "single_agent": run_single_agent,
    "kl_sweep": run_kl_sweep,
    "online": run_online,
    "distributed": run_distributed,
}


def run(cfg: ExperimentConfig, out: str | Path | None = None) -> dict:
    return RUNNERS[cfg.scenario](cfg, out)
