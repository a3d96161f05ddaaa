"""Trajectory domain types, displacement metrics, dataset ingestion, and a
synthetic multimodal scene generator.

Coordinates are 2-D positions in meters throughout. A trajectory pair holds
``t_obs`` observed steps and ``t_pred`` future steps; a scene is the set of
agents whose windows share a frame range. All types are immutable after
construction and every function here is pure, so concurrent use is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, EmptyDatasetError, ParseError, ShapeError

T_OBS_DEFAULT = 8
T_PRED_DEFAULT = 12


def _as_track(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ShapeError(f"{name} must have shape (T, 2), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return a


@dataclass(frozen=True)
class TrajectoryPair:
    """Observed and future track of a single agent."""

    observed: np.ndarray  # (t_obs, 2)
    future: np.ndarray  # (t_pred, 2)
    agent_id: object

    def __post_init__(self):
        object.__setattr__(self, "observed", _as_track(self.observed, "observed"))
        object.__setattr__(self, "future", _as_track(self.future, "future"))
        self.observed.setflags(write=False)
        self.future.setflags(write=False)

    @property
    def t_obs(self):
        return self.observed.shape[0]

    @property
    def t_pred(self):
        return self.future.shape[0]


@dataclass(frozen=True)
class Scene:
    """All trajectory pairs sharing one frame window."""

    agents: tuple
    scene_id: object

    def __post_init__(self):
        agents = tuple(self.agents)
        if not agents:
            raise DomainError("a scene must contain at least one agent")
        ids = [a.agent_id for a in agents]
        if len(set(ids)) != len(ids):
            raise DomainError(f"duplicate agent ids in scene {self.scene_id!r}")
        object.__setattr__(self, "agents", agents)

    def __len__(self):
        return len(self.agents)

    def observed_stack(self):
        return np.stack([a.observed for a in self.agents])

    def future_stack(self):
        return np.stack([a.future for a in self.agents])


@dataclass(frozen=True)
class Batch:
    """A list of scenes processed in one training step."""

    scenes: tuple

    def __post_init__(self):
        scenes = tuple(self.scenes)
        if sum(len(s) for s in scenes) == 0:
            raise DomainError("a batch must contain at least one agent")
        object.__setattr__(self, "scenes", scenes)

    @property
    def n_agents(self):
        return sum(len(s) for s in self.scenes)


@dataclass(frozen=True)
class PredictionSet:
    """N candidate futures for one agent, stacked (N, t_pred, 2)."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 3 or s.shape[2] != 2 or s.shape[0] < 1:
            raise ShapeError(f"samples must have shape (N, T, 2) with N >= 1, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples contain non-finite coordinates")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def n(self):
        return self.samples.shape[0]


# -- displacement metrics ------------------------------------------------------


def ade(pred, gt):
    """Average displacement error: mean Euclidean distance per timestep."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred, gt):
    """Final displacement error: Euclidean distance at the last timestep."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def min_of_n(preds, gt):
    """Best-of-N metrics over a prediction set.

    Returns (min_ade, min_fde, (argmin_ade, argmin_fde)). Appending samples
    can only lower both minima.
    """
    samples = preds.samples if isinstance(preds, PredictionSet) else np.asarray(preds, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise DomainError("min_of_n requires at least one sample of shape (T, 2)")
    gt = np.asarray(gt, dtype=np.float64)
    if samples.shape[1:] != gt.shape:
        raise ShapeError(f"sample shape {samples.shape[1:]} does not match gt {gt.shape}")
    dists = np.linalg.norm(samples - gt[None], axis=-1)  # (N, T)
    ades = dists.mean(axis=1)
    fdes = dists[:, -1]
    i_ade = int(np.argmin(ades))
    i_fde = int(np.argmin(fdes))
    return float(ades[i_ade]), float(fdes[i_fde]), (i_ade, i_fde)


# -- plain-text ingestion --------------------------------------------------------

# File format: one observation per line, four whitespace-separated decimal
# fields `frame_id ped_id x y`; frame and pedestrian ids are integers, x/y
# are meters.


def _parse_int(token, line_no, what):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{what} {token!r} is not numeric", line_no) from None
    if value != int(value):
        raise ParseError(f"{what} {token!r} is not an integer", line_no)
    return int(value)


def ingest_ethucy(path, t_obs=T_OBS_DEFAULT, t_pred=T_PRED_DEFAULT, frame_step=1, stride=1):
    """Read a `frame ped x y` text file and cut it into scenes.

    Each pedestrian's track is segmented into sliding windows of
    ``t_obs + t_pred`` observations whose frames advance by exactly
    ``frame_step``; windows containing gaps are skipped, never interpolated.
    Agents whose windows cover the identical frame range are grouped into
    one scene. Scenes come back sorted by (start_frame, end_frame), agents
    by pedestrian id.
    """
    window = t_obs + t_pred
    tracks = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, got {len(parts)}", line_no)
            frame = _parse_int(parts[0], line_no, "frame_id")
            ped = _parse_int(parts[1], line_no, "ped_id")
            try:
                x, y = float(parts[2]), float(parts[3])
            except ValueError:
                raise ParseError("coordinates are not numeric", line_no) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError("coordinates are not finite", line_no)
            tracks.setdefault(ped, []).append((frame, x, y))

    groups = {}
    for ped, obs in tracks.items():
        obs.sort(key=lambda o: o[0])
        frames = [o[0] for o in obs]
        for start in range(0, len(obs) - window + 1, stride):
            chunk = obs[start : start + window]
            expected = chunk[0][0] + frame_step * np.arange(window)
            if any(c[0] != e for c, e in zip(chunk, expected)):
                continue  # gap inside the window
            key = (chunk[0][0], chunk[-1][0])
            coords = np.array([(c[1], c[2]) for c in chunk])
            groups.setdefault(key, []).append((ped, coords))

    scenes = []
    for (start, end) in sorted(groups):
        members = sorted(groups[(start, end)], key=lambda m: m[0])
        agents = [
            TrajectoryPair(observed=coords[:t_obs], future=coords[t_obs:], agent_id=ped)
            for ped, coords in members
        ]
        scenes.append(Scene(agents=agents, scene_id=f"{start}_{end}"))
    if not scenes:
        raise EmptyDatasetError(
            f"{path}: no complete {window}-frame windows found (frame_step={frame_step})"
        )
    return scenes


def write_ethucy(scenes, path, frame_step=1, frame_gap=5):
    """Serialize scenes back to the `frame ped x y` text format.

    Scenes are laid out on disjoint frame ranges and pedestrians get globally
    unique ids, so ``ingest_ethucy`` recovers the same grouping. Coordinates
    are written with ``repr`` and round-trip exactly.
    """
    frame = 0
    ped = 1
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            window = scene.agents[0].t_obs + scene.agents[0].t_pred
            for agent in scene.agents:
                coords = np.vstack([agent.observed, agent.future])
                for t in range(window):
                    f = frame + t * frame_step
                    fh.write(f"{f} {ped} {float(coords[t, 0])!r} {float(coords[t, 1])!r}\n")
                ped += 1
            frame += (window + frame_gap) * frame_step


# -- synthetic junction scenes ---------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Configuration of the synthetic branching-intersection generator."""

    branches: int = 3
    branch_probs: tuple = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    speed_mps: float = 1.0
    noise_std: float = 0.05
    agents_per_scene: int = 2
    n_scenes: int = 100
    t_obs: int = T_OBS_DEFAULT
    t_pred: int = T_PRED_DEFAULT
    dt: float = 0.4  # seconds between frames
    branch_spread_deg: float = 90.0  # branch directions span +/- this angle
    seed: int = 0

    def __post_init__(self):
        probs = tuple(float(p) for p in self.branch_probs)
        object.__setattr__(self, "branch_probs", probs)
        if self.branches < 1:
            raise ConfigError("branches must be >= 1")
        if len(probs) != self.branches:
            raise ConfigError(f"expected {self.branches} branch probabilities, got {len(probs)}")
        if any(p < 0 for p in probs):
            raise ConfigError("branch probabilities must be nonnegative")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"branch probabilities sum to {sum(probs)!r}, not 1")
        for name in ("speed_mps", "dt"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.agents_per_scene < 1 or self.n_scenes < 1:
            raise ConfigError("agents_per_scene and n_scenes must be >= 1")


def branch_directions(heading, branches, spread_deg=90.0):
    """Unit outgoing directions of each branch, relative to an approach heading.

    Branch k turns by an angle evenly spaced in [-spread, +spread]; with three
    branches that is a left turn, straight on, and a right turn.
    """
    if branches == 1:
        offsets = np.array([0.0])
    else:
        offsets = np.linspace(-spread_deg, spread_deg, branches) * np.pi / 180.0
    angles = heading + offsets
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def generate_synthetic(config, seed=None):
    """Generate scenes of agents approaching a junction and branching.

    Each agent walks straight toward its junction for ``t_obs`` steps (the
    junction sits exactly at the final observed position, so the observation
    alone cannot reveal which branch follows), then follows one branch
    sampled from ``branch_probs`` for ``t_pred`` steps. Gaussian coordinate
    noise is added everywhere. Pure in (config, seed).
    """
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    step = config.speed_mps * config.dt
    scenes = []
    agent_counter = 0
    for s in range(config.n_scenes):
        agents = []
        for _ in range(config.agents_per_scene):
            junction = rng.uniform(-10.0, 10.0, size=2)
            heading = rng.uniform(0.0, 2.0 * np.pi)
            approach = np.array([np.cos(heading), np.sin(heading)])
            # t_obs points ending exactly at the junction
            ts = np.arange(config.t_obs - 1, -1, -1, dtype=np.float64)
            observed = junction[None, :] - ts[:, None] * step * approach[None, :]
            branch = int(rng.choice(config.branches, p=np.asarray(config.branch_probs)))
            out_dir = branch_directions(heading, config.branches, config.branch_spread_deg)[branch]
            tp = np.arange(1, config.t_pred + 1, dtype=np.float64)
            future = junction[None, :] + tp[:, None] * step * out_dir[None, :]
            observed = observed + rng.normal(0.0, config.noise_std, observed.shape)
            future = future + rng.normal(0.0, config.noise_std, future.shape)
            agents.append(TrajectoryPair(observed=observed, future=future, agent_id=agent_counter))
            agent_counter += 1
        scenes.append(Scene(agents=agents, scene_id=f"synth{s}"))
    return scenes


def classify_branch(observed, future, branches=3, spread_deg=90.0):
    """Nearest branch direction of a future, given the observed approach.

    The approach heading is estimated from the observed track's net
    displacement; the branch is the outgoing direction most aligned with
    the displacement from the last observed point to the future's endpoint.
    """
    observed = np.asarray(observed, dtype=np.float64)
    future = np.asarray(future, dtype=np.float64)
    approach = observed[-1] - observed[0]
    heading = math.atan2(approach[1], approach[0])
    dirs = branch_directions(heading, branches, spread_deg)
    out = future[-1] - observed[-1]
    norm = np.linalg.norm(out)
    if norm == 0:
        return 0
    return int(np.argmax(dirs @ (out / norm)))
