"""Scenario runner and driving metrics.

Rolls deterministic-mode agents over the map x congestion cross product and
aggregates collision rate, route-direction similarity, survived timesteps,
and mean waypoint distance into CSV-able records, including per-agent
Average rows over the seven maps.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .policy import PolicyNet
from .simworld import Action, DrivingWorld, Observation

CSV_HEADER = ("agent,map_id,congestion,episodes,seed_base,"
              "collision_rate,similarity,timesteps,waypoint_distance")


@dataclass
class ScenarioSpec:
    map_id: int
    congestion: str
    episodes: int = 50
    seed_base: int = 1000

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("scenario needs at least one episode")


@dataclass
class EpisodeResult:
    collided: bool
    steps: int
    similarities: np.ndarray
    waypoint_distances: np.ndarray
    seed: int


@dataclass
class MetricRecord:
    agent: str
    map_id: object              # 1..7 or "avg"
    congestion: str
    episodes: int
    seed_base: int
    collision_rate: float
    similarity: float
    timesteps: float
    waypoint_distance: float


class PolicyAgent:
    """Deterministic-mode wrapper: action = tanh(mu), hidden reset per episode."""

    def __init__(self, net: PolicyNet):
        self.net = net
        self._hidden = net.initial_hidden()

    def reset(self):
        self._hidden = self.net.initial_hidden()

    def act(self, obs: Observation) -> Action:
        out = self.net.act(obs, self._hidden, deterministic=True)
        self._hidden = out.hidden
        return Action(accel=float(out.action[0]), steer=float(out.action[1]))


class RandomAgent:
    """Uniform actions from a seeded stream; reseeded every episode."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._episode = 0

    def reset(self):
        self._episode += 1
        self._rng = np.random.default_rng([self.seed, self._episode])

    def act(self, obs: Observation) -> Action:
        return Action(accel=float(self._rng.uniform(-1, 1)),
                      steer=float(self._rng.uniform(-1, 1)))


class ConstantAgent:
    def __init__(self, accel: float, steer: float):
        self.action = Action(accel=accel, steer=steer)

    def reset(self):
        pass

    def act(self, obs: Observation) -> Action:
        return self.action


def run_episode(agent, env: DrivingWorld, seed: int, map_id: int,
                congestion: str) -> EpisodeResult:
    """One full episode; records per-step similarity and waypoint distance."""
    agent.reset()
    obs = env.reset(seed, map_id, congestion)
    sims, dists = [], []
    done = False
    while not done:
        obs, _reward, done, info = env.step(agent.act(obs))
        sims.append(info["similarity"])
        dists.append(info["waypoint_distance"])
    return EpisodeResult(collided=env.state.collided, steps=env.state.step_count,
                         similarities=np.array(sims), waypoint_distances=np.array(dists),
                         seed=seed)


def similarity_metric(result: EpisodeResult) -> float:
    """Mean per-step cosine similarity over the episode."""
    return float(result.similarities.mean())


def aggregate(agent: str, spec: ScenarioSpec, results: list) -> MetricRecord:
    return MetricRecord(
        agent=agent, map_id=spec.map_id, congestion=spec.congestion,
        episodes=spec.episodes, seed_base=spec.seed_base,
        collision_rate=float(np.mean([r.collided for r in results])),
        similarity=float(np.mean([similarity_metric(r) for r in results])),
        timesteps=float(np.mean([r.steps for r in results])),
        waypoint_distance=float(np.mean([r.waypoint_distances.mean() for r in results])),
    )


def evaluate(agents: dict, scenarios: list, env_factory,
             progress_hook=None) -> list:
    """Full agents x scenarios cross product plus per-congestion Average rows.

    Episode seeds are seed_base + episode index; rows come back sorted by
    (agent, congestion, map) with Average rows (map_id="avg") appended per
    (agent, congestion) group.
    """
    records: list[MetricRecord] = []
    for agent_name in sorted(agents):
        agent = agents[agent_name]
        env = env_factory()
        for spec in sorted(scenarios, key=lambda s: (s.congestion, s.map_id)):
            results = [run_episode(agent, env, spec.seed_base + i, spec.map_id, spec.congestion)
                       for i in range(spec.episodes)]
            records.append(aggregate(agent_name, spec, results))
            if progress_hook is not None:
                progress_hook(records[-1])
    # Average rows over the maps present, per (agent, congestion)
    averages = []
    for agent_name in sorted(agents):
        for congestion in sorted({r.congestion for r in records}):
            rows = [r for r in records if r.agent == agent_name and r.congestion == congestion]
            if not rows:
                continue
            averages.append(MetricRecord(
                agent=agent_name, map_id="avg", congestion=congestion,
                episodes=rows[0].episodes, seed_base=rows[0].seed_base,
                collision_rate=float(np.mean([r.collision_rate for r in rows])),
                similarity=float(np.mean([r.similarity for r in rows])),
                timesteps=float(np.mean([r.timesteps for r in rows])),
                waypoint_distance=float(np.mean([r.waypoint_distance for r in rows])),
            ))
    return records + averages


def to_csv(records: list) -> str:
    """Byte-stable CSV with the exact contract header."""
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    def sort_key(r):
        return (r.agent, r.congestion, 99 if r.map_id == "avg" else int(r.map_id))
    for r in sorted(records, key=sort_key):
        buf.write(f"{r.agent},{r.map_id},{r.congestion},{r.episodes},{r.seed_base},"
                  f"{r.collision_rate:.6f},{r.similarity:.6f},{r.timesteps:.6f},"
                  f"{r.waypoint_distance:.6f}\n")
    return buf.getvalue()


# Paper-scale reference points (CARLA, Tables I-II): recorded next to the
# desk-scale deltas for context, never asserted against.
PAPER_REFERENCE = {
    "low": {"collision_rate": (0.34, 0.12), "similarity": (0.81, 0.84),
            "timesteps": (114.94, 126.86)},
    "high": {"collision_rate": (0.35, 0.11), "similarity": (0.82, 0.86),
             "timesteps": (112.98, 125.79)},
}


def compare_agents(records: list, agent: str = "bev6",
                   baseline: str = "baseline3") -> dict:
    """Per-metric deltas (agent minus baseline) on the Average rows."""
    report = {"agent": agent, "baseline": baseline, "congestion": {}}
    for congestion in sorted({r.congestion for r in records}):
        a = [r for r in records if r.agent == agent and r.map_id == "avg"
             and r.congestion == congestion]
        b = [r for r in records if r.agent == baseline and r.map_id == "avg"
             and r.congestion == congestion]
        if not a or not b:
            raise ValueError(f"missing Average rows for {agent!r} or {baseline!r} "
                             f"({congestion} congestion)")
        a, b = a[0], b[0]
        deltas = {m: getattr(a, m) - getattr(b, m)
                  for m in ("collision_rate", "similarity", "timesteps", "waypoint_distance")}
        report["congestion"][congestion] = {
            "deltas": deltas,
            "signs": {m: ("-" if d < 0 else "+" if d > 0 else "0") for m, d in deltas.items()},
            "agent_values": {m: getattr(a, m) for m in deltas},
            "baseline_values": {m: getattr(b, m) for m in deltas},
            "paper_reference_full_scale": PAPER_REFERENCE.get(congestion),
        }
    return report
