"""PPO actor-critic over per-channel feature extractors with GRU fusion.

Camera images go through the BEV extractor (or the geometry-free baseline),
road/vehicle/navigation vectors through small dense stacks; the
concatenation feeds one GRU step whose hidden state drives a squashed
Gaussian actor and a value head. Updates use GAE and the clipped surrogate
with recurrent minibatches of contiguous sequence chunks.
"""
from __future__ import annotations

import json
import math
import multiprocessing as mp
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bev as bev_mod
from . import geometry
from .errors import ConfigError, ContractViolation, TrainingError
from .simworld import Action, DrivingWorld, Observation

HIDDEN_DIM = 128
ROAD_FEATS, VEH_FEATS, NAV_FEATS = 9, 4, 5
ROAD_HIDDEN, VEH_HIDDEN, NAV_HIDDEN = 32, 16, 16
ACTION_DIM = 2
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2 = math.log(2.0)
ENTROPY_CONST = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 8
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    horizon: int = 128
    total_steps: int = 100_000
    learning_rate: float = 3e-4
    seq_chunk: int = 16
    kl_limit: float = 0.5
    checkpoint_every: int = 25   # updates between checkpoints

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ConfigError("gamma and gae_lambda must lie in (0, 1]")
        if not (0.0 < self.clip_eps <= 0.5):
            raise ConfigError("clip_eps must lie in (0, 0.5]")
        if self.horizon % self.seq_chunk:
            raise ConfigError("seq_chunk must divide horizon")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def tanh_log_jacobian(raw: np.ndarray) -> np.ndarray:
    """log(1 - tanh(raw)^2), numerically stable, elementwise."""
    return 2.0 * (LOG_2 - raw - _softplus(-2.0 * raw))


def squashed_gaussian_log_prob(raw: np.ndarray, mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
    """log density of tanh(raw) under tanh(Normal(mu, sigma)), summed over dims."""
    z = (raw - mu) * np.exp(-log_sigma)
    base = -0.5 * (z * z) - log_sigma - 0.5 * math.log(2.0 * math.pi)
    return (base - tanh_log_jacobian(raw)).sum(axis=-1)


@dataclass
class ActOutput:
    action: np.ndarray        # tanh-squashed, in [-1, 1]^2
    raw_action: np.ndarray    # pre-squash Gaussian sample
    log_prob: float
    value: float
    hidden: np.ndarray


class PolicyNet:
    """Actor-critic network; all parameters live in one ParamStore."""

    def __init__(self, extractor: str, bev_config: bev_mod.BevConfig,
                 rig: geometry.CameraRig, seed: int = 0,
                 store: ad.ParamStore | None = None, dtype=np.float32):
        if extractor not in ("bev", "baseline"):
            raise ConfigError(f"unknown extractor {extractor!r}")
        self.extractor_kind = extractor
        self.rig = rig
        self.store = store if store is not None else ad.ParamStore()
        self.dtype = dtype
        intr = rig.cameras[0][0]
        if extractor == "bev":
            self.extractor = bev_mod.SCBlock(
                bev_config, rig, self.store, prefix="bev",
                rng=np.random.default_rng([seed, 0]), dtype=dtype)
        else:
            self.extractor = bev_mod.BaselineEncoder(
                bev_config, len(rig), (intr.height, intr.width), self.store,
                prefix="baseline", rng=np.random.default_rng([seed, 0]), dtype=dtype)
        latent = bev_config.latent_dim
        self.feature_dim = latent + ROAD_HIDDEN + VEH_HIDDEN + NAV_HIDDEN

        def dense_p(name, cin, cout, rng, scale=None, bias_init=0.0):
            std = scale if scale is not None else math.sqrt(1.0 / cin)
            self._p(f"{name}/w", lambda: (rng.standard_normal((cin, cout)) * std).astype(dtype))
            self._p(f"{name}/b", lambda: np.full(cout, bias_init, dtype))

        # channel stacks use extractor-independent rng streams so that the
        # R/V/N paths are byte-identical across extractor choices
        dense_p("road_stack", ROAD_FEATS, ROAD_HIDDEN, np.random.default_rng([seed, 1]))
        dense_p("veh_stack", VEH_FEATS, VEH_HIDDEN, np.random.default_rng([seed, 2]))
        dense_p("nav_stack", NAV_FEATS, NAV_HIDDEN, np.random.default_rng([seed, 3]))
        gru_rng = np.random.default_rng([seed, 4])
        std_in = math.sqrt(1.0 / self.feature_dim)
        std_h = math.sqrt(1.0 / HIDDEN_DIM)
        for gate in ("z", "r", "n"):
            self._p(f"gru/w{gate}", lambda: (gru_rng.standard_normal((self.feature_dim, HIDDEN_DIM)) * std_in).astype(dtype))
            self._p(f"gru/u{gate}", lambda: (gru_rng.standard_normal((HIDDEN_DIM, HIDDEN_DIM)) * std_h).astype(dtype))
            self._p(f"gru/b{gate}", lambda: np.zeros(HIDDEN_DIM, dtype))
        head_rng = np.random.default_rng([seed, 5])
        dense_p("actor_mu", HIDDEN_DIM, ACTION_DIM, head_rng, scale=0.01)
        dense_p("actor_log_sigma", HIDDEN_DIM, ACTION_DIM, head_rng, scale=0.01,
                bias_init=-0.5)
        dense_p("critic", HIDDEN_DIM, 1, head_rng)

    def _p(self, name, init_fn):
        if name not in self.store:
            self.store.add(name, init_fn())

    def gru_params(self) -> ad.GruParams:
        s = self.store
        return ad.GruParams(
            wz=s["gru/wz"], uz=s["gru/uz"], bz=s["gru/bz"],
            wr=s["gru/wr"], ur=s["gru/ur"], br=s["gru/br"],
            wn=s["gru/wn"], un=s["gru/un"], bn=s["gru/bn"])

    def initial_hidden(self) -> np.ndarray:
        return np.zeros(HIDDEN_DIM, self.dtype)

    # -- forward pieces -------------------------------------------------------

    def features_batch(self, images, road, veh, nav) -> ad.Tensor:
        """Per-frame fused features (B, feature_dim); inputs are Tensors."""
        if self.extractor_kind == "bev":
            latent, _ = self.extractor.forward_batch(images)
        else:
            latent = self.extractor.forward_batch(images)
        s = self.store
        r = ad.relu(ad.dense(road, s["road_stack/w"], s["road_stack/b"]))
        v = ad.relu(ad.dense(veh, s["veh_stack/w"], s["veh_stack/b"]))
        n = ad.relu(ad.dense(nav, s["nav_stack/w"], s["nav_stack/b"]))
        return ad.concat([latent, r, v, n], axis=1)

    def heads(self, hidden: ad.Tensor):
        s = self.store
        mu = ad.dense(hidden, s["actor_mu/w"], s["actor_mu/b"])
        log_sigma = ad.clip(ad.dense(hidden, s["actor_log_sigma/w"], s["actor_log_sigma/b"]),
                            LOG_STD_MIN, LOG_STD_MAX)
        value = ad.dense(hidden, s["critic/w"], s["critic/b"])
        return mu, log_sigma, value

    def _obs_tensors(self, obs: Observation):
        return (ad.Tensor(obs.images[None].astype(self.dtype)),
                ad.Tensor(obs.road_features[None].astype(self.dtype)),
                ad.Tensor(obs.vehicle_features[None].astype(self.dtype)),
                ad.Tensor(obs.nav_features[None].astype(self.dtype)))

    def act(self, obs: Observation, hidden: np.ndarray,
            rng: np.random.Generator | None = None,
            deterministic: bool = False) -> ActOutput:
        """One policy step; no gradients are recorded."""
        images, road, veh, nav = self._obs_tensors(obs)
        feats = self.features_batch(images, road, veh, nav)
        h = ad.gru_cell(feats, ad.Tensor(hidden[None].astype(self.dtype)), self.gru_params())
        mu_t, log_sigma_t, value_t = self.heads(h)
        mu = mu_t.data[0].astype(np.float64)
        log_sigma = log_sigma_t.data[0].astype(np.float64)
        value = float(value_t.data[0, 0])
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_sigma)) and math.isfinite(value)):
            raise TrainingError("policy produced non-finite actor/critic outputs")
        if deterministic:
            raw = mu
        else:
            if rng is None:
                raise ContractViolation("stochastic act requires an rng")
            raw = mu + np.exp(log_sigma) * rng.standard_normal(ACTION_DIM)
        action = np.tanh(raw)
        logp = float(squashed_gaussian_log_prob(raw, mu, log_sigma))
        return ActOutput(action=action, raw_action=raw, log_prob=logp,
                         value=value, hidden=h.data[0].copy())

    def value_estimate(self, obs: Observation, hidden: np.ndarray) -> float:
        return self.act(obs, hidden, deterministic=True).value


# ---------------------------------------------------------------------------
# rollout storage and GAE
# ---------------------------------------------------------------------------

class RolloutBuffer:
    """Fixed-capacity per-step storage for one PPO round (workers x horizon)."""

    FIELDS = ("rewards", "dones", "values", "log_probs")

    def __init__(self, workers: int, horizon: int, obs_example: Observation):
        self.workers = workers
        self.horizon = horizon
        w, t = workers, horizon
        self.images = np.zeros((w, t) + obs_example.images.shape, np.float32)
        self.road = np.zeros((w, t, ROAD_FEATS), np.float32)
        self.veh = np.zeros((w, t, VEH_FEATS), np.float32)
        self.nav = np.zeros((w, t, NAV_FEATS), np.float32)
        self.hidden = np.zeros((w, t, HIDDEN_DIM), np.float32)
        self.actions = np.zeros((w, t, ACTION_DIM), np.float32)
        self.raw_actions = np.zeros((w, t, ACTION_DIM), np.float32)
        self.log_probs = np.zeros((w, t), np.float32)
        self.values = np.zeros((w, t), np.float32)
        self.rewards = np.zeros((w, t), np.float32)
        self.dones = np.zeros((w, t), np.float32)
        self.bootstrap = np.zeros(w, np.float32)
        self.advantages = None
        self.returns = None
        self._fill = np.zeros(w, np.int64)

    def add(self, worker: int, obs: Observation, hidden, out: ActOutput,
            reward: float, done: bool):
        t = self._fill[worker]
        if t >= self.horizon:
            raise ContractViolation("rollout buffer is full")
        self.images[worker, t] = obs.images
        self.road[worker, t] = obs.road_features
        self.veh[worker, t] = obs.vehicle_features
        self.nav[worker, t] = obs.nav_features
        self.hidden[worker, t] = hidden
        self.actions[worker, t] = out.action
        self.raw_actions[worker, t] = out.raw_action
        self.log_probs[worker, t] = out.log_prob
        self.values[worker, t] = out.value
        self.rewards[worker, t] = reward
        self.dones[worker, t] = float(done)
        self._fill[worker] = t + 1

    @property
    def full(self) -> bool:
        return bool(np.all(self._fill == self.horizon))

    @classmethod
    def merge(cls, buffers: list["RolloutBuffer"]) -> "RolloutBuffer":
        first = buffers[0]
        obs_ex = Observation(images=first.images[0, 0], road_features=first.road[0, 0],
                             vehicle_features=first.veh[0, 0], nav_features=first.nav[0, 0])
        out = cls(sum(b.workers for b in buffers), first.horizon, obs_ex)
        for name in ("images", "road", "veh", "nav", "hidden", "actions", "raw_actions",
                     "log_probs", "values", "rewards", "dones", "bootstrap", "_fill"):
            setattr(out, name, np.concatenate([getattr(b, name) for b in buffers], axis=0))
        return out


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float,
                bootstrap_value: np.ndarray | None = None, normalize: bool = True):
    """Generalized advantage estimates and returns over the full buffer.

    delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
    A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}
    Advantages are normalized to zero mean / unit variance unless disabled;
    returns are computed from the unnormalized advantages.
    """
    if not buffer.full:
        raise ContractViolation("GAE requires a full rollout buffer")
    v = buffer.values.astype(np.float64)
    r = buffer.rewards.astype(np.float64)
    nd = 1.0 - buffer.dones.astype(np.float64)
    boot = buffer.bootstrap if bootstrap_value is None else np.asarray(bootstrap_value)
    adv = np.zeros_like(v)
    next_v = boot.astype(np.float64)
    gae = np.zeros(buffer.workers, np.float64)
    for t in range(buffer.horizon - 1, -1, -1):
        delta = r[:, t] + gamma * next_v * nd[:, t] - v[:, t]
        gae = delta + gamma * lam * nd[:, t] * gae
        adv[:, t] = gae
        next_v = v[:, t]
    returns = adv + v
    if normalize:
        adv = (adv - adv.mean()) / max(float(adv.std()), 1e-8)
    buffer.advantages = adv
    buffer.returns = returns
    return adv, returns


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

def _replay_chunk(net: PolicyNet, images, road, veh, nav, h0, resets):
    """Replay L GRU steps over a (K, L, ...) chunk batch; returns stacked
    per-step (mu, log_sigma, value) in step-major order (L*K rows)."""
    k, length = road.shape[:2]
    img_t = ad.Tensor(images.reshape((k * length,) + images.shape[2:]))
    road_t = ad.Tensor(road.reshape(k * length, -1))
    veh_t = ad.Tensor(veh.reshape(k * length, -1))
    nav_t = ad.Tensor(nav.reshape(k * length, -1))
    feats = net.features_batch(img_t, road_t, veh_t, nav_t)     # (K*L, F) chunk-major
    h = ad.Tensor(h0)
    gru = net.gru_params()
    mus, sigs, vals = [], [], []
    for t in range(length):
        rows = np.arange(k) * length + t                        # frame t of each chunk
        if t > 0:
            h = ad.mul(h, ad.Tensor(resets[:, t - 1:t].astype(h.data.dtype)))
        step = ad.gather_rows(feats, rows)
        h = ad.gru_cell(step, h, gru)
        mu, log_sigma, value = net.heads(h)
        mus.append(mu)
        sigs.append(log_sigma)
        vals.append(value)
    return ad.concat(mus, axis=0), ad.concat(sigs, axis=0), ad.concat(vals, axis=0)


def ppo_update(buffer: RolloutBuffer, net: PolicyNet, config: PpoConfig,
               update_rng: np.random.Generator | None = None) -> dict:
    """Clipped-surrogate PPO epochs over recurrent minibatches."""
    if buffer.advantages is None:
        raise ContractViolation("compute_gae must run before ppo_update")
    update_rng = update_rng or np.random.default_rng(0)
    w, horizon, length = buffer.workers, buffer.horizon, config.seq_chunk
    chunks = [(wi, t0) for wi in range(w) for t0 in range(0, horizon, length)]
    n_chunks = len(chunks)
    per_mb = max(n_chunks // config.minibatches, 1)

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "kl": 0.0}
    n_batches = 0
    aborted = False
    for _epoch in range(config.epochs):
        if aborted:
            break
        order = update_rng.permutation(n_chunks)
        for mb_start in range(0, n_chunks, per_mb):
            sel = [chunks[i] for i in order[mb_start:mb_start + per_mb]]
            k = len(sel)
            sl = lambda arr: np.stack([arr[wi, t0:t0 + length] for wi, t0 in sel])
            images, road = sl(buffer.images), sl(buffer.road)
            veh, nav = sl(buffer.veh), sl(buffer.nav)
            h0 = np.stack([buffer.hidden[wi, t0] for wi, t0 in sel])
            resets = 1.0 - sl(buffer.dones)                     # (K, L)
            raw = sl(buffer.raw_actions)
            adv = sl(buffer.advantages)
            ret = sl(buffer.returns)
            logp_old = sl(buffer.log_probs)

            # step-major flattening to align with _replay_chunk output
            def smajor(a):
                flat = np.ascontiguousarray(np.swapaxes(a, 0, 1)).reshape((k * length,) + a.shape[2:])
                return flat.astype(np.float32)
            raw_f, adv_f = smajor(raw), smajor(adv)
            ret_f, logp_old_f = smajor(ret), smajor(logp_old)
            jac = tanh_log_jacobian(raw_f).sum(axis=1)

            with ad.Tape() as tape:
                mu, log_sigma, value = _replay_chunk(net, images, road, veh, nav, h0, resets)
                base = ad.gaussian_log_prob(ad.Tensor(raw_f), mu, log_sigma)
                logp_new = ad.sub(ad.tsum(base, axis=1), ad.Tensor(jac.astype(np.float32)))
                ratio = ad.exp(ad.sub(logp_new, ad.Tensor(logp_old_f)))
                adv_t = ad.Tensor(adv_f)
                surrogate = ad.minimum(ad.mul(ratio, adv_t),
                                       ad.mul(ad.clip(ratio, 1.0 - config.clip_eps,
                                                      1.0 + config.clip_eps), adv_t))
                policy_loss = ad.neg(ad.tmean(surrogate))
                diff = ad.sub(ad.reshape(value, (k * length,)), ad.Tensor(ret_f))
                value_loss = ad.tmean(ad.mul(diff, diff))
                entropy = ad.add(ad.tmean(ad.tsum(log_sigma, axis=1)),
                                 ACTION_DIM * ENTROPY_CONST)
                total = ad.add(ad.add(policy_loss,
                                      ad.mul(value_loss, config.value_coef)),
                               ad.mul(entropy, -config.entropy_coef))
                if not np.isfinite(total.data):
                    raise TrainingError("non-finite PPO loss")
                tape.backward(total)
            ad.adam_step(net.store, lr=config.learning_rate)

            kl = float(np.mean(logp_old_f - logp_new.data))
            stats["policy_loss"] += float(policy_loss.data)
            stats["value_loss"] += float(value_loss.data)
            stats["entropy"] += float(entropy.data)
            stats["kl"] += kl
            n_batches += 1
            if kl > config.kl_limit:
                aborted = True
                break
    for key in stats:
        stats[key] /= max(n_batches, 1)
    stats["aborted"] = aborted
    stats["minibatches_run"] = n_batches
    return stats


# ---------------------------------------------------------------------------
# rollout collection and the training loop
# ---------------------------------------------------------------------------

class _EpisodeSchedule:
    """Deterministic per-worker episode seeds."""

    def __init__(self, base_seed: int, worker: int):
        self.base = int(base_seed)
        self.worker = int(worker)
        self.count = 0

    def next_seed(self) -> int:
        seed = self.base + 100_000 * self.worker + self.count
        self.count += 1
        return seed


class _RolloutWorker:
    """Owns one env + policy copy; collects fixed-horizon rollouts."""

    def __init__(self, env: DrivingWorld, net: PolicyNet, schedule: _EpisodeSchedule,
                 map_id: int, congestion: str, act_seed: int):
        self.env = env
        self.net = net
        self.schedule = schedule
        self.map_id = map_id
        self.congestion = congestion
        self.rng = np.random.default_rng([act_seed, schedule.worker])
        self.obs = None
        self.hidden = net.initial_hidden()
        self.ep_return = 0.0
        self.ep_steps = 0

    def _begin_episode(self):
        self.obs = self.env.reset(self.schedule.next_seed(), self.map_id, self.congestion)
        self.hidden = self.net.initial_hidden()
        self.ep_return = 0.0
        self.ep_steps = 0

    def collect(self, horizon: int) -> tuple[RolloutBuffer, list]:
        if self.obs is None:
            self._begin_episode()
        buf = RolloutBuffer(1, horizon, self.obs)
        episodes = []
        for _t in range(horizon):
            out = self.net.act(self.obs, self.hidden, rng=self.rng)
            obs_next, reward, done, info = self.env.step(
                Action(accel=float(out.action[0]), steer=float(out.action[1])))
            buf.add(0, self.obs, self.hidden, out, reward, done)
            self.ep_return += reward
            self.ep_steps += 1
            if done:
                episodes.append({"return": self.ep_return, "steps": self.ep_steps,
                                 "success": bool(info["success"])})
                self._begin_episode()
            else:
                self.obs = obs_next
                self.hidden = out.hidden
        buf.bootstrap[0] = self.net.value_estimate(self.obs, self.hidden)
        return buf, episodes


def _worker_proc(conn, env_factory, net_factory, worker_idx, base_seed, map_id, congestion):
    env = env_factory()
    net = net_factory()
    worker = _RolloutWorker(env, net, _EpisodeSchedule(base_seed, worker_idx),
                            map_id, congestion, act_seed=base_seed)
    while True:
        msg = conn.recv()
        if msg[0] == "stop":
            conn.close()
            return
        _, values, horizon = msg
        net.store.load_values(values)
        buf, episodes = worker.collect(horizon)
        conn.send((
            {n: getattr(buf, n) for n in ("images", "road", "veh", "nav", "hidden",
                                          "actions", "raw_actions", "log_probs",
                                          "values", "rewards", "dones", "bootstrap", "_fill")},
            episodes))


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    env_steps: int
    updates: int
    episode_returns: list = field(default_factory=list)


def train(env_factory, net: PolicyNet, config: PpoConfig, run_dir,
          *, map_id: int = 3, congestion: str = "low", workers: int = 1,
          seed: int = 0, checkpoint_writer=None, start_steps: int = 0,
          start_updates: int = 0, log_hook=None) -> TrainResult:
    """PPO training loop: collect -> GAE -> update -> log, resumable.

    `checkpoint_writer(path, store, env_steps, updates)` owns serialization
    (the CLI layer supplies the format); with none given no files are written.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "train_log.jsonl"
    ckpt_path = run_dir / "checkpoint.bevd"
    update_rng = np.random.default_rng([seed, 999])

    procs, conns = [], []
    inline_worker = None
    if workers == 1:
        inline_worker = _RolloutWorker(env_factory(), net, _EpisodeSchedule(seed, 0),
                                       map_id, congestion, act_seed=seed)
    else:
        ctx = mp.get_context("fork")
        net_factory = _net_rebuilder(net)
        for wi in range(workers):
            parent, child = ctx.Pipe()
            p = ctx.Process(target=_worker_proc,
                            args=(child, env_factory, net_factory, wi, seed, map_id, congestion),
                            daemon=True)
            p.start()
            procs.append(p)
            conns.append(parent)

    env_steps = start_steps
    updates = start_updates
    recent_returns: list[float] = []
    all_returns: list[float] = []
    log_fh = open(log_path, "a")
    t_start = time.time()
    try:
        while env_steps < config.total_steps:
            if inline_worker is not None:
                buf, episodes = inline_worker.collect(config.horizon)
            else:
                snapshot = net.store.snapshot()
                for conn in conns:
                    conn.send(("collect", snapshot, config.horizon))
                bufs, episodes = [], []
                for conn in conns:
                    arrays, eps = conn.recv()
                    b = RolloutBuffer.__new__(RolloutBuffer)
                    b.workers, b.horizon = 1, config.horizon
                    for name, arr in arrays.items():
                        setattr(b, name, arr)
                    b.advantages = b.returns = None
                    bufs.append(b)
                    episodes.extend(eps)
                buf = RolloutBuffer.merge(bufs)
            env_steps += workers * config.horizon
            for ep in episodes:
                recent_returns.append(ep["return"])
                all_returns.append(ep["return"])

            compute_gae(buf, config.gamma, config.gae_lambda)
            stats = ppo_update(buf, net, config, update_rng)
            updates += 1

            mean_ret = float(np.mean(recent_returns[-20:])) if recent_returns else 0.0
            record = {"update": updates, "env_steps": env_steps, "mean_return": mean_ret,
                      "episodes": len(all_returns), "wall_time": round(time.time() - t_start, 2),
                      **{k: (round(v, 6) if isinstance(v, float) else v) for k, v in stats.items()}}
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
            if log_hook is not None:
                log_hook(record)
            if checkpoint_writer is not None and (
                    updates % config.checkpoint_every == 0 or env_steps >= config.total_steps):
                checkpoint_writer(ckpt_path, net.store, env_steps, updates)
    finally:
        log_fh.close()
        for conn in conns:
            try:
                conn.send(("stop",))
            except (BrokenPipeError, OSError):
                pass
        for p in procs:
            p.join(timeout=5)
    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path,
                       env_steps=env_steps, updates=updates, episode_returns=all_returns)


def _net_rebuilder(net: PolicyNet):
    """Factory that reconstructs an equivalent net inside a worker process."""
    kind = net.extractor_kind
    cfg = net.extractor.config
    rig = net.rig

    def build():
        return PolicyNet(kind, cfg, rig, seed=0)
    return build
