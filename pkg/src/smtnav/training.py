"""Deep Q-learning over whole-episode replay, embedding pretraining, evaluation."""

from __future__ import annotations

import copy
import csv
import logging
import pickle
from concurrent.futures import ThreadPoolExecutor
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .embedding import Observation
from .env import DynamicsConfig, Floorplan, FloorplanConfig, NavEnv, generate_floorplan
from .errors import ConfigurationError, ContractError, RolloutError
from .memory import SceneMemory
from .policy import PolicyConfig, PolicyNetwork, greedy_action, sample_action
from .tasks import TaskConfig, initial_state, metrics, reward, terminated

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class EpisodeTrace:
    task: str
    plan_seed: int | None
    env_seed: tuple
    policy_seed: tuple
    start: tuple
    observations: list[Observation]
    actions: list[int]
    rewards: list[float]
    collided: list[bool]
    true_poses: np.ndarray
    plan_classes: list[int]
    fingerprints: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def reported_poses(self) -> np.ndarray:
        if "poses" not in self._cache:
            self._cache["poses"] = np.array([o.pose for o in self.observations])
        return self._cache["poses"]

    @property
    def prev_actions(self) -> np.ndarray:
        if "prev" not in self._cache:
            self._cache["prev"] = np.array([o.prev_action for o in self.observations])
        return self._cache["prev"]

    def static_embeddings(self, emb, fingerprint: str | None = None):
        """Cached ray/action encoder outputs for every observation (frozen encoders)."""
        key = ("static", fingerprint or emb.fingerprint())
        if key not in self._cache:
            from .embedding import image_features

            feats = np.array([image_features(o, emb.cfg.depth_range) for o in self.observations])
            with ad.no_grad():
                img = emb.encode_image(feats).value
                act = emb.encode_action(self.prev_actions).value
            for k in [k for k in self._cache if isinstance(k, tuple) and k[0] == "static"]:
                del self._cache[k]
            self._cache[key] = (img, act)
        return self._cache[key]

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state


def collect_episode(net: PolicyNetwork, env: NavEnv, task: TaskConfig,
                    rng: np.random.Generator, temperature: float | None = None,
                    greedy: bool = False, plan_seed: int | None = None,
                    env_seed=(), policy_seed=()) -> EpisodeTrace:
    """Roll update -> read -> act -> step until the task terminates."""
    obs = env.reset()
    start = env.state
    ts = initial_state(task, start)
    memory = SceneMemory(net.cfg.capacity) if net.uses_memory else None
    observations, actions, rewards, collided = [obs], [], [], []
    poses = [start.pose]
    t = 0
    while True:
        try:
            if memory is not None:
                memory.update(obs, net.embedder)
            d = net.forward(obs, memory, temperature)
            a = greedy_action(d) if greedy else sample_action(d, rng)
            obs, hit = env.step(a)
            r, ts = reward(ts, env.state, a, hit, obs, task)
        except RolloutError:
            raise
        except Exception as exc:  # attach the step index to simulator faults
            raise RolloutError(f"episode step {t}: {exc}") from exc
        observations.append(obs)
        actions.append(int(a))
        rewards.append(float(r))
        collided.append(bool(hit))
        poses.append(env.state.pose)
        t += 1
        if terminated(ts, env.state, t, task.horizon, task.max_collisions):
            break
    return EpisodeTrace(task=task.kind, plan_seed=plan_seed, env_seed=tuple(env_seed),
                        policy_seed=tuple(policy_seed), start=(start.x, start.y, start.theta),
                        observations=observations, actions=actions, rewards=rewards,
                        collided=collided, true_poses=np.array(poses),
                        plan_classes=env.plan.classes,
                        fingerprints={"policy": net.cfg.kind})


def replay_rewards(trace: EpisodeTrace, task: TaskConfig) -> list[float]:
    """Recompute per-step rewards from the recorded poses, flags and observations."""
    from .env.dynamics import AgentState

    s0 = AgentState(*trace.start)
    ts = initial_state(task, s0)
    out = []
    for k, a in enumerate(trace.actions):
        p = trace.true_poses[k + 1]
        s = AgentState(float(p[0]), float(p[1]), float(p[2]))
        r, ts = reward(ts, s, a, trace.collided[k], trace.observations[k + 1], task)
        out.append(r)
    return out


class ReplayBuffer:
    """Ring of whole episodes; the oldest is replaced first."""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be at least 1")
        self.capacity = capacity
        self._items: deque[EpisodeTrace] = deque(maxlen=capacity)

    def add(self, trace: EpisodeTrace) -> None:
        self._items.append(trace)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> EpisodeTrace:
        return self._items[i]

    def __iter__(self):
        return iter(self._items)


# ---------------------------------------------------------------------------
# batched memory reconstruction and the Q-learning step
# ---------------------------------------------------------------------------


def memory_rows(trace: EpisodeTrace, t: int, capacity: int) -> range:
    return range(max(0, t - capacity + 1), t + 1)


def build_memory_batch(net: PolicyNetwork, samples) -> tuple[Tensor, np.ndarray]:
    """Stack the memories ``M_t`` of ``(trace, t)`` samples, each seen from pose ``t``.

    Each segment ends with the row of observation ``t`` itself.  With frozen
    encoders the ray/action parts come from a per-trace cache and the result
    carries no gradient into the embedding networks.
    """
    emb = net.embedder
    cap = net.cfg.capacity if net.uses_memory else 1
    offsets = [0]
    pose_feats = []
    for trace, t in samples:
        rows = memory_rows(trace, t, cap)
        poses = trace.reported_poses
        pose_feats.append(emb.pose_features(poses[rows.start:rows.stop], poses[t],
                                            np.arange(rows.start, rows.stop), t))
        offsets.append(offsets[-1] + len(rows))
    pf = np.concatenate(pose_feats, axis=0)
    if emb.frozen:
        fp = emb.fingerprint()
        imgs, acts = [], []
        for trace, t in samples:
            rows = memory_rows(trace, t, cap)
            img, act = trace.static_embeddings(emb, fp)
            imgs.append(img[rows.start:rows.stop])
            acts.append(act[rows.start:rows.stop])
        with ad.no_grad():
            mem = emb.combine(Tensor(np.concatenate(imgs)), emb.encode_pose(pf),
                              Tensor(np.concatenate(acts)))
        return Tensor(mem.value), np.asarray(offsets, dtype=np.int64)
    from .embedding import image_features

    feats, acts = [], []
    for trace, t in samples:
        for k in memory_rows(trace, t, cap):
            feats.append(image_features(trace.observations[k], emb.cfg.depth_range))
            acts.append(trace.prev_actions[k])
    mem = emb.combine(emb.encode_image(np.array(feats)), emb.encode_pose(pf),
                      emb.encode_action(np.array(acts)))
    return mem, np.asarray(offsets, dtype=np.int64)


@dataclass
class TrainConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    floorplan: FloorplanConfig = field(default_factory=FloorplanConfig)
    plan_seeds: list = field(default_factory=lambda: list(range(10)))
    validation_fraction: float = 0.2
    batch_size: int = 64
    lr: float = 5e-4
    gamma: float = 0.99
    huber_delta: float = 1.0
    buffer_capacity: int = 1000
    initial_episodes: int = 1000
    refresh_interval: int = 500
    target_sync_interval: int = 500
    validate_interval: int = 2500
    validation_episodes: int = 10
    max_iterations: int = 50000
    patience: int = 5
    temperature_start: float = 1.0
    temperature_end: float = 0.1
    eval_temperature: float = 0.5
    eval_greedy: bool = False
    pose_source: str = "true"
    seed: int = 0
    pretrain_iterations: int | None = None

    def validate(self) -> None:
        self.task.validate()
        self.policy.validate()
        self.dynamics.validate()
        self.floorplan.validate()
        positive = ("batch_size", "lr", "buffer_capacity", "initial_episodes",
                    "refresh_interval", "target_sync_interval", "validate_interval",
                    "validation_episodes", "max_iterations", "patience")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"train.{name} must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.initial_episodes > self.buffer_capacity:
            raise ConfigurationError("initial_episodes exceeds buffer capacity")
        if len(self.plan_seeds) < 1:
            raise ConfigurationError("need at least one plan seed")
        if self.policy.embedding.num_rays != self.dynamics.num_rays:
            raise ConfigurationError("embedding ray count differs from the sensor ray count")

    def temperature(self, iteration: int) -> float:
        frac = min(1.0, iteration / max(1, self.max_iterations))
        return self.temperature_start + frac * (self.temperature_end - self.temperature_start)


def dqn_step(buffer: ReplayBuffer, net: PolicyNetwork, target: PolicyNetwork,
             cfg: TrainConfig, rng: np.random.Generator) -> float:
    """One minibatch Q-learning update; returns the Huber loss before the update."""
    if len(buffer) == 0:
        raise ContractError("dqn_step: replay buffer is empty")
    B = cfg.batch_size
    ep = rng.integers(len(buffer), size=B)
    samples = []
    for e in ep:
        tr = buffer[int(e)]
        samples.append((tr, int(rng.integers(len(tr)))))
    actions = np.array([tr.actions[t] for tr, t in samples])
    rewards = np.array([tr.rewards[t] for tr, t in samples])
    live = np.array([t + 1 < len(tr) for tr, t in samples])
    y = rewards.copy()
    if cfg.gamma > 0 and live.any():
        nxt = [(tr, t + 1) for (tr, t), ok in zip(samples, live) if ok]
        with ad.no_grad():
            mem_n, off_n = build_memory_batch(target, nxt)
            qn = target.q_values(mem_n, off_n).value
        y[live] += cfg.gamma * qn.max(axis=1)
    mem, off = build_memory_batch(net, samples)
    q = net.q_values(mem, off)
    err = ad.add(ad.pick_cols(q, actions), Tensor(-y[:, None]))
    loss = ad.mean_all(ad.huber(err, cfg.huber_delta))
    store = net.store
    store.zero_grad()
    ad.backward(loss)
    ad.adam_step(store, store.grads(), lr=cfg.lr)
    return float(loss.value[0, 0])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def episode_seeds(base: int, plan_seed: int, episode: int, stream: int) -> tuple:
    return (int(base), int(plan_seed), int(episode), int(stream))


def run_episode(net: PolicyNetwork, plan: Floorplan, plan_seed: int, cfg: TrainConfig,
                base_seed: int, episode: int, temperature: float, greedy: bool = False,
                dynamics: DynamicsConfig | None = None) -> EpisodeTrace:
    es = episode_seeds(base_seed, plan_seed, episode, 0)
    ps = episode_seeds(base_seed, plan_seed, episode, 1)
    env = NavEnv(plan, dynamics or cfg.dynamics, np.random.default_rng(es), cfg.pose_source)
    return collect_episode(net, env, cfg.task, np.random.default_rng(ps), temperature, greedy,
                           plan_seed=plan_seed, env_seed=es, policy_seed=ps)


def evaluate(net: PolicyNetwork, plans: list[tuple[int, Floorplan]], cfg: TrainConfig,
             episodes: int | None = None, base_seed: int = 10_000,
             temperature: float | None = None, greedy: bool | None = None,
             dynamics: DynamicsConfig | None = None, workers: int = 1,
             traces: list | None = None) -> list[dict]:
    """Fixed-seed episodes on each plan; one metrics row per episode.

    Episodes are independent (own seeds, read-only parameters), so with
    ``workers > 1`` they run on a thread pool; rows keep plan/episode order.
    """
    episodes = cfg.validation_episodes if episodes is None else episodes
    temperature = cfg.eval_temperature if temperature is None else temperature
    greedy = cfg.eval_greedy if greedy is None else greedy
    jobs = [(seed, plan, e) for seed, plan in plans for e in range(episodes)]

    def one(job):
        seed, plan, e = job
        return run_episode(net, plan, seed, cfg, base_seed, e, temperature, greedy, dynamics)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(one, jobs))
    else:
        done = [one(j) for j in jobs]
    rows = []
    for (seed, _, e), tr in zip(jobs, done):
        m = metrics(tr, cfg.task)
        m.update({"plan": seed, "episode": e})
        rows.append(m)
    if traces is not None:
        traces.extend(done)
    return rows


def mean_reward(rows: list[dict]) -> float:
    return float(np.mean([r["reward"] for r in rows])) if rows else 0.0


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def split_plans(cfg: TrainConfig) -> tuple[list, list]:
    plans = [(s, generate_floorplan(s, cfg.floorplan)) for s in cfg.plan_seeds]
    n_val = int(round(cfg.validation_fraction * len(plans)))
    if len(plans) == 1:
        return plans, plans
    n_val = max(1, n_val)
    return plans[:-n_val], plans[-n_val:]


def random_policy(cfg: TrainConfig) -> PolicyNetwork:
    rc = copy.deepcopy(cfg.policy)
    rc.kind = "random"
    return PolicyNetwork(rc)


def transfer_embeddings(src: ParamStore, dst: ParamStore, freeze: bool = True) -> list[str]:
    names = [n for n in src.names() if n.startswith("emb.")]
    for n in names:
        if n not in dst:
            raise ConfigurationError(f"target network lacks embedding parameter {n}")
        if dst[n].shape != src[n].shape:
            raise ConfigurationError(f"embedding parameter {n} shape mismatch")
        dst[n].value = src[n].value.copy()
    if freeze:
        dst.set_trainable(names, False)
    return names


CURVE_FIELDS = ("iteration", "reward", "distance", "collisions", "covered_cells",
                "found_classes", "ratio", "loss", "temperature")


@dataclass
class TrainResult:
    store: ParamStore
    best_score: float
    curve: list[dict]
    iterations: int
    checkpoint: Path | None = None


@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit."""

    iteration: int
    store: ParamStore
    target: ParamStore
    best_store: ParamStore | None
    best_score: float
    bad_rounds: int
    buffer: ReplayBuffer
    rng: np.random.Generator
    curve: list
    losses: list


def _summarize(rows, it, loss, temp) -> dict:
    keys = ("reward", "distance", "collisions", "covered_cells", "found_classes", "ratio")
    out = {"iteration": it}
    for k in keys:
        out[k] = float(np.mean([r[k] for r in rows]))
    out["loss"] = float(loss)
    out["temperature"] = float(temp)
    return out


def write_curve(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k])
                        for k in CURVE_FIELDS})


def _init_state(cfg: TrainConfig, init_store: ParamStore | None) -> TrainState:
    rng = np.random.default_rng([cfg.seed, 7])
    net = PolicyNetwork(cfg.policy, rng=np.random.default_rng([cfg.seed, 11]))
    if init_store is not None:
        transfer_embeddings(init_store, net.store, freeze=True)
    train_plans, _ = split_plans(cfg)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    rnd = random_policy(cfg)
    for e in range(cfg.initial_episodes):
        seed, plan = train_plans[e % len(train_plans)]
        buffer.add(run_episode(rnd, plan, seed, cfg, cfg.seed * 1_000_003 + 1, e, 1.0))
    return TrainState(0, net.store, net.store.copy(), None, -np.inf, 0, buffer, rng, [], [])


def save_state(state: TrainState, path) -> None:
    with open(path, "wb") as fh:
        pickle.dump(state, fh, protocol=pickle.HIGHEST_PROTOCOL)


def load_state(path) -> TrainState:
    with open(path, "rb") as fh:
        return pickle.load(fh)


def train(cfg: TrainConfig, out_dir=None, init_store: ParamStore | None = None,
          resume: TrainState | None = None, stop_at: int | None = None,
          on_validate: Callable | None = None) -> TrainResult:
    """Fill the buffer randomly, then alternate Q-learning updates, refreshes and validation.

    ``stop_at`` halts after that many iterations and stores a resumable
    state (``state.pkl``) in ``out_dir``.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    st = resume if resume is not None else _init_state(cfg, init_store)
    net = PolicyNetwork(cfg.policy, st.store)
    target = PolicyNetwork(cfg.policy, st.target)
    train_plans, val_plans = split_plans(cfg)
    limit = cfg.max_iterations if stop_at is None else min(stop_at, cfg.max_iterations)
    ckpt = out / "best.ckpt" if out is not None else None
    while st.iteration < limit:
        st.iteration += 1
        it = st.iteration
        st.losses.append(dqn_step(st.buffer, net, target, cfg, st.rng))
        if it % cfg.target_sync_interval == 0:
            st.target.load_values(st.store)
        if it % cfg.refresh_interval == 0:
            k = it // cfg.refresh_interval
            seed, plan = train_plans[k % len(train_plans)]
            st.buffer.add(run_episode(net, plan, seed, cfg, cfg.seed * 1_000_003 + 2, k,
                                      cfg.temperature(it)))
        if it % cfg.validate_interval == 0 or it == cfg.max_iterations:
            rows = evaluate(net, val_plans, cfg)
            recent = st.losses[-cfg.validate_interval:]
            row = _summarize(rows, it, np.mean(recent), cfg.temperature(it))
            st.curve.append(row)
            log.info("iter %d  val reward %.2f  loss %.4f", it, row["reward"], row["loss"])
            if on_validate is not None:
                on_validate(row)
            if row["reward"] > st.best_score:
                st.best_score = row["reward"]
                st.best_store = st.store.copy()
                st.bad_rounds = 0
                if ckpt is not None:
                    st.best_store.save(ckpt)
            else:
                st.bad_rounds += 1
                if st.bad_rounds >= cfg.patience:
                    log.info("stopping at iteration %d: no improvement in %d validations",
                             it, cfg.patience)
                    break
    if out is not None:
        write_curve(out / "curve.csv", st.curve)
        if stop_at is not None and st.iteration < cfg.max_iterations:
            save_state(st, out / "state.pkl")
    best = st.best_store if st.best_store is not None else st.store.copy()
    return TrainResult(best, float(st.best_score), st.curve, st.iteration, ckpt)


def pretrain_embeddings(cfg: TrainConfig, out_dir=None) -> ParamStore:
    """Train SMT end-to-end with a one-element memory; return it with frozen encoders."""
    pc = copy.deepcopy(cfg)
    pc.policy.kind = "smt"
    pc.policy.capacity = 1
    if cfg.pretrain_iterations is not None:
        pc.max_iterations = cfg.pretrain_iterations
    result = train(pc, out_dir)
    store = result.store
    store.freeze("emb.")
    return store
