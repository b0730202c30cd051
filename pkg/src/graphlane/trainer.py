"""Training, greedy evaluation and rule-based baseline runs, with per-episode
metrics written as CSV."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .encoder import EncoderConfig, GraphObservation, encode
from .numerics import AdamState, DivergenceError, adam_step, soft_update
from .qlearn import (AlgoVariant, QNetwork, ReplayBuffer, Transition, build_network,
                     epsilon_greedy, random_actions, td_loss_and_grads)
from .sim import Action, ScenarioConfig, SimState, baseline_policy, is_terminal, step

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["episode", "steps", "total_reward", "mean_loss", "mean_q", "epsilon",
                  "collisions", "exits_correct", "exits_missed", "wall_time_s"]

# stream tags for SeedSequence entropy; keep stable, they define the runs
_NET, _AGENT, _TRAIN_SIM, _EVAL_SIM = 0, 1, 2, 3


def seed_sequence(root: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root), *path])


def eval_sim_seed(root: int, episode: int) -> np.random.SeedSequence:
    return seed_sequence(root, _EVAL_SIM, episode)


@dataclass
class TrainConfig:
    variant: AlgoVariant = AlgoVariant.D3QN
    episodes: int = 150
    random_phase_steps: int = 20000
    batch_size: int = 32
    replay_capacity: int = 10**6
    gamma: float = 0.9
    lr: float = 1e-4
    online_update_every: int = 10
    target_update_every: int = 1000
    soft_tau: float = 0.01
    epsilon: float = 0.05
    epsilon_schedule: str = "constant"  # or "linear"
    epsilon_start: float = 1.0
    epsilon_decay_steps: int = 10000
    seeds: int = 3
    h1: int = 32
    h2: int = 32
    h3: int = 32
    literal_norm: bool = False
    eval_episodes: int = 10
    eval_every: int = 0
    workers: int = 1

    def validate(self) -> None:
        self.variant = AlgoVariant(self.variant)
        for name in ("episodes", "batch_size", "replay_capacity", "online_update_every",
                     "target_update_every", "seeds", "h1", "h2", "h3", "eval_episodes",
                     "workers", "epsilon_decay_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"training.{name} must be positive")
        if self.random_phase_steps < 0 or self.eval_every < 0:
            raise ValueError("training.random_phase_steps and training.eval_every must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("training.gamma must lie in [0, 1)")
        for name in ("epsilon", "epsilon_start", "soft_tau"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"training.{name} must lie in [0, 1]")
        if not self.lr > 0:
            raise ValueError("training.lr must be positive")
        if self.epsilon_schedule not in ("constant", "linear"):
            raise ValueError("training.epsilon_schedule must be 'constant' or 'linear'")

    @property
    def widths(self) -> tuple[int, int, int]:
        return (self.h1, self.h2, self.h3)

    def epsilon_at(self, post_phase_steps: int) -> float:
        if self.epsilon_schedule == "constant":
            return self.epsilon
        frac = min(post_phase_steps / self.epsilon_decay_steps, 1.0)
        return self.epsilon_start + frac * (self.epsilon - self.epsilon_start)


@dataclass
class EpisodeMetrics:
    episode: int
    steps: int = 0
    total_reward: float = 0.0
    mean_loss: float | None = None
    mean_q: float | None = None
    epsilon: float | None = None
    collisions: int = 0
    exits_correct: int = 0
    exits_missed: int = 0
    wall_time: float = 0.0

    def row(self, with_wall_time: bool) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))
        return [str(self.episode), str(self.steps), fmt(self.total_reward), fmt(self.mean_loss),
                fmt(self.mean_q), fmt(self.epsilon), str(self.collisions), str(self.exits_correct),
                str(self.exits_missed), fmt(self.wall_time) if with_wall_time else ""]


def write_metrics(path, metrics: list[EpisodeMetrics], with_wall_time: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for m in metrics:
            writer.writerow(m.row(with_wall_time))


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class QMeter:
    """Running mean of Q entries over agent slots and all actions."""

    def __init__(self):
        self.total = 0.0
        self.count = 0

    def add(self, q: np.ndarray, mask: np.ndarray) -> None:
        rows = q[np.asarray(mask).astype(bool)]
        self.total += float(rows.sum())
        self.count += rows.size

    @property
    def mean(self) -> float | None:
        return self.total / self.count if self.count else None


def episode_mean_q(q_tables: list[np.ndarray], masks: list[np.ndarray]) -> float | None:
    meter = QMeter()
    for q, mask in zip(q_tables, masks):
        meter.add(q, mask)
    return meter.mean


def _action_map(obs: GraphObservation, actions: np.ndarray) -> dict[int, Action]:
    return {int(obs.slot_map[i]): Action(int(a)) for i, a in enumerate(actions) if a >= 0}


def run_episode(policy: Callable[[SimState, GraphObservation], dict[int, Action]],
                scenario: ScenarioConfig, encoder: EncoderConfig, sim_seed,
                episode: int = 0, q_net: QNetwork | None = None,
                on_step: Callable | None = None) -> tuple[EpisodeMetrics, SimState]:
    """Play one episode with a fixed policy, no learning."""
    start = time.perf_counter()
    state = SimState.initial(scenario, sim_seed)
    metrics = EpisodeMetrics(episode)
    meter = QMeter()
    obs = encode(state, encoder)
    while not is_terminal(state, scenario):
        if q_net is not None and obs.n_agents:
            meter.add(q_net.q_values(obs), obs.filter)
        state, out = step(state, policy(state, obs), scenario)
        obs = encode(state, encoder)
        _accumulate(metrics, out)
        if on_step is not None:
            on_step(state, out)
    metrics.mean_q = meter.mean
    metrics.wall_time = time.perf_counter() - start
    return metrics, state


def _accumulate(metrics: EpisodeMetrics, out) -> None:
    metrics.steps += 1
    metrics.total_reward += out.reward_total
    metrics.collisions += out.collisions
    metrics.exits_correct += out.exits_correct
    metrics.exits_missed += out.exits_missed


def greedy_policy(net: QNetwork):
    def policy(state: SimState, obs: GraphObservation) -> dict[int, Action]:
        if not obs.n_agents:
            return {}
        return _action_map(obs, epsilon_greedy(net.q_values(obs), obs.filter, 0.0, None))
    return policy


def evaluate(net: QNetwork, scenario: ScenarioConfig, encoder: EncoderConfig,
             episodes: int = 10, root_seed: int = 0) -> tuple[float, float, list[EpisodeMetrics]]:
    """Greedy test protocol: epsilon 0, no learning, no replay writes."""
    metrics = []
    policy = greedy_policy(net)
    for k in range(episodes):
        m, _ = run_episode(policy, scenario, encoder, eval_sim_seed(root_seed, k), k, q_net=net)
        m.epsilon = 0.0
        metrics.append(m)
    totals = np.array([m.total_reward for m in metrics])
    return float(totals.mean()), float(totals.std()), metrics


def run_baseline(scenario: ScenarioConfig, encoder: EncoderConfig, episodes: int = 10,
                 root_seed: int = 0) -> tuple[float, float, list[EpisodeMetrics]]:
    """Rule-based controller on the same evaluation traffic as :func:`evaluate`."""
    metrics = []
    for k in range(episodes):
        m, _ = run_episode(lambda state, obs: baseline_policy(state, scenario),
                           scenario, encoder, eval_sim_seed(root_seed, k), k)
        metrics.append(m)
    totals = np.array([m.total_reward for m in metrics])
    return float(totals.mean()), float(totals.std()), metrics


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SeedRun:
    """Everything produced by training one seed."""
    seed_index: int
    metrics: list[EpisodeMetrics] = field(default_factory=list)
    online: QNetwork | None = None
    target: QNetwork | None = None
    transitions_stored: int = 0
    agent_steps: int = 0
    updates: int = 0
    target_syncs: int = 0
    diverged: str | None = None
    best: QNetwork | None = None


def train_seed(scenario: ScenarioConfig, encoder: EncoderConfig, cfg: TrainConfig,
               root_seed: int, seed_index: int,
               on_update: Callable[[SeedRun, int], None] | None = None) -> SeedRun:
    """Two-phase training for one seed.

    For the first ``random_phase_steps`` environment steps (counted across
    episodes) AVs act uniformly at random and nothing is learned. After
    that, epsilon-greedy acting, one gradient step every
    ``online_update_every`` steps and a soft target blend every
    ``target_update_every`` steps.
    """
    cfg.validate()
    variant = AlgoVariant(cfg.variant)
    net_rng = np.random.default_rng(seed_sequence(root_seed, seed_index, _NET))
    rng = np.random.default_rng(seed_sequence(root_seed, seed_index, _AGENT))
    online = build_network(variant, net_rng, cfg.widths, cfg.literal_norm)
    target = online.clone()
    params, target_params = online.params(), target.params()
    adam = AdamState()
    buffer = ReplayBuffer(cfg.replay_capacity)
    run = SeedRun(seed_index, online=online, target=target)
    global_step = 0
    post_steps = 0
    best_eval = -math.inf

    for ep in range(cfg.episodes):
        start = time.perf_counter()
        state = SimState.initial(scenario, seed_sequence(root_seed, seed_index, _TRAIN_SIM, ep))
        metrics = EpisodeMetrics(ep)
        meter = QMeter()
        losses = []
        obs = encode(state, encoder)
        eps_used = 1.0
        while not is_terminal(state, scenario):
            in_random_phase = global_step < cfg.random_phase_steps
            actions = None
            if obs.n_agents:
                q = online.q_values(obs)
                meter.add(q, obs.filter)
                if in_random_phase:
                    actions = random_actions(obs, rng)
                    eps_used = 1.0
                else:
                    eps_used = cfg.epsilon_at(post_steps)
                    actions = epsilon_greedy(q, obs.filter, eps_used, rng)
            state, out = step(state, _action_map(obs, actions) if actions is not None else {}, scenario)
            next_obs = encode(state, encoder)
            _accumulate(metrics, out)
            if actions is not None:
                buffer.push(Transition(obs, actions, out.reward_total, next_obs, out.done))
                run.transitions_stored += 1
                run.agent_steps += 1
            global_step += 1
            if not in_random_phase:
                post_steps += 1
                if post_steps % cfg.online_update_every == 0 and len(buffer) >= cfg.batch_size:
                    batch = buffer.sample(cfg.batch_size, rng)
                    try:
                        loss, grads = td_loss_and_grads(batch, online, target, variant, cfg.gamma)
                        if not math.isfinite(loss):
                            raise DivergenceError(f"loss became {loss}")
                        adam_step(params, grads, adam, cfg.lr)
                    except DivergenceError as exc:
                        run.diverged = f"episode {ep}, global step {global_step}: {exc}"
                        metrics.mean_loss = float(np.mean(losses)) if losses else None
                        metrics.mean_q, metrics.epsilon = meter.mean, eps_used
                        run.metrics.append(metrics)
                        return run
                    losses.append(loss)
                    run.updates += 1
                    if on_update is not None:
                        on_update(run, global_step)
                if post_steps % cfg.target_update_every == 0:
                    soft_update(target_params, params, cfg.soft_tau)
                    run.target_syncs += 1
            obs = next_obs
        metrics.mean_loss = float(np.mean(losses)) if losses else None
        metrics.mean_q = meter.mean
        metrics.epsilon = eps_used
        metrics.wall_time = time.perf_counter() - start
        run.metrics.append(metrics)
        log.info("seed %d episode %d: reward %.2f loss %s q %s", seed_index, ep,
                 metrics.total_reward, metrics.mean_loss, metrics.mean_q)
        if cfg.eval_every and (ep + 1) % cfg.eval_every == 0:
            score, _, _ = evaluate(online, scenario, encoder, cfg.eval_episodes, root_seed)
            if score > best_eval:
                best_eval = score
                run.best = online.clone()
    return run


@dataclass
class RunPaths:
    out_dir: Path
    variant: str

    def metrics(self, seed_index: int) -> Path:
        return self.out_dir / f"metrics_{self.variant}_seed{seed_index}.csv"

    def checkpoint(self, seed_index: int) -> Path:
        return self.out_dir / f"checkpoint_{self.variant}_seed{seed_index}.ckpt"

    def best(self, seed_index: int) -> Path:
        return self.out_dir / f"best_{self.variant}_seed{seed_index}.ckpt"

    def diverged(self, seed_index: int) -> Path:
        return self.out_dir / f"diverged_{self.variant}_seed{seed_index}.json"


def _train_and_write(args) -> tuple[int, str | None]:
    scenario, encoder, cfg, root_seed, seed_index, out_dir, wall_time = args
    paths = RunPaths(Path(out_dir), AlgoVariant(cfg.variant).value)
    run = train_seed(scenario, encoder, cfg, root_seed, seed_index)
    write_metrics(paths.metrics(seed_index), run.metrics, wall_time)
    if run.diverged:
        paths.diverged(seed_index).write_text(json.dumps({"seed": seed_index, "reason": run.diverged}) + "\n")
        return seed_index, run.diverged
    run.online.save(paths.checkpoint(seed_index), AlgoVariant(cfg.variant))
    if run.best is not None:
        run.best.save(paths.best(seed_index), AlgoVariant(cfg.variant))
    return seed_index, None


def train(scenario: ScenarioConfig, encoder: EncoderConfig, cfg: TrainConfig, root_seed: int,
          out_dir, record_wall_time: bool = False) -> dict[int, str | None]:
    """Train every seed and write metrics and checkpoints into ``out_dir``.

    Returns {seed index: divergence reason or None}.
    """
    cfg.validate()
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(scenario, encoder, cfg, root_seed, i, str(out_dir), record_wall_time) for i in range(cfg.seeds)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            results = list(pool.map(_train_and_write, jobs))
    else:
        results = [_train_and_write(job) for job in jobs]
    return dict(results)


def aggregate_metrics(out_dir, dest=None) -> Path:
    """Merge every per-seed metrics CSV in ``out_dir`` into one file with
    leading ``variant,seed`` columns."""
    out_dir = Path(out_dir)
    dest = Path(dest) if dest is not None else out_dir / "metrics_aggregate.csv"
    files = sorted(out_dir.glob("metrics_*_seed*.csv"))
    with open(dest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "seed"] + METRIC_COLUMNS)
        for path in files:
            stem = path.stem[len("metrics_"):]
            variant, _, seed = stem.rpartition("_seed")
            for row in read_metrics(path):
                writer.writerow([variant, seed] + [row[c] for c in METRIC_COLUMNS])
    return dest
