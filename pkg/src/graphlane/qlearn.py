"""GCN-fronted Q-network, the four DQN-family target rules, TD loss,
replay buffer and epsilon-greedy action selection."""
from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

import numpy as np

from .encoder import EMPTY, N_FEATURES, GraphObservation
from .numerics import (IDENTITY, RELU, DenseLayer, GcnLayer, load_checkpoint,
                       normalize_adjacency, save_checkpoint, CheckpointError)

N_ACTIONS = 3
NO_ACTION = -1


class AlgoVariant(str, enum.Enum):
    DQN = "dqn"
    DOUBLE = "double"
    DUELING = "dueling"
    D3QN = "d3qn"

    @property
    def dueling(self) -> bool:
        return self in (AlgoVariant.DUELING, AlgoVariant.D3QN)

    @property
    def double(self) -> bool:
        return self in (AlgoVariant.DOUBLE, AlgoVariant.D3QN)


def dueling_aggregate(value: np.ndarray, adv: np.ndarray) -> np.ndarray:
    """Q = V + A - mean_a A. ``value`` has a trailing axis of size 1."""
    return value + adv - adv.mean(axis=-1, keepdims=True)


class QNetwork:
    """FC -> GCN -> head, producing a (slots, 3) Q table per observation.

    Rows of padding slots are computed like any other; callers mask them
    with the RL filter.
    """

    def __init__(self, dueling: bool, rng: np.random.Generator | None = None,
                 widths: tuple[int, int, int] = (32, 32, 32), n_features: int = N_FEATURES,
                 literal_norm: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        h1, h2, h3 = widths
        self.dueling = dueling
        self.widths = tuple(widths)
        self.n_features = n_features
        self.fc = DenseLayer.init(rng, n_features, h1, RELU)
        self.gcn = GcnLayer.init(rng, h1, h2)
        self.gcn.literal_norm = literal_norm
        self.hidden = DenseLayer.init(rng, h2, h3, RELU)
        if dueling:
            self.value = DenseLayer.init(rng, h3, 1, IDENTITY)
            self.adv = DenseLayer.init(rng, h3, N_ACTIONS, IDENTITY)
        else:
            self.out = DenseLayer.init(rng, h3, N_ACTIONS, IDENTITY)

    def _layers(self) -> dict[str, object]:
        layers = {"fc": self.fc, "gcn": self.gcn, "hidden": self.hidden}
        if self.dueling:
            layers.update(value=self.value, adv=self.adv)
        else:
            layers["out"] = self.out
        return layers

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed ``layer.tensor``; mutate in place."""
        out = {}
        for lname, layer in self._layers().items():
            out[f"{lname}.W"] = layer.W
            if isinstance(layer, DenseLayer):
                out[f"{lname}.bias"] = layer.bias
        return out

    def clone(self) -> "QNetwork":
        twin = copy.copy(self)
        for lname, layer in self._layers().items():
            setattr(twin, lname, copy.deepcopy(layer))
        return twin

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.params()
        if set(own) != set(tensors):
            raise CheckpointError(f"parameter names differ: {sorted(set(own) ^ set(tensors))}")
        for name, arr in tensors.items():
            if own[name].shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {own[name].shape}")
            own[name][...] = arr

    def forward(self, nodes: np.ndarray, adjacency: np.ndarray) -> np.ndarray:
        if nodes.shape[-1] != self.n_features:
            raise ValueError(f"observation has {nodes.shape[-1]} features, network expects {self.n_features}")
        h = self.fc.forward(nodes)
        g = self.gcn.forward(h, np.asarray(adjacency, dtype=np.float64))
        z = self.hidden.forward(g)
        if self.dueling:
            return dueling_aggregate(self.value.forward(z), self.adv.forward(z))
        return self.out.forward(z)

    def q_values(self, obs: GraphObservation) -> np.ndarray:
        return self.forward(obs.nodes, obs.adjacency)

    def backward(self, dQ: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for the most recent forward call."""
        grads = {}
        if self.dueling:
            dv = dQ.sum(axis=-1, keepdims=True)
            dadv = dQ - dQ.mean(axis=-1, keepdims=True)
            gv, dz_v = self.value.backward(dv)
            ga, dz_a = self.adv.backward(dadv)
            grads.update({f"value.{k}": v for k, v in gv.items()})
            grads.update({f"adv.{k}": v for k, v in ga.items()})
            dz = dz_v + dz_a
        else:
            go, dz = self.out.backward(dQ)
            grads.update({f"out.{k}": v for k, v in go.items()})
        gh, dg = self.hidden.backward(dz)
        grads.update({f"hidden.{k}": v for k, v in gh.items()})
        gg, dh = self.gcn.backward(dg)
        grads["gcn.W"] = gg["W"]
        gf, _ = self.fc.backward(dh)
        grads.update({f"fc.{k}": v for k, v in gf.items()})
        return grads

    def save(self, path, variant: "AlgoVariant") -> None:
        meta = {"variant": variant.value, "widths": list(self.widths), "n_features": self.n_features,
                "dueling": self.dueling, "literal_norm": self.gcn.literal_norm}
        save_checkpoint(path, self.params(), meta)

    @classmethod
    def load(cls, path, expected: "AlgoVariant | None" = None) -> tuple["QNetwork", "AlgoVariant"]:
        tensors, meta = load_checkpoint(path)
        try:
            variant = AlgoVariant(meta["variant"])
            net = cls(bool(meta["dueling"]), widths=tuple(meta["widths"]),
                      n_features=int(meta["n_features"]), literal_norm=bool(meta.get("literal_norm", False)))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: incomplete checkpoint metadata") from exc
        if expected is not None and expected != variant:
            raise CheckpointError(f"{path}: checkpoint holds a {variant.value} network, expected {expected.value}")
        if net.dueling != variant.dueling:
            raise CheckpointError(f"{path}: head kind does not match variant {variant.value}")
        net.load_params(tensors)
        return net, variant


def build_network(variant: AlgoVariant, rng: np.random.Generator,
                  widths=(32, 32, 32), literal_norm: bool = False) -> QNetwork:
    return QNetwork(variant.dueling, rng, widths, literal_norm=literal_norm)


# ---------------------------------------------------------------------------
# targets

def bootstrap_from_tables(variant: AlgoVariant, q_online_next: np.ndarray, q_target_next: np.ndarray) -> np.ndarray:
    """Next-state value per row: max of the target table, or for the double
    variants the target entry at the online argmax."""
    variant = AlgoVariant(variant)
    if variant.double:
        pick = np.argmax(q_online_next, axis=-1)
        return np.take_along_axis(q_target_next, pick[..., None], axis=-1)[..., 0]
    return q_target_next.max(axis=-1)


def target_from_tables(variant: AlgoVariant, reward, q_online_next: np.ndarray,
                       q_target_next: np.ndarray, gamma: float, done: bool = False) -> np.ndarray:
    reward = np.asarray(reward, dtype=np.float64)
    if done:
        return np.broadcast_to(reward, q_target_next.shape[:-1]).astype(np.float64)
    return reward + gamma * bootstrap_from_tables(variant, q_online_next, q_target_next)


def next_slot_index(obs: GraphObservation, next_obs: GraphObservation) -> np.ndarray:
    """For each agent slot of ``obs``, the slot of the same vehicle in
    ``next_obs``, or -1 when it is gone (or no agent sits in the slot)."""
    where = {int(vid): i for i, vid in enumerate(next_obs.slot_map)
             if vid != EMPTY and next_obs.filter[i]}
    idx = np.full(obs.slots, -1, dtype=np.int64)
    for i, vid in enumerate(obs.slot_map):
        if obs.filter[i] and vid != EMPTY:
            idx[i] = where.get(int(vid), -1)
    return idx


def compute_target(variant: AlgoVariant, reward: float, next_obs: GraphObservation, done: bool,
                   online: QNetwork, target: QNetwork, gamma: float,
                   obs: GraphObservation | None = None) -> np.ndarray:
    """TD targets per slot.

    Without ``obs`` the result is indexed by ``next_obs`` slots and is only
    meaningful where its filter is 1. With ``obs`` it is indexed by the slots
    of ``obs``: agents that left the road between the two get ``Y = r``.
    """
    if done:
        n = obs.slots if obs is not None else next_obs.slots
        return np.full(n, float(reward))
    q_next_t = target.q_values(next_obs)
    q_next_o = online.q_values(next_obs) if AlgoVariant(variant).double else q_next_t
    y_next = target_from_tables(variant, reward, q_next_o, q_next_t, gamma)
    if obs is None:
        return y_next
    idx = next_slot_index(obs, next_obs)
    return np.where(idx >= 0, y_next[np.maximum(idx, 0)], float(reward))


# ---------------------------------------------------------------------------
# replay

@dataclass
class Transition:
    obs: GraphObservation
    actions: np.ndarray
    reward: float
    next_obs: GraphObservation
    done: bool
    next_index: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        agent = self.obs.filter.astype(bool)
        if np.any((self.actions >= 0) != agent):
            raise ValueError("actions must be present exactly where the RL filter is 1")
        if self.next_index is None:
            self.next_index = next_slot_index(self.obs, self.next_obs)


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._pos = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._pos] = t
        self._pos = (self._pos + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if len(self._items) < batch_size:
            raise ValueError(f"cannot sample {batch_size} from a buffer holding {len(self._items)}")
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


@dataclass
class Batch:
    nodes: np.ndarray
    adjacency: np.ndarray
    filter: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_nodes: np.ndarray
    next_adjacency: np.ndarray
    next_index: np.ndarray
    dones: np.ndarray

    @classmethod
    def stack(cls, transitions: list[Transition], literal_norm: bool = False) -> "Batch":
        return cls(
            nodes=np.stack([t.obs.nodes for t in transitions]),
            adjacency=normalize_adjacency(np.stack([t.obs.adjacency for t in transitions]), literal_norm),
            filter=np.stack([t.obs.filter for t in transitions]).astype(bool),
            actions=np.stack([t.actions for t in transitions]),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_nodes=np.stack([t.next_obs.nodes for t in transitions]),
            next_adjacency=normalize_adjacency(np.stack([t.next_obs.adjacency for t in transitions]), literal_norm),
            next_index=np.stack([t.next_index for t in transitions]),
            dones=np.array([t.done for t in transitions], dtype=bool),
        )


def _forward_normalized(net: QNetwork, nodes: np.ndarray, A_hat: np.ndarray) -> np.ndarray:
    h = net.fc.forward(nodes)
    g = net.gcn.forward(h, A_hat, normalized=True)
    z = net.hidden.forward(g)
    if net.dueling:
        return dueling_aggregate(net.value.forward(z), net.adv.forward(z))
    return net.out.forward(z)


def batch_targets(batch: Batch, online: QNetwork, target: QNetwork, variant: AlgoVariant, gamma: float) -> np.ndarray:
    """(B, slots) TD targets aligned with the slots of the current states."""
    variant = AlgoVariant(variant)
    q_t = _forward_normalized(target, batch.next_nodes, batch.next_adjacency)
    q_o = _forward_normalized(online, batch.next_nodes, batch.next_adjacency) if variant.double else q_t
    boot = bootstrap_from_tables(variant, q_o, q_t)                      # (B, slots) by next slot
    gathered = np.take_along_axis(boot, np.maximum(batch.next_index, 0), axis=1)
    alive = (batch.next_index >= 0) & ~batch.dones[:, None]
    return batch.rewards[:, None] + gamma * np.where(alive, gathered, 0.0)


def td_loss_and_grads(transitions: list[Transition], online: QNetwork, target: QNetwork,
                      variant: AlgoVariant, gamma: float) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared TD error over every (transition, agent slot) pair.

    Targets are constants; the gradient enters only through the Q entry of
    the action each agent took.
    """
    batch = Batch.stack(transitions, online.gcn.literal_norm)
    n_terms = int(batch.filter.sum())
    if n_terms == 0:
        raise ValueError("batch contains no agent slots")
    y = batch_targets(batch, online, target, variant, gamma)
    q = _forward_normalized(online, batch.nodes, batch.adjacency)
    taken = np.take_along_axis(q, np.maximum(batch.actions, 0)[..., None], axis=-1)[..., 0]
    diff = np.where(batch.filter, taken - y, 0.0)
    loss = float(np.sum(diff * diff) / n_terms)
    dQ = np.zeros_like(q)
    np.put_along_axis(dQ, np.maximum(batch.actions, 0)[..., None], (2.0 * diff / n_terms)[..., None], axis=-1)
    return loss, online.backward(dQ)


# ---------------------------------------------------------------------------
# acting

def epsilon_greedy(q: np.ndarray, agent_mask: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Per agent slot: uniform random action with probability epsilon, else
    the argmax (lowest index on ties). Non-agent slots get -1."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    mask = np.asarray(agent_mask).astype(bool)
    actions = np.full(q.shape[0], NO_ACTION, dtype=np.int64)
    k = int(mask.sum())
    if k == 0:
        return actions
    greedy = np.argmax(q[mask], axis=-1)
    if epsilon > 0.0:
        explore = rng.random(k) < epsilon
        random_actions = rng.integers(0, N_ACTIONS, size=k)
        greedy = np.where(explore, random_actions, greedy)
    actions[mask] = greedy
    return actions


def select_actions(net: QNetwork, obs: GraphObservation, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    return epsilon_greedy(net.q_values(obs), obs.filter, epsilon, rng)


def random_actions(obs: GraphObservation, rng: np.random.Generator) -> np.ndarray:
    mask = obs.filter.astype(bool)
    actions = np.full(obs.slots, NO_ACTION, dtype=np.int64)
    actions[mask] = rng.integers(0, N_ACTIONS, size=int(mask.sum()))
    return actions
