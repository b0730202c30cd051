"""Graph observation of a traffic state: node features, adjacency, RL filter."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import N_LANES, ScenarioConfig, SimState, Vehicle

N_FEATURES = 8
EMPTY = -1


@dataclass
class EncoderConfig:
    slots: int = 40
    sensing_range: float = 30.0
    v_max_hv: float = 60.0 / 3.6
    v_max_av: float = 75.0 / 3.6
    highway_length: float = 500.0

    @classmethod
    def from_scenario(cls, scenario: ScenarioConfig, slots: int | None = None) -> "EncoderConfig":
        return cls(
            slots=scenario.total_vehicles if slots is None else slots,
            sensing_range=scenario.sensing_range,
            v_max_hv=scenario.v_max_hv,
            v_max_av=scenario.v_max_av,
            highway_length=scenario.highway_length,
        )

    def validate(self) -> None:
        if self.slots < 1:
            raise ValueError("encoder.slots must be positive")
        for name in ("sensing_range", "v_max_hv", "v_max_av", "highway_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"encoder.{name} must be positive")


class SlotOverflow(ValueError):
    pass


@dataclass
class GraphObservation:
    """Fixed-size graph state. ``slot_map[i]`` is the vehicle id in slot i,
    or ``EMPTY``. Adjacency and filter are stored as uint8."""
    nodes: np.ndarray
    adjacency: np.ndarray
    filter: np.ndarray
    slot_map: np.ndarray

    @property
    def slots(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_agents(self) -> int:
        return int(self.filter.sum())


def node_row(veh: Vehicle, cfg: EncoderConfig) -> np.ndarray:
    row = np.zeros(N_FEATURES)
    v_max = cfg.v_max_av if veh.kind.is_av else cfg.v_max_hv
    row[0] = veh.v / v_max
    row[1] = veh.x / cfg.highway_length
    row[2 + veh.lane] = 1.0
    row[2 + N_LANES + int(veh.intention)] = 1.0
    return row


def _occupants(state: SimState, cfg: EncoderConfig) -> list[Vehicle]:
    occupants = sorted(state.active_vehicles(), key=lambda veh: veh.id)
    if len(occupants) > cfg.slots:
        raise SlotOverflow(f"{len(occupants)} active vehicles exceed {cfg.slots} slots")
    return occupants


def _adjacency(occupants: list[Vehicle], cfg: EncoderConfig) -> np.ndarray:
    A = np.zeros((cfg.slots, cfg.slots), dtype=np.uint8)
    n = len(occupants)
    if n == 0:
        return A
    is_av = np.array([veh.kind.is_av for veh in occupants])
    x = np.array([veh.x for veh in occupants])
    near = np.abs(x[:, None] - x[None, :]) <= cfg.sensing_range
    both_av = is_av[:, None] & is_av[None, :]
    mixed = is_av[:, None] ^ is_av[None, :]
    block = both_av | (mixed & near) | np.eye(n, dtype=bool)
    A[:n, :n] = block
    return A


def adjacency(state: SimState, cfg: EncoderConfig) -> np.ndarray:
    return _adjacency(_occupants(state, cfg), cfg)


def rl_filter(state: SimState, cfg: EncoderConfig) -> np.ndarray:
    occupants = _occupants(state, cfg)
    F = np.zeros(cfg.slots, dtype=np.uint8)
    F[:len(occupants)] = [veh.kind.is_av for veh in occupants]
    return F


def encode(state: SimState, cfg: EncoderConfig) -> GraphObservation:
    occupants = _occupants(state, cfg)
    n = len(occupants)
    nodes = np.zeros((cfg.slots, N_FEATURES))
    slot_map = np.full(cfg.slots, EMPTY, dtype=np.int64)
    F = np.zeros(cfg.slots, dtype=np.uint8)
    for i, veh in enumerate(occupants):
        nodes[i] = node_row(veh, cfg)
        slot_map[i] = veh.id
        F[i] = veh.kind.is_av
    return GraphObservation(nodes, _adjacency(occupants, cfg), F, slot_map)


def dump_observation(obs: GraphObservation, fh) -> None:
    """Debug dump: header ``slots,f``, then N rows, A rows and the F row,
    all comma separated and row-major."""
    slots, f = obs.nodes.shape
    fh.write("slots,f\n")
    fh.write(f"{slots},{f}\n")
    for row in obs.nodes:
        fh.write(",".join(repr(float(v)) for v in row) + "\n")
    for row in obs.adjacency:
        fh.write(",".join(str(int(v)) for v in row) + "\n")
    fh.write(",".join(str(int(v)) for v in obs.filter) + "\n")


def load_observation(fh) -> GraphObservation:
    lines = [line.strip() for line in fh if line.strip()]
    if lines[0] != "slots,f":
        raise ValueError("not a graph observation dump")
    slots, f = (int(tok) for tok in lines[1].split(","))
    body = lines[2:]
    if len(body) != 2 * slots + 1:
        raise ValueError(f"expected {2 * slots + 1} data rows, found {len(body)}")
    nodes = np.array([[float(tok) for tok in line.split(",")] for line in body[:slots]]).reshape(slots, f)
    A = np.array([[int(tok) for tok in line.split(",")] for line in body[slots:2 * slots]], dtype=np.uint8)
    F = np.array([int(tok) for tok in body[-1].split(",")], dtype=np.uint8)
    occupied = A.diagonal() > 0
    slot_map = np.where(occupied, np.arange(slots), EMPTY)
    return GraphObservation(nodes, A, F, slot_map)
