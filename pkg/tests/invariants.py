"""Simulator and encoder invariants shared by the unit and acceptance suites."""
import copy
import math

import numpy as np

from graphlane.encoder import EMPTY, encode
from graphlane.sim import VehicleKind


def snapshot(state):
    return {v.id: (v.x, v.v, v.lane, v.active) for v in state.vehicles}


def step_violations(before, state, outcome, cfg):
    problems = []
    for veh in state.vehicles:
        limit = cfg.speed_limit(veh.kind)
        if not 0.0 <= veh.v <= limit + 1e-9:
            problems.append(f"speed {veh.v} of {veh.id} outside [0, {limit}]")
        if veh.id in before and before[veh.id][3]:
            dx = abs(veh.x - before[veh.id][0])
            bound = limit * cfg.dt + 0.5 * cfg.idm.a_max * cfg.dt ** 2
            if dx > bound + 1e-9:
                problems.append(f"vehicle {veh.id} moved {dx} > {bound}")
        if veh.active == (veh.exited_ok or veh.collided or veh.exited):
            problems.append(f"vehicle {veh.id} active flag inconsistent")
        if veh.active and not 0 <= veh.lane <= 2:
            problems.append(f"vehicle {veh.id} in lane {veh.lane}")
    resum = (cfg.w1 * outcome.r_intention + cfg.w2 * outcome.r_avg_speed
             + cfg.w3 * outcome.p_lane_change + cfg.w4 * outcome.p_collision)
    if resum != outcome.reward_total:
        problems.append(f"reward total {outcome.reward_total} != component sum {resum}")
    if outcome.p_lane_change > 0 or outcome.p_collision > 0 or not 0 <= outcome.r_avg_speed <= 1:
        problems.append("reward component out of range")
    configured = {VehicleKind.HV: cfg.n_hvs, VehicleKind.AV_RAMP1: cfg.n_ramp1, VehicleKind.AV_RAMP2: cfg.n_ramp2}
    for kind in VehicleKind:
        mine = [v for v in state.vehicles if v.kind is kind]
        spawned = len(mine)
        accounted = sum(v.active for v in mine) + sum(v.exited for v in mine) + sum(v.collided for v in mine)
        if spawned != accounted:
            problems.append(f"{kind.name}: spawned {spawned} != active+exited+collided {accounted}")
        if spawned + state.pending[kind] != configured[kind]:
            problems.append(f"{kind.name}: spawned + pending != configured")
    active = [v for v in state.vehicles if v.active]
    for i, a in enumerate(active):
        for b in active[i + 1:]:
            if a.lane == b.lane and abs(a.x - b.x) < cfg.vehicle_length:
                problems.append(f"active vehicles {a.id} and {b.id} overlap")
    if not math.isfinite(outcome.reward_total):
        problems.append("non-finite reward")
    return problems


def encoder_violations(obs):
    """Structural invariants of a single observation; empty list when fine."""
    problems = []
    A, N, F = obs.adjacency, obs.nodes, obs.filter
    occupied = obs.slot_map != EMPTY
    if not np.array_equal(A, A.T):
        problems.append("A not symmetric")
    if not set(np.unique(A)) <= {0, 1}:
        problems.append("A not binary")
    if A.trace() != occupied.sum():
        problems.append("trace(A) != occupied slots")
    if not np.array_equal(A.diagonal().astype(bool), occupied):
        problems.append("diagonal does not mark occupied slots")
    rows = N[occupied]
    if rows.size and ((rows < 0).any() or (rows > 1).any()):
        problems.append("node features outside [0, 1]")
    if not np.all(rows[:, 2:5].sum(axis=1) == 1) or not np.all(rows[:, 5:8].sum(axis=1) == 1):
        problems.append("one-hot blocks do not sum to 1")
    if N[~occupied].any():
        problems.append("empty slot rows not zero")
    if (F > A.diagonal()).any():
        problems.append("F exceeds diag(A)")
    return problems


def check_permutation(state, enc, rng):
    """Relabel vehicle ids at random; the new encoding must be a slot
    permutation of the old one."""
    obs = encode(state, enc)
    clone = copy.deepcopy(state)
    new_ids = rng.permutation(len(clone.vehicles)) + 100
    old_to_new = {veh.id: int(n) for veh, n in zip(clone.vehicles, new_ids)}
    for veh in clone.vehicles:
        veh.id = old_to_new[veh.id]
    cobs = encode(clone, enc)
    n = int((obs.slot_map != EMPTY).sum())
    slot_of_old = {int(vid): i for i, vid in enumerate(obs.slot_map[:n])}
    perm = np.arange(enc.slots)
    new_to_old = {v: k for k, v in old_to_new.items()}
    for k in range(n):
        perm[k] = slot_of_old[new_to_old[int(cobs.slot_map[k])]]
    return (np.array_equal(cobs.nodes[:n], obs.nodes[perm[:n]])
            and np.array_equal(cobs.adjacency[:n, :n], obs.adjacency[np.ix_(perm[:n], perm[:n])])
            and np.array_equal(cobs.filter[:n], obs.filter[perm[:n]]))
