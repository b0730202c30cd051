"""Highway micro-simulation: 3 lanes, two ramp exits, mixed HV/AV traffic.

Longitudinal motion is IDM for every vehicle. HVs change lanes with a
gap-acceptance rule; AVs change lanes only when told to by the caller.
Positions are front-bumper coordinates along the mainline, lane 0 is the
leftmost lane and lane 2 (the exit lane) the rightmost.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

N_LANES = 3
EXIT_LANE = N_LANES - 1


class VehicleKind(enum.IntEnum):
    HV = 0
    AV_RAMP1 = 1
    AV_RAMP2 = 2

    @property
    def is_av(self) -> bool:
        return self is not VehicleKind.HV


class Action(enum.IntEnum):
    """Lateral action; the integer value is the Q-network output column."""
    CHANGE_LEFT = 0
    STRAIGHT = 1
    CHANGE_RIGHT = 2

    @property
    def lane_delta(self) -> int:
        return int(self) - 1


class SimulationError(RuntimeError):
    """Raised when the simulator is driven in a way that indicates a caller bug."""


@dataclass
class IdmParams:
    a_max: float = 1.5
    b_comf: float = 2.0
    delta: float = 4.0
    s0: float = 2.0
    T_headway: float = 1.0
    b_emergency: float = 9.0


@dataclass
class ScenarioConfig:
    n_hvs: int = 20
    n_avs: int = 20
    n_ramp1: int = 10
    n_ramp2: int = 10
    highway_length: float = 500.0
    x_ramp1: float = 200.0
    x_ramp2: float = 400.0
    v_max_hv: float = 60.0 / 3.6
    v_max_av: float = 75.0 / 3.6
    inflow_hv: float = 0.3
    inflow_av: float = 0.15
    dt: float = 0.5
    max_steps: int = 600
    vehicle_length: float = 5.0
    sensing_range: float = 30.0
    ramp_window: float = 50.0
    idm: IdmParams = field(default_factory=IdmParams)
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    exit_bonus: float = 10.0
    approach_bonus: float = 0.1
    miss_penalty: float = 5.0
    lc_magnitude: float = 0.1
    collision_magnitude: float = 10.0

    def validate(self) -> None:
        positive = ("highway_length", "x_ramp1", "x_ramp2", "v_max_hv", "v_max_av",
                    "inflow_hv", "inflow_av", "dt", "max_steps", "vehicle_length",
                    "sensing_range", "ramp_window")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"scenario.{name} must be positive, got {getattr(self, name)!r}")
        for name in ("a_max", "b_comf", "delta", "s0", "T_headway", "b_emergency"):
            if not getattr(self.idm, name) > 0:
                raise ValueError(f"scenario.idm.{name} must be positive")
        for name in ("n_hvs", "n_avs", "n_ramp1", "n_ramp2"):
            if getattr(self, name) < 0:
                raise ValueError(f"scenario.{name} must be non-negative")
        if not self.x_ramp1 < self.x_ramp2 < self.highway_length:
            raise ValueError("scenario ramps must satisfy x_ramp1 < x_ramp2 < highway_length")
        if self.n_ramp1 + self.n_ramp2 != self.n_avs:
            raise ValueError("scenario.n_ramp1 + scenario.n_ramp2 must equal scenario.n_avs")
        for name in ("inflow_hv", "inflow_av"):
            if getattr(self, name) * self.dt > 1:
                raise ValueError(f"scenario.{name} * dt must be a probability (<= 1)")

    def speed_limit(self, kind: VehicleKind) -> float:
        return self.v_max_av if kind.is_av else self.v_max_hv

    def target_ramp(self, kind: VehicleKind) -> float | None:
        if kind is VehicleKind.AV_RAMP1:
            return self.x_ramp1
        if kind is VehicleKind.AV_RAMP2:
            return self.x_ramp2
        return None

    @property
    def total_vehicles(self) -> int:
        return self.n_hvs + self.n_avs


@dataclass
class Vehicle:
    id: int
    kind: VehicleKind
    lane: int
    x: float
    v: float
    intention: Action = Action.STRAIGHT
    active: bool = True
    exited_ok: bool = False
    collided: bool = False
    missed_ramp: bool = False

    @property
    def exited(self) -> bool:
        return not self.active and not self.collided


@dataclass
class Event:
    step: int
    veh_id: int
    kind: VehicleKind
    event: str  # spawn | lane_change | collision | exit_ok | exit_miss


@dataclass
class SimState:
    vehicles: list[Vehicle]
    clock: int
    pending: dict[VehicleKind, int]
    rng: np.random.Generator
    event_log: list[Event] = field(default_factory=list)
    next_id: int = 0

    @classmethod
    def initial(cls, cfg: ScenarioConfig, seed) -> "SimState":
        pending = {
            VehicleKind.HV: cfg.n_hvs,
            VehicleKind.AV_RAMP1: cfg.n_ramp1,
            VehicleKind.AV_RAMP2: cfg.n_ramp2,
        }
        return cls(vehicles=[], clock=0, pending=pending, rng=np.random.default_rng(seed))

    def active_vehicles(self) -> list[Vehicle]:
        return [veh for veh in self.vehicles if veh.active]

    def vehicle(self, veh_id: int) -> Vehicle:
        for veh in self.vehicles:
            if veh.id == veh_id:
                return veh
        raise KeyError(veh_id)

    def log(self, veh: Vehicle, event: str) -> None:
        self.event_log.append(Event(self.clock, veh.id, veh.kind, event))


@dataclass
class StepOutcome:
    r_intention: float = 0.0
    r_avg_speed: float = 0.0
    p_lane_change: float = 0.0
    p_collision: float = 0.0
    reward_total: float = 0.0
    collisions: int = 0
    exits_correct: int = 0
    exits_missed: int = 0
    done: bool = False


@dataclass
class StepEvents:
    """Raw per-step counts that the reward is computed from."""
    exits_correct: int = 0
    ramp_misses: int = 0
    approaching: int = 0
    lane_change_attempts: int = 0
    new_collisions: int = 0
    av_speed_ratios: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# longitudinal model

def desired_gap(v: float, dv: float, p: IdmParams) -> float:
    """IDM dynamic desired gap s*, floored at the jam distance s0.

    ``dv`` is the approach rate, own speed minus leader speed.
    """
    s_star = p.s0 + v * p.T_headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf))
    return max(s_star, p.s0)


def idm_acceleration(v: float, v_desired: float, gap: float, dv: float, p: IdmParams) -> float:
    """IDM acceleration, clamped to [-b_emergency, a_max].

    Pass ``gap=math.inf`` when there is no leader.
    """
    if v < 0:
        raise ValueError("speed must be non-negative")
    if gap <= 0:
        raise SimulationError(f"non-positive gap {gap} to an uncollided leader")
    free = (v / v_desired) ** p.delta
    interaction = 0.0 if math.isinf(gap) else (desired_gap(v, dv, p) / gap) ** 2
    acc = p.a_max * (1.0 - free - interaction)
    return min(max(acc, -p.b_emergency), p.a_max)


# ---------------------------------------------------------------------------
# neighbourhood queries

def _leader(vehicles: list[Vehicle], ego: Vehicle, lane: int) -> Vehicle | None:
    best = None
    for other in vehicles:
        if other is ego or not other.active or other.lane != lane or other.x < ego.x:
            continue
        if other.x == ego.x and other.id < ego.id:
            continue
        if best is None or other.x < best.x:
            best = other
    return best


def _follower(vehicles: list[Vehicle], ego: Vehicle, lane: int) -> Vehicle | None:
    best = None
    for other in vehicles:
        if other is ego or not other.active or other.lane != lane or other.x > ego.x:
            continue
        if other.x == ego.x and other.id > ego.id:
            continue
        if best is None or other.x > best.x:
            best = other
    return best


def lead_gap(vehicles: list[Vehicle], ego: Vehicle, lane: int, length: float) -> tuple[float, Vehicle | None]:
    leader = _leader(vehicles, ego, lane)
    if leader is None:
        return math.inf, None
    return leader.x - length - ego.x, leader


def lane_change_safe(vehicles: list[Vehicle], ego: Vehicle, target_lane: int, cfg: ScenarioConfig) -> bool:
    """Gap-acceptance test: both the new lead gap and the new lag gap must
    cover the respective follower's desired gap."""
    if not 0 <= target_lane < N_LANES:
        return False
    length = cfg.vehicle_length
    gap, leader = lead_gap(vehicles, ego, target_lane, length)
    if leader is not None and gap < desired_gap(ego.v, ego.v - leader.v, cfg.idm):
        return False
    lag = _follower(vehicles, ego, target_lane)
    if lag is not None:
        lag_gap = ego.x - length - lag.x
        if lag_gap < desired_gap(lag.v, lag.v - ego.v, cfg.idm):
            return False
    return True


# ---------------------------------------------------------------------------
# step pipeline

def spawn_inflows(state: SimState, cfg: ScenarioConfig) -> SimState:
    """One Bernoulli arrival trial for HVs and one for AVs at x = 0.

    The AV trial draws the ramp kind in proportion to the remaining counts.
    Blocked arrivals are not retried this step; the counter stays put.
    """
    rng = state.rng
    need = cfg.idm.s0 + cfg.vehicle_length
    av_pending = state.pending[VehicleKind.AV_RAMP1] + state.pending[VehicleKind.AV_RAMP2]
    trials = []
    if state.pending[VehicleKind.HV] > 0:
        trials.append((None, cfg.inflow_hv))
    if av_pending > 0:
        trials.append(("av", cfg.inflow_av))
    for group, rate in trials:
        if rng.random() >= rate * cfg.dt:
            continue
        if group is None:
            kind = VehicleKind.HV
        else:
            n1 = state.pending[VehicleKind.AV_RAMP1]
            kind = VehicleKind.AV_RAMP1 if rng.random() * av_pending < n1 else VehicleKind.AV_RAMP2
        open_lanes = []
        for lane in range(N_LANES):
            nearest = min((veh.x for veh in state.vehicles if veh.active and veh.lane == lane),
                          default=math.inf)
            if nearest >= need:
                open_lanes.append(lane)
        if not open_lanes:
            continue
        lane = open_lanes[int(rng.integers(len(open_lanes)))]
        veh = Vehicle(id=state.next_id, kind=kind, lane=lane, x=0.0, v=0.6 * cfg.speed_limit(kind))
        state.next_id += 1
        state.vehicles.append(veh)
        state.pending[kind] -= 1
        state.log(veh, "spawn")
    return state


def hv_lateral_decision(state: SimState, veh_id: int, cfg: ScenarioConfig) -> Action:
    """Gap-acceptance lane choice for a human driver.

    Changes lane only when the current lead gap is below twice the desired
    gap, the target lane is safe, and it offers a larger lead gap. Left is
    preferred on ties.
    """
    veh = state.vehicle(veh_id)
    return _incentive_decision(state.vehicles, veh, cfg)


def _incentive_decision(vehicles: list[Vehicle], veh: Vehicle, cfg: ScenarioConfig) -> Action:
    length = cfg.vehicle_length
    gap, leader = lead_gap(vehicles, veh, veh.lane, length)
    if leader is None or gap >= 2.0 * desired_gap(veh.v, veh.v - leader.v, cfg.idm):
        return Action.STRAIGHT
    best, best_gap = Action.STRAIGHT, gap
    for action in (Action.CHANGE_LEFT, Action.CHANGE_RIGHT):
        target = veh.lane + action.lane_delta
        if not lane_change_safe(vehicles, veh, target, cfg):
            continue
        target_gap, _ = lead_gap(vehicles, veh, target, length)
        if target_gap > best_gap:
            best, best_gap = action, target_gap
    return best


def _try_lane_change(state: SimState, veh: Vehicle, action: Action, cfg: ScenarioConfig) -> bool:
    if action is Action.STRAIGHT:
        return False
    target = veh.lane + action.lane_delta
    if not lane_change_safe(state.vehicles, veh, target, cfg):
        return False
    veh.lane = target
    veh.intention = action
    state.log(veh, "lane_change")
    return True


def apply_av_actions(state: SimState, actions: dict[int, Action], cfg: ScenarioConfig) -> int:
    """Apply requested AV lane changes in ascending id order.

    Returns the number of lane-change attempts (executed or vetoed), which is
    what the lane-change penalty counts.
    """
    by_id = {veh.id: veh for veh in state.vehicles}
    attempts = 0
    for veh_id in sorted(actions):
        veh = by_id.get(veh_id)
        if veh is None or not veh.active or not veh.kind.is_av:
            raise SimulationError(f"action given for vehicle {veh_id}, which is not an active AV")
        action = Action(actions[veh_id])
        if action is not Action.STRAIGHT:
            attempts += 1
            _try_lane_change(state, veh, action, cfg)
    return attempts


def compute_reward(events: StepEvents, cfg: ScenarioConfig) -> StepOutcome:
    """Shared scalar reward for one step from its raw event counts."""
    r_int = (cfg.exit_bonus * events.exits_correct
             + cfg.approach_bonus * events.approaching
             - cfg.miss_penalty * events.ramp_misses)
    ratios = events.av_speed_ratios
    r_speed = float(np.mean(ratios)) if ratios else 0.0
    p_lc = -cfg.lc_magnitude * events.lane_change_attempts
    p_col = -cfg.collision_magnitude * events.new_collisions
    total = cfg.w1 * r_int + cfg.w2 * r_speed + cfg.w3 * p_lc + cfg.w4 * p_col
    return StepOutcome(
        r_intention=r_int,
        r_avg_speed=r_speed,
        p_lane_change=p_lc,
        p_collision=p_col,
        reward_total=total,
        collisions=events.new_collisions,
        exits_correct=events.exits_correct,
        exits_missed=events.ramp_misses,
    )


def is_terminal(state: SimState, cfg: ScenarioConfig) -> bool:
    if state.clock >= cfg.max_steps:
        return True
    all_spawned = all(count == 0 for count in state.pending.values())
    return all_spawned and not any(veh.active for veh in state.vehicles)


def step(state: SimState, av_actions: dict[int, Action] | None, cfg: ScenarioConfig) -> tuple[SimState, StepOutcome]:
    """Advance the world by one ``dt``.

    Actions may only name AVs active before this step; AVs spawned during
    the step (and AVs with no entry) go straight.
    """
    if is_terminal(state, cfg):
        raise SimulationError("step() called on a terminal state")
    av_actions = av_actions or {}
    events = StepEvents()

    for veh in state.vehicles:
        veh.intention = Action.STRAIGHT
    spawn_inflows(state, cfg)

    # HV decisions are all taken on the same snapshot, then applied in id order
    hv_moves = {veh.id: _incentive_decision(state.vehicles, veh, cfg)
                for veh in state.vehicles if veh.active and not veh.kind.is_av}
    events.lane_change_attempts = apply_av_actions(state, av_actions, cfg)
    for veh_id in sorted(hv_moves):
        veh = state.vehicle(veh_id)
        _try_lane_change(state, veh, hv_moves[veh_id], cfg)

    active = state.active_vehicles()
    length = cfg.vehicle_length
    accs = {}
    for veh in active:
        gap, leader = lead_gap(active, veh, veh.lane, length)
        dv = veh.v - leader.v if leader is not None else 0.0
        if leader is not None and gap <= 0:
            # overlapping pair left over from an unsafe spawn or lane race
            accs[veh.id] = -cfg.idm.b_emergency
            continue
        accs[veh.id] = idm_acceleration(veh.v, cfg.speed_limit(veh.kind), gap, dv, cfg.idm)

    # semi-implicit Euler: speed first, position with the new speed
    dt = cfg.dt
    for veh in active:
        limit = cfg.speed_limit(veh.kind)
        v_new = min(max(veh.v + accs[veh.id] * dt, 0.0), limit)
        x_old = veh.x
        veh.x = x_old + v_new * dt
        veh.v = v_new
        ramp = cfg.target_ramp(veh.kind)
        if ramp is not None and not veh.missed_ramp and x_old < ramp <= veh.x:
            if veh.lane == EXIT_LANE:
                veh.active = False
                veh.exited_ok = True
                veh.x = min(veh.x, cfg.highway_length)
                events.exits_correct += 1
                state.log(veh, "exit_ok")
                continue
            veh.missed_ramp = True
            events.ramp_misses += 1
        if veh.x >= cfg.highway_length:
            veh.x = cfg.highway_length
            veh.active = False
            veh.exited_ok = not veh.kind.is_av
            state.log(veh, "exit_ok" if veh.exited_ok else "exit_miss")

    still = state.active_vehicles()
    collided = set()
    for i, a in enumerate(still):
        for b in still[i + 1:]:
            if a.lane == b.lane and abs(a.x - b.x) < length:
                events.new_collisions += 1
                collided.update((a.id, b.id))
    for veh in still:
        if veh.id in collided:
            veh.collided = True
            veh.active = False
            veh.v = 0.0
            state.log(veh, "collision")

    for veh in state.vehicles:
        if not veh.active or not veh.kind.is_av:
            continue
        events.av_speed_ratios.append(veh.v / cfg.v_max_av)
        ramp = cfg.target_ramp(veh.kind)
        if veh.lane == EXIT_LANE and ramp - cfg.ramp_window <= veh.x < ramp:
            events.approaching += 1

    state.clock += 1
    outcome = compute_reward(events, cfg)
    outcome.done = is_terminal(state, cfg)
    return state, outcome


def baseline_policy(state: SimState, cfg: ScenarioConfig) -> dict[int, Action]:
    """Rule-based AV controller: the HV lane-change rule, plus a forced
    move towards the exit lane inside the ramp window."""
    actions = {}
    for veh in state.vehicles:
        if not veh.active or not veh.kind.is_av:
            continue
        ramp = cfg.target_ramp(veh.kind)
        if not veh.missed_ramp and ramp - cfg.ramp_window <= veh.x < ramp:
            actions[veh.id] = Action.CHANGE_RIGHT if veh.lane < EXIT_LANE else Action.STRAIGHT
        else:
            actions[veh.id] = _incentive_decision(state.vehicles, veh, cfg)
    return actions


def write_event_log(events: list[Event], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "veh_id", "kind", "event"])
        for ev in events:
            writer.writerow([ev.step, ev.veh_id, ev.kind.name.lower(), ev.event])
