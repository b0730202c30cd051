import numpy as np
import pytest

from graphlane.encoder import EncoderConfig
from graphlane.sim import ScenarioConfig, SimState, Vehicle, VehicleKind


@pytest.fixture
def cfg():
    return ScenarioConfig()


def make_state(cfg, vehicles, seed=0, pending=None):
    """SimState holding ``vehicles`` with nothing left to spawn (unless
    ``pending`` says otherwise)."""
    state = SimState.initial(cfg, seed)
    state.pending = pending or {kind: 0 for kind in VehicleKind}
    state.vehicles = list(vehicles)
    state.next_id = max((v.id for v in vehicles), default=-1) + 1
    return state


def hv(id, lane, x, v):
    return Vehicle(id=id, kind=VehicleKind.HV, lane=lane, x=x, v=v)


def av(id, lane, x, v, ramp=1):
    kind = VehicleKind.AV_RAMP1 if ramp == 1 else VehicleKind.AV_RAMP2
    return Vehicle(id=id, kind=kind, lane=lane, x=x, v=v)


def random_state(rng, cfg, n=None):
    """Active vehicles scattered over the road, no same-lane overlaps."""
    n = int(rng.integers(0, 13)) if n is None else n
    vehicles = []
    for vid in range(n):
        for _ in range(50):
            lane = int(rng.integers(3))
            x = float(rng.uniform(0, cfg.highway_length))
            if all(o.lane != lane or abs(o.x - x) >= cfg.vehicle_length for o in vehicles):
                break
        kind = VehicleKind(int(rng.integers(3)))
        v = float(rng.uniform(0, cfg.speed_limit(kind)))
        veh = Vehicle(id=vid, kind=kind, lane=lane, x=x, v=v)
        veh.intention = type(veh.intention)(int(rng.integers(3)))
        vehicles.append(veh)
    return make_state(cfg, vehicles)


@pytest.fixture
def enc_cfg(cfg):
    return EncoderConfig.from_scenario(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
