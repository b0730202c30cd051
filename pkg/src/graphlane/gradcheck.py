"""Finite-difference checks of every backward pass and hand-worked TD
target cases. Used by the ``gradcheck`` command and the test-suite."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import IDENTITY, RELU, DenseLayer, GcnLayer
from .encoder import EMPTY, GraphObservation
from .qlearn import AlgoVariant, QNetwork, compute_target, target_from_tables

FD_STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _random_adjacency(rng: np.random.Generator, n: int) -> np.ndarray:
    upper = np.triu(rng.random((n, n)) < 0.5, 1)
    A = (upper | upper.T).astype(np.float64)
    np.fill_diagonal(A, 1.0)
    return A


def check_dense(rng: np.random.Generator, instances: int = 20) -> CheckResult:
    worst = 0.0
    for k in range(instances):
        n, d_in, d_out = rng.integers(1, 7, size=3)
        act = RELU if k % 2 == 0 else IDENTITY
        layer = DenseLayer(rng.normal(size=(d_in, d_out)), rng.normal(size=d_out), act)
        X = rng.normal(size=(n, d_in))
        R = rng.normal(size=(n, d_out))
        layer.forward(X)
        grads, dX = layer.backward(R)

        def loss() -> float:
            return float(np.sum(layer.forward(X) * R))

        worst = max(worst,
                    relative_error(grads["W"], numeric_grad(loss, layer.W)),
                    relative_error(grads["bias"], numeric_grad(loss, layer.bias)),
                    relative_error(dX, numeric_grad(loss, X)))
    return CheckResult("dense", worst, instances)


def check_gcn(rng: np.random.Generator, instances: int = 20, corrupt: bool = False) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        n, d_in, d_out = rng.integers(1, 7, size=3)
        layer = GcnLayer(rng.normal(size=(d_in, d_out)))
        A = _random_adjacency(rng, n)
        X = rng.normal(size=(n, d_in))
        R = rng.normal(size=(n, d_out))
        layer.forward(X, A)
        grads, dX = layer.backward(R)
        if corrupt:
            grads["W"] = grads["W"] * 1.01 + 1e-3

        def loss() -> float:
            return float(np.sum(layer.forward(X, A) * R))

        worst = max(worst,
                    relative_error(grads["W"], numeric_grad(loss, layer.W)),
                    relative_error(dX, numeric_grad(loss, X)))
    return CheckResult("gcn", worst, instances)


def check_network(rng: np.random.Generator, dueling: bool, instances: int = 20) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 7))
        widths = tuple(int(w) for w in rng.integers(2, 7, size=3))
        net = QNetwork(dueling, rng, widths, n_features=int(rng.integers(2, 7)))
        for p in net.params().values():
            p += rng.normal(scale=0.1, size=p.shape)  # non-zero biases
        X = rng.normal(size=(n, net.n_features))
        A = _random_adjacency(rng, n)
        R = rng.normal(size=(n, 3))
        net.forward(X, A)
        grads = net.backward(R)

        def loss() -> float:
            return float(np.sum(net.forward(X, A) * R))

        for name, p in net.params().items():
            worst = max(worst, relative_error(grads[name], numeric_grad(loss, p)))
    return CheckResult("dueling_head" if dueling else "single_head", worst, instances)


def target_oracles() -> list[tuple[str, bool]]:
    """Hand-worked target cases; each entry is (description, matched)."""
    q_online = np.array([[1.0, 2.0, 0.5]])
    q_target = np.array([[0.3, 0.1, 0.9]])
    r, gamma = 1.0, 0.9
    cases = []
    for variant, expected in ((AlgoVariant.DQN, 1.0 + 0.9 * 0.9), (AlgoVariant.DUELING, 1.0 + 0.9 * 0.9),
                              (AlgoVariant.DOUBLE, 1.0 + 0.9 * 0.1), (AlgoVariant.D3QN, 1.0 + 0.9 * 0.1)):
        got = target_from_tables(variant, r, q_online, q_target, gamma)[0]
        cases.append((f"{variant.value}: worked table", got == expected))
        got_done = target_from_tables(variant, r, q_online, q_target, gamma, done=True)[0]
        cases.append((f"{variant.value}: terminal", got_done == 1.0))
        got_g0 = target_from_tables(variant, r, q_online, q_target, 0.0)[0]
        cases.append((f"{variant.value}: gamma=0", got_g0 == 1.0))
        got_exit = compute_target(variant, r, _after_exit, False, _TableNet(q_online), _TableNet(q_target),
                                  gamma, obs=_before_exit)
        cases.append((f"{variant.value}: exited agent", got_exit[0] == 1.0 and got_exit[1] == expected))
    return [(name, bool(ok)) for name, ok in cases]


class _TableNet:
    """Stand-in network returning a fixed Q row for every slot."""

    def __init__(self, row: np.ndarray):
        self.row = row

    def q_values(self, obs: GraphObservation) -> np.ndarray:
        return np.repeat(self.row, obs.slots, axis=0)


def _obs(vehicle_ids: list[int], slots: int = 3) -> GraphObservation:
    slot_map = np.full(slots, EMPTY)
    slot_map[:len(vehicle_ids)] = vehicle_ids
    F = (slot_map != EMPTY).astype(np.uint8)
    return GraphObservation(np.zeros((slots, 8)), np.diag(F), F, slot_map)


# vehicle 4 leaves the road between the two states; vehicle 9 shifts slot
_before_exit = _obs([4, 9])
_after_exit = _obs([9])


def run_all(seed: int = 0, corrupt_gcn: bool = False) -> tuple[list[CheckResult], list[tuple[str, bool]], float]:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = [check_dense(rng), check_gcn(rng, corrupt=corrupt_gcn),
               check_network(rng, dueling=False), check_network(rng, dueling=True)]
    return results, target_oracles(), time.perf_counter() - start
