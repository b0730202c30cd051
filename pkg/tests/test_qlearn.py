import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphlane.encoder import EMPTY, EncoderConfig, GraphObservation, encode
from graphlane.gradcheck import target_oracles
from graphlane.numerics import CheckpointError
from graphlane.qlearn import (NO_ACTION, AlgoVariant, QNetwork, ReplayBuffer, Transition, bootstrap_from_tables,
                              build_network, compute_target, dueling_aggregate, epsilon_greedy, random_actions,
                              select_actions, target_from_tables, td_loss_and_grads)
from graphlane.sim import ScenarioConfig

from conftest import random_state


def make_obs(rng, vehicle_ids, agents=None, slots=6, p=0.5):
    """Random observation with ``vehicle_ids`` in the leading slots;
    ``agents`` lists which of them are AVs (all by default)."""
    n = len(vehicle_ids)
    slot_map = np.full(slots, EMPTY)
    slot_map[:n] = vehicle_ids
    agents = vehicle_ids if agents is None else agents
    F = np.array([1 if vid in agents and vid != EMPTY else 0 for vid in slot_map], dtype=np.uint8)
    A = np.zeros((slots, slots), dtype=np.uint8)
    upper = np.triu(rng.random((n, n)) < p, 1)
    A[:n, :n] = upper | upper.T
    np.fill_diagonal(A[:n, :n], 1)
    N = np.zeros((slots, 8))
    N[:n] = rng.random((n, 8))
    return GraphObservation(N, A, F, slot_map)


def constant_net(dueling=False, q=(0.0, 0.0, 0.0)):
    """Network whose output is ``q`` for every slot (all weights zero)."""
    net = QNetwork(dueling, np.random.default_rng(0), widths=(2, 2, 2))
    for p in net.params().values():
        p[...] = 0.0
    if dueling:
        net.adv.bias[...] = q
    else:
        net.out.bias[...] = q
    return net


# dueling head

def test_dueling_worked_example():
    np.testing.assert_array_equal(dueling_aggregate(np.array([[2.0]]), np.array([[1.0, 2.0, 3.0]])),
                                  [[1.0, 2.0, 3.0]])


@settings(max_examples=100, deadline=None)
@given(v=st.floats(-100, 100), adv=st.lists(st.integers(-100, 100), min_size=3, max_size=3, unique=True),
       shift=st.floats(-100, 100))
def test_dueling_identities(v, adv, shift):
    value, adv = np.array([[v]]), np.array([adv], dtype=np.float64)
    q = dueling_aggregate(value, adv)
    assert q.mean() == pytest.approx(v, abs=1e-9)
    assert np.argmax(q) == np.argmax(adv)
    np.testing.assert_allclose(dueling_aggregate(value, adv + shift), q, atol=1e-9)


# targets

def test_worked_target_cases():
    assert all(ok for _, ok in target_oracles())


def test_target_examples_by_variant():
    q_on, q_tg = np.array([[1.0, 2.0, 0.5]]), np.array([[0.3, 0.1, 0.9]])
    assert target_from_tables("dqn", 1.0, q_on, q_tg, 0.9)[0] == pytest.approx(1.81)
    assert target_from_tables("double", 1.0, q_on, q_tg, 0.9)[0] == pytest.approx(1.09)
    assert target_from_tables("d3qn", 1.0, q_on, q_tg, 0.9, done=True)[0] == 1.0


@pytest.mark.parametrize("variant", list(AlgoVariant))
def test_gamma_zero_gives_reward(variant, rng):
    net = build_network(variant, rng, widths=(4, 4, 4))
    obs = make_obs(rng, [1, 2, 3])
    np.testing.assert_array_equal(compute_target(variant, 0.7, obs, False, net, net, 0.0), np.full(6, 0.7))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_max_bootstrap_dominates_double_pointwise(seed):
    rng = np.random.default_rng(seed)
    q_on, q_tg = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert np.all(bootstrap_from_tables("dqn", q_on, q_tg) >= bootstrap_from_tables("double", q_on, q_tg))


def test_max_bootstrap_dominates_double_on_average(rng):
    q_on, q_tg = rng.normal(size=(10000, 3)), rng.normal(size=(10000, 3))
    gap = bootstrap_from_tables("dqn", q_on, q_tg) - bootstrap_from_tables("double", q_on, q_tg)
    assert gap.mean() > 0


def test_identical_networks_collapse_double_to_dqn(rng):
    net = build_network(AlgoVariant.DQN, rng, widths=(4, 4, 4))
    obs = make_obs(rng, [5])
    np.testing.assert_array_equal(compute_target("dqn", 1.0, obs, False, net, net, 0.9),
                                  compute_target("double", 1.0, obs, False, net, net, 0.9))


def test_target_aligned_to_current_slots():
    online, target = constant_net(q=(0.0, 1.0, 0.0)), constant_net(q=(0.0, 2.0, 0.0))
    rng = np.random.default_rng(0)
    obs = make_obs(rng, [3, 7, 9], agents=[3, 9])
    next_obs = make_obs(rng, [7, 9], agents=[9])  # agent 3 exited
    y = compute_target("dqn", 1.0, next_obs, False, online, target, 0.5, obs=obs)
    assert y[0] == 1.0 and y[2] == 2.0


# TD loss

def test_td_loss_worked_example(rng):
    online, target = constant_net(q=(1.0, 1.0, 1.0)), constant_net()
    obs = make_obs(rng, [0])
    t = Transition(obs, np.array([1, -1, -1, -1, -1, -1]), 2.0, obs, done=True)
    loss, grads = td_loss_and_grads([t], online, target, AlgoVariant.DQN, 0.9)
    assert loss == 1.0
    np.testing.assert_array_equal(grads["out.bias"], [0.0, -2.0, 0.0])


def test_td_loss_ignores_non_agent_slots(rng):
    online, target = constant_net(q=(1.0, 1.0, 1.0)), constant_net()
    obs = make_obs(rng, [0, 1], agents=[0])
    t = Transition(obs, np.array([1, -1, -1, -1, -1, -1]), 2.0, obs, done=True)
    loss, grads = td_loss_and_grads([t], online, target, AlgoVariant.DQN, 0.9)
    assert loss == 1.0
    np.testing.assert_array_equal(grads["out.bias"], [0.0, -2.0, 0.0])


def test_td_loss_without_agents_is_rejected(rng):
    net = constant_net()
    obs = make_obs(rng, [0], agents=[])
    t = Transition(obs, np.full(6, NO_ACTION), 0.0, obs, done=True)
    with pytest.raises(ValueError):
        td_loss_and_grads([t], net, net, AlgoVariant.DQN, 0.9)


def test_transition_requires_actions_on_agent_slots(rng):
    obs = make_obs(rng, [0, 1])
    with pytest.raises(ValueError):
        Transition(obs, np.array([0, -1, -1, -1, -1, -1]), 0.0, obs, done=False)


@pytest.mark.parametrize("variant", list(AlgoVariant))
def test_td_gradient_matches_finite_differences(variant, rng):
    online = build_network(variant, rng, widths=(4, 4, 4))
    target = online.clone()
    for p in target.params().values():
        p += rng.normal(scale=0.1, size=p.shape)
    batch = []
    for _ in range(3):
        obs, nxt = make_obs(rng, [1, 2, 3], agents=[1, 3]), make_obs(rng, [2, 3])
        batch.append(Transition(obs, random_actions(obs, rng), float(rng.normal()), nxt, done=False))
    _, grads = td_loss_and_grads(batch, online, target, variant, 0.9)
    h = 1e-6
    for name, p in online.params().items():
        i = tuple(rng.integers(s) for s in p.shape)
        old = p[i]
        p[i] = old + h
        up, _ = td_loss_and_grads(batch, online, target, variant, 0.9)
        p[i] = old - h
        down, _ = td_loss_and_grads(batch, online, target, variant, 0.9)
        p[i] = old
        assert grads[name][i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8)


# acting

def test_tie_breaks_to_lowest_index(rng):
    actions = epsilon_greedy(np.array([[0.5, 0.5, 0.5], [0.0, 1.0, 1.0]]), np.array([1, 1]), 0.0, rng)
    np.testing.assert_array_equal(actions, [0, 1])


def test_non_agent_slots_get_no_action(rng):
    actions = epsilon_greedy(np.zeros((3, 3)), np.array([0, 1, 0]), 1.0, rng)
    assert actions[0] == NO_ACTION and actions[2] == NO_ACTION and 0 <= actions[1] < 3


def test_full_exploration_is_uniform(rng):
    n = 30000
    actions = epsilon_greedy(np.tile([0.0, 9.0, 0.0], (n, 1)), np.ones(n), 1.0, rng)
    counts = np.bincount(actions, minlength=3)
    sigma = np.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - n / 3) < 3 * sigma)


def test_epsilon_out_of_range(rng):
    with pytest.raises(ValueError):
        epsilon_greedy(np.zeros((1, 3)), np.ones(1), 1.5, rng)


def test_greedy_actions_invariant_to_constant_shift(rng):
    q = rng.normal(size=(6, 3))
    mask = np.ones(6)
    np.testing.assert_array_equal(epsilon_greedy(q, mask, 0.0, rng), epsilon_greedy(q + 7.5, mask, 0.0, rng))


def test_all_zero_observation_has_no_agents(rng):
    net = build_network(AlgoVariant.D3QN, rng)
    cfg = ScenarioConfig()
    obs = encode(random_state(rng, cfg, n=0), EncoderConfig.from_scenario(cfg))
    assert np.all(select_actions(net, obs, 0.5, rng) == NO_ACTION)
    assert np.all(np.isfinite(net.q_values(obs)))


# network structure

@pytest.mark.parametrize("dueling", [False, True])
def test_network_is_permutation_equivariant(dueling, rng):
    net = QNetwork(dueling, rng)
    obs = make_obs(rng, [0, 1, 2, 3, 4], slots=5)
    perm = rng.permutation(5)
    q = net.forward(obs.nodes, obs.adjacency)
    qp = net.forward(obs.nodes[perm], obs.adjacency[np.ix_(perm, perm)])
    np.testing.assert_allclose(qp, q[perm], atol=1e-12)


def test_padding_does_not_change_agent_q(rng):
    net = QNetwork(True, rng)
    small = make_obs(rng, [0, 1, 2], slots=3)
    big = GraphObservation(np.vstack([small.nodes, np.zeros((5, 8))]),
                           np.pad(small.adjacency, ((0, 5), (0, 5))),
                           np.pad(small.filter, (0, 5)), np.pad(small.slot_map, (0, 5), constant_values=EMPTY))
    np.testing.assert_allclose(net.q_values(big)[:3], net.q_values(small), atol=1e-12)


def test_non_agent_features_reach_agents_only_through_edges(rng):
    net = QNetwork(False, rng)
    obs = make_obs(rng, [0, 1], agents=[0], slots=2)
    obs.adjacency[0, 1] = obs.adjacency[1, 0] = 0
    before = net.q_values(obs)[0].copy()
    obs.nodes[1] = rng.random(8)
    np.testing.assert_array_equal(net.q_values(obs)[0], before)


@pytest.mark.parametrize("variant", list(AlgoVariant))
def test_network_checkpoint_round_trip(variant, rng, tmp_path):
    net = build_network(variant, rng)
    net.save(tmp_path / "n.ckpt", variant)
    back, got = QNetwork.load(tmp_path / "n.ckpt", expected=variant)
    assert got is variant
    obs = make_obs(rng, [0, 1, 2])
    np.testing.assert_array_equal(back.q_values(obs), net.q_values(obs))


def test_checkpoint_variant_mismatch(rng, tmp_path):
    build_network(AlgoVariant.DQN, rng).save(tmp_path / "n.ckpt", AlgoVariant.DQN)
    with pytest.raises(CheckpointError, match="expected d3qn"):
        QNetwork.load(tmp_path / "n.ckpt", expected=AlgoVariant.D3QN)


# replay

def _transition(rng, tag):
    obs = make_obs(rng, [0])
    return Transition(obs, np.array([0, -1, -1, -1, -1, -1]), float(tag), obs, done=False)


def test_replay_ring_overwrites_oldest(rng):
    buf = ReplayBuffer(3)
    for k in range(5):
        buf.push(_transition(rng, k))
    assert len(buf) == 3
    assert sorted(t.reward for t in buf.sample(3, rng)) == [2.0, 3.0, 4.0]


def test_replay_refuses_underfilled_sample(rng):
    buf = ReplayBuffer(10)
    buf.push(_transition(rng, 0))
    with pytest.raises(ValueError):
        buf.sample(2, rng)


def test_replay_samples_without_replacement(rng):
    buf = ReplayBuffer(10)
    for k in range(10):
        buf.push(_transition(rng, k))
    assert len({t.reward for t in buf.sample(10, rng)}) == 10
