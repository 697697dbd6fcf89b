from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semlink import dqn, nn
from semlink.dqn import AgentConfig, QNetwork, ReplayBuffer, Transition
from semlink.errors import ContractError
from semlink.nn import Activation, DenseLayer, ModelWeights
from semlink.rng import Rng
from semlink.traffic import Action, HighwayConfig, Highway, Oracle, Roadblock, TrafficState


def fixed_q(q0, q1):
    """Q-network whose outputs are the constants ``q0, q1`` for every state."""
    layers = (DenseLayer(np.zeros((1, 5)), [1.0], Activation.RELU),
              DenseLayer([[q0], [q1]], [0.0, 0.0], Activation.LINEAR))
    return QNetwork(ModelWeights(layers))


def t(r=0.0, done=False, a=0, s=None, s_next=None):
    s = np.zeros(5, np.float32) if s is None else s
    return Transition(s, a, r, np.zeros(5, np.float32) if s_next is None else s_next, done)


def test_config_validation():
    for bad in ({"gamma": 1.0}, {"gamma": 0}, {"epsilon_min": 0.5, "epsilon_start": 0.4}, {"batch": 0}):
        with pytest.raises(ValueError):
            AgentConfig(**bad)


# state normalisation ---------------------------------------------------------------------

def test_normalize_examples():
    cfg = HighwayConfig()
    v = dqn.normalize_state(TrafficState(d1=100, d2=100, v=5, x=0, y=1), cfg)
    assert v[0] == 1.0 and v[4] == 0.5
    assert not dqn.normalize_state(TrafficState(0, 0, 0, 0, 0), cfg).any()


@given(st.integers(0, 100), st.integers(0, 100), st.integers(0, 5), st.integers(0, 120), st.integers(0, 2))
def test_normalize_in_unit_box(d1, d2, v, x, y):
    vec = dqn.normalize_state(TrafficState(d1, d2, v, x, y), HighwayConfig())
    assert vec.shape == (5,) and vec.min() >= 0 and vec.max() <= 1


# action selection --------------------------------------------------------------------------

def test_greedy_argmax_and_tie():
    rng = Rng(0)
    assert dqn.select_action(fixed_q(0.2, 0.9), np.zeros(5), 0.0, rng) is Action.LANE_CHANGE
    assert dqn.select_action(fixed_q(0.5, 0.5), np.zeros(5), 0.0, rng) is Action.LANE_KEEP


def test_full_exploration_is_fair_coin():
    rng = Rng(42)
    q = fixed_q(1.0, 0.0)
    picks = [dqn.select_action(q, np.zeros(5), 1.0, rng) for _ in range(10_000)]
    assert abs(picks.count(Action.LANE_CHANGE) / 10_000 - 0.5) <= 0.02


def test_epsilon_range_checked():
    with pytest.raises(ValueError):
        dqn.select_action(fixed_q(0, 1), np.zeros(5), 1.5, Rng(0))


@given(st.integers(0, 2**32), st.floats(0.01, 100))
@settings(max_examples=30, deadline=None)
def test_greedy_invariant_under_positive_scaling(seed, scale):
    qnet = dqn.new_qnetwork(AgentConfig(), seed)
    x = Rng(seed).random_f32(5)
    q = qnet.q_values(x)
    last = qnet.model.layers[-1]
    scaled = QNetwork(qnet.model.replace_layers(
        qnet.model.layers[:-1] + (DenseLayer(last.weights * scale, last.bias * scale, last.activation),)))
    sq = scaled.q_values(x)
    if abs(q[1] - q[0]) > 1e-4 * max(1.0, abs(q).max()):
        assert scaled.greedy(x) == qnet.greedy(x)
    assert np.allclose(sq, q * np.float32(scale), rtol=1e-4, atol=1e-5)


def test_qnetwork_contract():
    with pytest.raises(ContractError):
        QNetwork(nn.init_weights([5, 4, 2], [Activation.RELU, Activation.SOFTMAX], seed=0))
    with pytest.raises(ContractError):
        QNetwork(nn.init_weights([5, 4, 3], [Activation.RELU, Activation.LINEAR], seed=0))
    shape = dqn.new_qnetwork(AgentConfig(), 0).model.shape
    assert shape == [5, 32, 32, 2]


# replay buffer -------------------------------------------------------------------------------

def test_ring_evicts_oldest():
    buf = ReplayBuffer(3, seed=0)
    items = [t(r=i) for i in range(4)]
    for it in items:
        dqn.buffer_push(buf, it)
    assert len(buf) == 3 and items[0] not in buf.items()
    assert buf.items() == items[1:]


@given(st.integers(1, 20), st.integers(0, 60))
def test_buffer_never_exceeds_capacity_and_is_fifo(cap, n):
    buf = ReplayBuffer(cap, seed=1)
    items = [t(r=i) for i in range(n)]
    for it in items:
        buf.push(it)
    assert len(buf) == min(cap, n)
    assert buf.items() == items[max(0, n - cap):]


def test_sample_whole_buffer_is_permutation():
    buf = ReplayBuffer(10, seed=3)
    items = [t(r=i) for i in range(10)]
    for it in items:
        buf.push(it)
    sample = dqn.buffer_sample(buf, 10)
    assert sorted(x.r for x in sample) == list(range(10))


def test_underfilled_buffer_not_ready():
    buf = ReplayBuffer(10, seed=0)
    buf.push(t())
    assert buf.sample(2) is None


def test_sampling_is_uniform():
    buf = ReplayBuffer(10, seed=7)
    for i in range(10):
        buf.push(t(r=i))
    counts = Counter(int(x.r) for _ in range(10_000) for x in buf.sample(1))
    assert set(counts) == set(range(10))
    assert all(abs(c - 1000) <= 50 for c in counts.values())


# TD targets ------------------------------------------------------------------------------------

def test_terminal_targets_are_rewards():
    y = dqn.td_targets(fixed_q(100, 200), [t(r=-10, done=True), t(r=3, done=True)], 0.95)
    assert y.tolist() == [-10, 3]


def test_myopic_limit():
    y = dqn.td_targets(fixed_q(100, 200), [t(r=1.5), t(r=-2)], 1e-12)
    assert np.allclose(y, [1.5, -2], atol=1e-8)


def test_bootstrapped_target_by_hand():
    y = dqn.td_targets(fixed_q(2.0, 4.0), [t(r=1.0)], 0.9)
    assert y[0] == pytest.approx(1.0 + 0.9 * 4.0)


def test_untaken_action_gets_no_gradient():
    cfg = AgentConfig()
    online = dqn.new_qnetwork(cfg, 1)
    s = Rng(0).random_f32(5)
    batch = [t(r=5.0, done=True, a=1, s=s)]
    updated = dqn._fit_minibatch(online, online, batch, cfg.gamma)
    last_old, last_new = online.model.layers[-1], updated.model.layers[-1]
    assert np.array_equal(last_old.weights[0], last_new.weights[0])
    assert last_old.bias[0] == last_new.bias[0]
    assert not np.array_equal(last_old.weights[1], last_new.weights[1])


# training --------------------------------------------------------------------------------------

def test_zero_episodes_returns_network_unchanged():
    cfg = AgentConfig(episodes=0)
    start = dqn.new_qnetwork(cfg, 3)
    qnet, hist = dqn.train_agent(cfg, HighwayConfig(), seed=0, qnet=start)
    assert qnet.model.equals(start.model) and hist.episodes == [] and hist.updates == 0


def test_training_is_deterministic():
    cfg = AgentConfig(episodes=40)
    a, ha = dqn.train_agent(cfg, HighwayConfig(), seed=5)
    b, hb = dqn.train_agent(cfg, HighwayConfig(), seed=5)
    assert a.model.equals(b.model)
    assert ha.episodes == hb.episodes and ha.updates == hb.updates
    c, _ = dqn.train_agent(cfg, HighwayConfig(), seed=6)
    assert not a.model.equals(c.model)


def test_history_and_target_syncs(tmp_path):
    cfg = AgentConfig(episodes=60, target_sync_every=25)
    _, hist = dqn.train_agent(cfg, HighwayConfig(), seed=2)
    assert hist.syncs == hist.updates // 25
    eps = [e.epsilon for e in hist.episodes]
    assert eps[0] == 1.0 and eps[1] == pytest.approx(0.995)
    assert all(a >= b for a, b in zip(eps, eps[1:]))
    hist.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "episode,return,epsilon,outcome" and len(lines) == 61


def test_epsilon_floor():
    cfg = AgentConfig(episodes=700, epsilon_decay=0.9)
    _, hist = dqn.train_agent(cfg, HighwayConfig(n_background=0), seed=0)
    assert min(e.epsilon for e in hist.episodes) == 0.05


def _reachable(oracle):
    seen, stack = set(), [oracle.start]
    while stack:
        key = stack.pop()
        if key in seen or oracle.is_terminal(*key):
            continue
        seen.add(key)
        for a in Action:
            nxt, _, done = oracle.transition(*key, a)
            if not done:
                stack.append(nxt)
    return seen


def test_tiny_mdp_matches_oracle():
    sim = HighwayConfig(lanes=2, length=10, speed_limit=2, n_background=0, t_max=10,
                        noise=False, margin=2)
    rbs = [Roadblock(0, 6), Roadblock(1, 6), Roadblock(0, 8), Roadblock(1, 4)]
    qnet, _ = dqn.train_agent(AgentConfig(episodes=500), sim, roadblocks=rbs, seed=0)
    total = agree = 0
    for rb in rbs:
        oracle = Oracle(sim, rb)
        env = Highway(sim, rb)
        for key in _reachable(oracle):
            env.t, env.x, env.y, env.v = key
            total += 1
            agree += qnet.greedy(dqn.normalize_state(env.state, sim)) in oracle.optimal_actions(*key)
    assert total >= 10
    assert agree / total >= 0.95


# persistence -----------------------------------------------------------------------------------

def test_agent_round_trip(tmp_path):
    qnet = dqn.new_qnetwork(AgentConfig(), 9)
    dqn.save_agent(qnet, tmp_path / "a.swf")
    back = dqn.load_agent(tmp_path / "a.swf")
    assert back.model.equals(qnet.model)
    assert back.model.output_activation == Activation.LINEAR


def test_softmax_file_is_not_an_agent(tmp_path):
    nn.save_weights(nn.init_weights([5, 4, 2], [Activation.RELU, Activation.SOFTMAX], seed=0), tmp_path / "c.swf")
    with pytest.raises(ContractError):
        dqn.load_agent(tmp_path / "c.swf")


def test_greedy_policy_wrapper():
    qnet = fixed_q(0.0, 1.0)
    pol = dqn.GreedyPolicy(qnet, HighwayConfig())
    assert pol(TrafficState(100, 60, 5, 0, 1)) is Action.LANE_CHANGE
