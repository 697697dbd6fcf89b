"""Deep Q-learning for the lane-keep / lane-change decision.

The Q-network is an ``nn.ModelWeights`` (5 -> hidden -> 2, ReLU hidden,
linear output) trained with squared error on TD targets from a periodically
synced target network. Everything is driven by one seed.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ContractError
from .nn import Activation, Loss
from .rng import Rng
from .traffic import Action, Highway, episode_schedule

N_FEATURES = 5
N_ACTIONS = 2


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_min: float = 0.05
    epsilon_decay: float = 0.995
    batch: int = 32
    target_sync_every: int = 100
    hidden_sizes: tuple = (32, 32)
    alpha: float = 0.001
    episodes: int = 2000
    buffer_capacity: int = 10_000

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        if not 0 <= self.epsilon_min <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_min <= epsilon_start <= 1")
        if self.batch < 1 or self.target_sync_every < 1 or self.buffer_capacity < 1:
            raise ValueError("batch, target_sync_every and buffer_capacity must be >= 1")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))


@dataclass(frozen=True, eq=False)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Bounded FIFO of transitions with seeded uniform sampling."""

    def __init__(self, capacity=10_000, seed=0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.storage = []
        self.next = 0  # slot the next push overwrites once full
        self.rng = Rng(seed)

    def __len__(self):
        return len(self.storage)

    def push(self, transition):
        if len(self.storage) < self.capacity:
            self.storage.append(transition)
        else:
            self.storage[self.next] = transition
        self.next = (self.next + 1) % self.capacity

    def sample(self, batch):
        """``batch`` distinct transitions, or None while the buffer holds fewer."""
        if len(self.storage) < batch:
            return None
        return [self.storage[i] for i in self.rng.sample_indices(len(self.storage), batch)]

    def items(self):
        """Contents from oldest to newest."""
        if len(self.storage) < self.capacity:
            return list(self.storage)
        return self.storage[self.next:] + self.storage[:self.next]


def buffer_push(buffer, transition):
    buffer.push(transition)


def buffer_sample(buffer, batch):
    return buffer.sample(batch)


@dataclass(frozen=True, eq=False)
class QNetwork:
    model: nn.ModelWeights

    def __post_init__(self):
        if self.model.output_activation != Activation.LINEAR:
            raise ContractError("a Q-network needs a linear output layer")
        if self.model.layers[-1].n_out != N_ACTIONS:
            raise ContractError(f"a Q-network needs {N_ACTIONS} outputs")

    def q_values(self, x):
        out, _ = nn.forward(self.model, x)
        return out

    def greedy(self, state_vec):
        q = self.q_values(state_vec)
        return Action.LANE_CHANGE if q[1] > q[0] else Action.LANE_KEEP


def new_qnetwork(config, seed):
    shape = [N_FEATURES, *config.hidden_sizes, N_ACTIONS]
    acts = [Activation.RELU] * len(config.hidden_sizes) + [Activation.LINEAR]
    return QNetwork(nn.init_weights(shape, acts, seed=seed, alpha=config.alpha))


def normalize_state(state, config):
    L = config.length
    vec = np.array([state.d1 / L, state.d2 / L, state.v / config.speed_limit, state.x / L, state.y / 2],
                   dtype=np.float32)
    return np.clip(vec, 0.0, 1.0)


def select_action(qnet, state_vec, epsilon, rng):
    """Epsilon-greedy; the greedy branch breaks exact ties toward LANE_KEEP."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must be in [0, 1]")
    if rng.uniform() < epsilon:
        return Action(rng.integer(N_ACTIONS))
    return qnet.greedy(state_vec)


def td_targets(qnet_target, minibatch, gamma):
    """``r`` for terminal transitions, else ``r + gamma * max_a Q_target(s', a)``."""
    r = np.array([t.r for t in minibatch], dtype=np.float32)
    done = np.array([t.done for t in minibatch])
    s_next = np.stack([t.s_next for t in minibatch])
    q_next = qnet_target.q_values(s_next).max(axis=1)
    return np.where(done, r, r + np.float32(gamma) * q_next).astype(np.float32)


def _fit_minibatch(online, target, minibatch, gamma):
    s = np.stack([t.s for t in minibatch])
    a = np.array([t.a for t in minibatch])
    y = td_targets(target, minibatch, gamma)
    out, trace = nn.forward(online.model, s)
    regress = out.copy()  # untaken action regresses onto itself -> zero gradient
    regress[np.arange(len(a)), a] = y
    grads = nn.backward(online.model, trace, regress, Loss.SQUARED_ERROR)
    return QNetwork(nn.sgd_update(online.model, grads))


@dataclass
class EpisodeRecord:
    episode: int
    ret: float
    epsilon: float
    outcome: str
    steps: int


@dataclass
class TrainingHistory:
    episodes: list = field(default_factory=list)
    updates: int = 0
    syncs: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "return", "epsilon", "outcome"])
            for e in self.episodes:
                w.writerow([e.episode, f"{e.ret:.6f}", f"{e.epsilon:.6f}", e.outcome])


def train_agent(config, sim_config, roadblocks=None, seed=0, qnet=None):
    """Train a Q-network on the roadblock scenario.

    Each episode draws a roadblock uniformly from ``roadblocks`` (the default
    class-map placements when None). Returns ``(qnet, history)``.
    """
    root = Rng(seed)
    init_seed = int(root.u64(1)[0])
    schedule = episode_schedule(sim_config, int(root.u64(1)[0]), roadblocks)
    act_rng = root.spawn()
    buffer = ReplayBuffer(config.buffer_capacity, seed=int(root.u64(1)[0]))
    online = qnet or new_qnetwork(config, init_seed)
    target = online
    history = TrainingHistory()
    epsilon = config.epsilon_start
    for ep in range(config.episodes):
        rb, ep_seed = next(schedule)
        env = Highway(sim_config, rb, ep_seed)
        s = normalize_state(env.state, sim_config)
        while not env.done:
            a = select_action(online, s, epsilon, act_rng)
            state, r, done, _ = env.step(a)
            s_next = normalize_state(state, sim_config)
            buffer.push(Transition(s, int(a), float(r), s_next, bool(done)))
            s = s_next
            minibatch = buffer.sample(config.batch)
            if minibatch is not None:
                online = _fit_minibatch(online, target, minibatch, config.gamma)
                history.updates += 1
                if history.updates % config.target_sync_every == 0:
                    target = online
                    history.syncs += 1
        history.episodes.append(EpisodeRecord(ep + 1, env.total_reward, epsilon, env.outcome.value, env.t))
        epsilon = max(config.epsilon_min, epsilon * config.epsilon_decay)
    return online, history


class GreedyPolicy:
    """Greedy Q-network policy, callable as ``policy(state, env=None)``."""

    def __init__(self, qnet, sim_config):
        self.qnet = qnet
        self.sim_config = sim_config

    def __call__(self, state, env=None):
        return self.qnet.greedy(normalize_state(state, self.sim_config))


def save_agent(qnet, path):
    return nn.save_weights(qnet.model, path)


def load_agent(path):
    model = nn.load_weights(path)
    return QNetwork(model)
