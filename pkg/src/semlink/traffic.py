"""Discrete highway with a single-lane roadblock, as a finite-horizon MDP.

The target vehicle starts at ``x = 0`` in the blocked lane at the speed
limit and must decide each step between keeping its lane and changing
lanes before it reaches the roadblock. Background vehicles circulate on a
ring in the unblocked lanes with seeded speed jitter. A successful merge
ends the episode with a reward graded by the merge speed; reaching the
roadblock in the blocked lane ends it with the failure reward.

``Oracle`` solves the noise-free version exactly by backward induction over
``(t, x, y, v)`` and serves as ground truth for policy evaluation.
"""

import csv
import enum
import math
from collections import Counter
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ContractError
from .rng import Rng


class Action(enum.IntEnum):
    LANE_KEEP = 0
    LANE_CHANGE = 1


class Outcome(enum.Enum):
    MERGED_AT_SPEED = "merged_at_speed"  # R1
    MERGED_MID_SPEED = "merged_mid_speed"  # (R1 + R3) / 2
    MERGED_SLOW = "merged_slow"  # R3
    BLOCKED = "blocked"  # R2
    TIMED_OUT = "timed_out"


@dataclass(frozen=True)
class RewardSpec:
    r1: float = 10.0
    r2: float = -10.0
    r3: float = 5.0
    step_penalty: float = -0.1
    flow_penalty: float = -1.0

    def __post_init__(self):
        if not self.r1 > self.r3 > 0 > self.r2:
            raise ValueError(f"rewards must satisfy r1 > r3 > 0 > r2, got {self.r1}, {self.r3}, {self.r2}")


@dataclass(frozen=True)
class HighwayConfig:
    lanes: int = 3
    length: int = 100
    speed_limit: int = 5
    n_background: int = 6
    safety_gap: int = 2
    t_max: int = 60
    seed: int = 0
    noise: bool = True
    margin: int = 20  # roadblocks live in [margin, length - margin]
    rewards: RewardSpec = field(default_factory=RewardSpec)

    def __post_init__(self):
        if self.lanes not in (2, 3):
            raise ValueError(f"lanes must be 3 (or 2 for toy instances), got {self.lanes}")
        if self.speed_limit < 1:
            raise ValueError("speed_limit must be >= 1")
        if self.margin < 1 or self.length < max(4, 2 * self.margin):
            raise ValueError(f"length {self.length} too short for margin {self.margin}")
        if self.margin >= 20 and self.length < 20:
            raise ValueError("length must be >= 20")
        if self.t_max < 1 or self.safety_gap < 0 or self.n_background < 0:
            raise ValueError("t_max must be >= 1; safety_gap and n_background >= 0")
        if self.n_background > (self.lanes - 1) * (self.length - 1):
            raise ValueError("too many background vehicles for the road")

    @property
    def flow_threshold(self):
        return self.speed_limit / 5

    def frozen(self):
        return replace(self, noise=False)


_CONFIG_KEYS = {f.name for f in fields(HighwayConfig)} - {"rewards"}
_REWARD_KEYS = {f.name for f in fields(RewardSpec)}


def config_from_mapping(values, base=None):
    """Build a HighwayConfig from ``key -> string`` pairs; unknown keys raise."""
    base = base or HighwayConfig()
    top, rew = {}, {}
    for key, raw in values.items():
        if key in _REWARD_KEYS:
            rew[key] = float(raw)
        elif key == "noise":
            top[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
        elif key in _CONFIG_KEYS:
            top[key] = int(raw)
        else:
            raise KeyError(f"unknown highway config key {key!r}")
    if rew:
        top["rewards"] = replace(base.rewards, **rew)
    return replace(base, **top)


def parse_kv(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return config_from_mapping(parse_kv(fh.read()))


@dataclass(frozen=True)
class Roadblock:
    lane: int
    position: int

    def check(self, config):
        lo, hi = config.margin, config.length - config.margin
        if not 0 <= self.lane < config.lanes or not lo <= self.position <= hi:
            raise ValueError(f"roadblock {self} outside lanes [0, {config.lanes}) x positions [{lo}, {hi}]")


@dataclass(frozen=True)
class TrafficState:
    d1: int  # gap to the lead vehicle in the own lane, capped at length
    d2: int  # distance to the roadblock; == length when the own lane is unblocked
    v: int
    x: int
    y: int


def roadblocks_for(config, class_map=None):
    """Roadblock placements used for training/evaluation (the class map's, by default)."""
    if class_map is None:
        from .codec import default_class_map
        class_map = default_class_map(10, config.length)
    out = []
    for lane, pos in class_map.roadblocks():
        rb = Roadblock(lane % config.lanes, pos)
        rb.check(config)
        if rb not in out:
            out.append(rb)
    return out


# Shared transition kernel -------------------------------------------------------

def _ring_gap(cell, positions, length):
    """Smallest ring distance from ``cell`` to any of ``positions`` (``length`` if none)."""
    if len(positions) == 0:
        return length
    d = np.abs(np.asarray(positions) - cell) % length
    return int(np.min(np.minimum(d, length - d)))


def _lead_gap(x, positions, length):
    ahead = [p - x for p in positions if p > x]
    return min(min(ahead), length) if ahead else length


def target_move(config, block, lanes, pos, x, y, v, action):
    """Target kinematics against the current background; returns ``(x', y', v')``."""
    limit = config.speed_limit
    if action == Action.LANE_CHANGE:
        best, best_gap = None, -1
        for lane in (y - 1, y + 1):  # ascending, so ties keep the lower index
            if 0 <= lane < config.lanes and lane != block.lane:
                gap = _ring_gap(x + v, pos[lanes == lane], config.length)
                if gap > best_gap:
                    best, best_gap = lane, gap
        if best is not None and best_gap >= config.safety_gap:
            return x + v, best, v
        v2 = max(0, v - 1)
        return x + v2, y, v2
    d1 = _lead_gap(x, pos[lanes == y], config.length) if y != block.lane else config.length
    v2 = max(0, min(limit, d1 - 1, v + 1))
    return x + v2, y, v2


def move_background(config, lanes, pos, speeds, obstacle=None):
    """Advance every background vehicle by up to its speed without entering occupied cells.

    ``obstacle`` is an optional ``(lane, cell)`` held by the target.
    Each lane is a ring of ``config.length`` cells.
    """
    L = config.length
    new_pos = pos.copy()
    for lane in np.unique(lanes):
        idx = np.flatnonzero(lanes == lane)
        idx = idx[np.argsort(-pos[idx], kind="stable")]  # front of the queue first
        k = len(idx)
        for j, i in enumerate(idx):
            gap = L
            if k > 1:
                leader = idx[j - 1]  # j == 0 wraps to the last vehicle, still at its old cell
                gap = (new_pos[leader] - pos[i]) % L
            if obstacle is not None and obstacle[0] == lane:
                og = (obstacle[1] - pos[i]) % L
                if og:
                    gap = min(gap, og)
            new_pos[i] = (pos[i] + min(int(speeds[i]), gap - 1)) % L
    return new_pos


def mean_background_speed(config, speeds):
    return float(np.mean(speeds)) if len(speeds) else float(config.speed_limit)


def outcome_reward(config, block, x, y, v2, x2, y2, t2, speeds):
    """Reward, done flag and outcome of a completed move."""
    rw = config.rewards
    if y2 != block.lane and y == block.lane:
        if x2 >= block.position:
            return rw.r2, True, Outcome.BLOCKED  # still mid-merge when the roadblock was reached
        mean_bg = mean_background_speed(config, speeds)
        if v2 >= mean_bg:
            return rw.r1, True, Outcome.MERGED_AT_SPEED
        if v2 <= max(1.0, config.flow_threshold):
            return rw.r3, True, Outcome.MERGED_SLOW
        return (rw.r1 + rw.r3) / 2, True, Outcome.MERGED_MID_SPEED
    if y2 == block.lane and x2 >= block.position:
        return rw.r2, True, Outcome.BLOCKED
    reward = rw.step_penalty
    mean_all = (v2 + float(np.sum(speeds))) / (1 + len(speeds))
    if mean_all < config.flow_threshold:
        reward += rw.flow_penalty
    if t2 >= config.t_max:
        return reward, True, Outcome.TIMED_OUT
    return reward, False, None


# Episode ---------------------------------------------------------------------------

class Highway:
    """One episode of the roadblock scenario.

    Example:
        >>> env = Highway(HighwayConfig(n_background=0), Roadblock(1, 60))
        >>> env.reset()
        TrafficState(d1=100, d2=60, v=5, x=0, y=1)
    """

    def __init__(self, config, roadblock, seed=None):
        roadblock.check(config)
        self.config = config
        self.roadblock = roadblock
        self.seed = config.seed if seed is None else seed
        self.reset()

    def reset(self):
        cfg = self.config
        self.rng = Rng(self.seed)
        free_lanes = [l for l in range(cfg.lanes) if l != self.roadblock.lane]
        cells = (cfg.length - 1) * len(free_lanes)
        picks = self.rng.sample_indices(cells, cfg.n_background)
        self.bg_lane = np.array([free_lanes[p // (cfg.length - 1)] for p in picks], dtype=np.int64)
        self.bg_pos = np.array([1 + p % (cfg.length - 1) for p in picks], dtype=np.int64)
        self.bg_speed = 1 + self.rng.integers(cfg.speed_limit, cfg.n_background)
        self.t = 0
        self.x, self.y, self.v = 0, self.roadblock.lane, cfg.speed_limit
        self.done = False
        self.outcome = None
        self.total_reward = 0.0
        return self.state

    @property
    def state(self):
        cfg, rb = self.config, self.roadblock
        x = min(self.x, cfg.length)
        if self.y == rb.lane:
            d1 = cfg.length
            d2 = max(0, rb.position - self.x)
        else:
            d1 = _lead_gap(self.x, self.bg_pos[self.bg_lane == self.y], cfg.length)
            d2 = cfg.length
        return TrafficState(d1=d1, d2=d2, v=self.v, x=x, y=self.y)

    def snapshot(self):
        return (self.t, self.x, self.y, self.v, self.bg_pos.copy(), self.bg_speed.copy(),
                self.rng.state, self.done, self.outcome, self.total_reward)

    def restore(self, snap):
        (self.t, self.x, self.y, self.v, pos, speed, rng_state,
         self.done, self.outcome, self.total_reward) = snap
        self.bg_pos, self.bg_speed = pos.copy(), speed.copy()
        self.rng.state = rng_state

    def step(self, action):
        """Apply ``action``; returns ``(state, reward, done, outcome)``."""
        if self.done:
            raise ContractError("step() called on a finished episode")
        cfg = self.config
        action = Action(action)
        x2, y2, v2 = target_move(cfg, self.roadblock, self.bg_lane, self.bg_pos,
                                 self.x, self.y, self.v, action)
        if cfg.noise and cfg.n_background:
            jitter = self.rng.integers(3, cfg.n_background) - 1
            self.bg_speed = np.clip(self.bg_speed + jitter, 1, cfg.speed_limit)
        obstacle = (y2, x2) if y2 != self.roadblock.lane else None
        self.bg_pos = move_background(cfg, self.bg_lane, self.bg_pos, self.bg_speed, obstacle)
        reward, done, outcome = outcome_reward(cfg, self.roadblock, self.x, self.y, v2, x2, y2,
                                               self.t + 1, self.bg_speed)
        self.t += 1
        self.x, self.y, self.v = x2, y2, v2
        self.done, self.outcome = done, outcome
        self.total_reward += reward
        return self.state, reward, done, outcome

    def occupied_cells(self):
        cells = list(zip(self.bg_lane.tolist(), self.bg_pos.tolist()))
        if self.x < self.config.length:
            cells.append((self.y, self.x))
        return cells


# Oracle ---------------------------------------------------------------------------------

class Oracle:
    """Exact finite-horizon solution of the noise-free episode.

    Background vehicles keep their initial speeds, so their trajectory is a
    fixed function of time and the target's problem reduces to a
    deterministic MDP over ``(t, x, y, v)``. Values are undiscounted returns
    to the end of the horizon; ties resolve to ``LANE_KEEP``.
    """

    def __init__(self, config, roadblock, horizon=None, seed=None):
        if horizon is not None:
            if horizon < 1:
                raise ValueError("horizon must be >= 1")
            config = replace(config, t_max=horizon)
        self.config = config.frozen()
        self.roadblock = roadblock
        env = Highway(self.config, roadblock, seed)
        self.start = (0, env.x, env.y, env.v)
        self.bg_lane = env.bg_lane
        self.bg_speed = env.bg_speed
        self._positions = [env.bg_pos]
        self._memo = {}

    @property
    def horizon(self):
        return self.config.t_max

    def _bg(self, t):
        while len(self._positions) <= t:
            self._positions.append(move_background(self.config, self.bg_lane, self._positions[-1], self.bg_speed))
        return self._positions[t]

    def is_terminal(self, t, x, y, v):
        rb = self.roadblock
        return t >= self.horizon or y != rb.lane or x >= rb.position

    def transition(self, t, x, y, v, action):
        """``(next_key, reward, done)`` for one action from a non-terminal state."""
        pos = self._bg(t)
        x2, y2, v2 = target_move(self.config, self.roadblock, self.bg_lane, pos, x, y, v, action)
        reward, done, _ = outcome_reward(self.config, self.roadblock, x, y, v2, x2, y2, t + 1, self.bg_speed)
        return (t + 1, x2, y2, v2), reward, done

    def q_values(self, t, x, y, v):
        key = (t, x, y, v)
        if key in self._memo:
            return self._memo[key]
        if self.is_terminal(*key):
            raise ContractError(f"state {key} is terminal")
        q = []
        for a in Action:
            nxt, reward, done = self.transition(t, x, y, v, a)
            q.append(reward if done else reward + self.value(*nxt))
        self._memo[key] = q
        return q

    def value(self, t, x, y, v):
        if self.is_terminal(t, x, y, v):
            return 0.0
        return max(self.q_values(t, x, y, v))

    def action(self, t, x, y, v):
        """Optimal action, or None for absorbing states."""
        if self.is_terminal(t, x, y, v):
            return None
        q = self.q_values(t, x, y, v)
        return Action.LANE_CHANGE if q[1] > q[0] else Action.LANE_KEEP

    def optimal_actions(self, t, x, y, v, tol=1e-9):
        q = self.q_values(t, x, y, v)
        best = max(q)
        return {a for a in Action if q[a] >= best - tol}

    def start_value(self):
        return self.value(*self.start)

    def table(self):
        """Backward induction over the full ``(t, x, y, v)`` grid.

        Returns ``{(t, x, y, v): Action or None}``; merged and past-the-roadblock
        states are absorbing and map to None.
        """
        cfg = self.config
        out = {}
        for t in range(self.horizon - 1, -1, -1):
            for x in range(cfg.length + 1):
                for y in range(cfg.lanes):
                    for v in range(cfg.speed_limit + 1):
                        out[(t, x, y, v)] = self.action(t, x, y, v)
        return out


def value_iteration_oracle(config, roadblock, horizon, seed=None):
    return Oracle(config, roadblock, horizon, seed)


def episode_oracle(env):
    """Oracle for the noise-free twin of a running episode."""
    return Oracle(env.config, env.roadblock, seed=env.seed)


def enumerate_best_return(config, roadblock, seed=None):
    """Brute force: best undiscounted return over every action sequence of the noise-free episode."""
    env = Highway(config.frozen(), roadblock, seed)

    def best(snap):
        results = []
        for a in Action:
            env.restore(snap)
            _, reward, done, _ = env.step(a)
            results.append(reward if done else reward + best(env.snapshot()))
        return max(results)

    return best(env.snapshot())


# Policies and evaluation ---------------------------------------------------------------------

class OraclePolicy:
    """Acts optimally for the noise-free twin of the episode it is evaluated on."""

    def __init__(self):
        self._cache = {}

    def __call__(self, state, env):
        key = (env.roadblock, env.seed)
        if key not in self._cache:
            self._cache = {key: episode_oracle(env)}
        return self._cache[key].action(env.t, env.x, env.y, env.v)


class RandomPolicy:
    def __init__(self, seed=0):
        self.rng = Rng(seed)

    def __call__(self, state, env=None):
        return Action(self.rng.integer(2))


@dataclass
class EvalResult:
    mean_return: float
    outcomes: Counter
    decision_accuracy: float
    decisions: int
    episodes: int
    returns: list

    def summary(self):
        hist = ", ".join(f"{k.value}={v}" for k, v in sorted(self.outcomes.items(), key=lambda kv: kv[0].value))
        return (f"episodes={self.episodes} decisions={self.decisions} "
                f"accuracy={self.decision_accuracy:.4f} mean_return={self.mean_return:.4f} [{hist}]")


def episode_schedule(config, seed, roadblocks=None):
    """Endless deterministic stream of ``(roadblock, episode_seed)`` pairs."""
    roadblocks = roadblocks or roadblocks_for(config)
    rng = Rng(seed)
    while True:
        rb = roadblocks[rng.integer(len(roadblocks))]
        yield rb, int(rng.u64(1)[0])


def evaluate_policy(policy, config, n_episodes=None, seed=0, roadblocks=None, n_decisions=None):
    """Run ``policy(state, env)`` and score every decision against the episode oracle.

    A decision counts as correct when it is among the oracle's optimal
    actions for the noise-free twin at the same ``(t, x, y, v)``. Stops after
    ``n_episodes`` episodes or once ``n_decisions`` decisions have been made.
    """
    if n_episodes is None and n_decisions is None:
        raise ValueError("give n_episodes or n_decisions")
    if n_episodes is not None and n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    outcomes, returns = Counter(), []
    decisions = correct = 0
    for rb, ep_seed in episode_schedule(config, seed, roadblocks):
        env = Highway(config, rb, ep_seed)
        oracle = episode_oracle(env)
        state = env.state
        while not env.done:
            if n_decisions is not None and decisions >= n_decisions:
                break
            action = Action(policy(state, env))
            correct += action in oracle.optimal_actions(env.t, env.x, env.y, env.v)
            decisions += 1
            state, _, _, _ = env.step(action)
        if env.done:
            outcomes[env.outcome] += 1
        returns.append(env.total_reward)
        if n_episodes is not None and len(returns) >= n_episodes:
            break
        if n_decisions is not None and decisions >= n_decisions:
            break
    return EvalResult(
        mean_return=float(np.mean(returns)),
        outcomes=outcomes,
        decision_accuracy=correct / decisions if decisions else math.nan,
        decisions=decisions,
        episodes=len(returns),
        returns=returns,
    )


def dump_trajectory(rows, path):
    """Write ``(step, state, action, reward)`` rows as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "x", "y", "v", "d1", "d2", "action", "reward"])
        for step, s, action, reward in rows:
            w.writerow([step, s.x, s.y, s.v, s.d1, s.d2, int(action), f"{reward:.6g}"])
