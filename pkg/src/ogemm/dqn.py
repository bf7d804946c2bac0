"""Deep Q-learning over the device space.

The Q-network maps a normalised genome to one value per step action.
Training is continuing (no terminal states): the target for a transition
(s, a, r, s') is r + gamma * max_a' Q(s', a'), where r is the reward of the
successor device s'.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from . import device as dev
from .emulator import EmulatorConfig, ExactBackend, OpticalBackend
from .errors import ConfigurationError, DomainError, TrainingError
from .materials import MaterialsTable
from .nn import AdamState, DenseNet, adam_step, backward, forward
from .reward import REWARD_FLOOR, evaluate_table
from .rng import stream
from .trace import OptimizationTrace

MAX_REJECTION_SAMPLES = 100_000


class Environment(Protocol):
    n_state: int
    n_actions: int

    def random_state(self, rng: np.random.Generator): ...
    def step(self, state, action: int): ...
    def encode(self, state) -> np.ndarray: ...
    def reward(self, state) -> float: ...
    def metrics(self, state) -> dict: ...


class DeviceEnvironment:
    """The device space with rewards from the emulator, memoised per genome.

    Every evaluation uses the same seeded benchmark pairs, so the reward is a
    deterministic function of the genome.
    """

    n_state = dev.N_DIMS
    n_actions = dev.N_ACTIONS

    def __init__(self, table: MaterialsTable, cfg: EmulatorConfig, n_pairs: int = 10000,
                 mat_dim: int = 4, thickness_step: float = dev.THICKNESS_STEP_NM,
                 floor: float = REWARD_FLOOR):
        self.table = table
        self.cfg = cfg
        self.n_pairs = n_pairs
        self.mat_dim = mat_dim
        self.thickness_step = thickness_step
        self.floor = floor
        self._cache: dict[tuple, dict] = {}
        self.evaluations = 0

    def random_state(self, rng):
        return dev.random_genome(rng)

    def step(self, state, action):
        return dev.apply_action(state, int(action), self.thickness_step)

    def encode(self, state):
        return state.normalized()

    def metrics(self, state) -> dict:
        key = state.key()
        hit = self._cache.get(key)
        if hit is None:
            tt = dev.transmittance_table(state, self.table)
            try:
                rep = evaluate_table(tt, self.cfg, self.n_pairs, self.mat_dim, self.floor)
                r = rep.reward
            except (ArithmeticError, ValueError):
                r = self.floor
            hit = {"reward": float(r), "t_max": tt.t_max, "t_diff": tt.t_diff,
                   "thickness": tt.total_thickness_nm}
            self._cache[key] = hit
            self.evaluations += 1
        return dict(hit, genome=state)

    def reward(self, state) -> float:
        return self.metrics(state)["reward"]


class ChainEnvironment:
    """Deterministic chain MDP used to check the learner against value iteration.

    States 0..n-1 (one-hot encoded), action 0 moves left, 1 moves right,
    clamped at the ends; the reward is that of the state moved into.
    """

    def __init__(self, rewards: Sequence[float] = (0.2, 0.0, 0.0, 0.0, 1.0)):
        self.rewards = np.asarray(rewards, dtype=float)
        self.n_state = len(self.rewards)
        self.n_actions = 2

    def random_state(self, rng):
        return int(rng.integers(self.n_state))

    def step(self, state, action):
        return int(np.clip(state + (1 if action == 1 else -1), 0, self.n_state - 1))

    def encode(self, state):
        v = np.zeros(self.n_state)
        v[state] = 1.0
        return v

    def reward(self, state):
        return float(self.rewards[state])

    def metrics(self, state):
        return {"reward": self.reward(state), "t_max": np.nan, "t_diff": np.nan,
                "thickness": np.nan, "genome": state}

    def value_iteration(self, gamma: float, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
        """Optimal Q table and greedy policy."""
        Q = np.zeros((self.n_state, 2))
        while True:
            V = Q.max(axis=1)
            newQ = np.array([[self.reward(self.step(s, a)) + gamma * V[self.step(s, a)]
                              for a in range(2)] for s in range(self.n_state)])
            if np.max(np.abs(newQ - Q)) < tol:
                return newQ, np.argmax(newQ, axis=1)
            Q = newQ


@dataclass
class AgentConfig:
    hidden: tuple[int, ...] = (512, 1024, 512, 256)
    gamma: float = 0.9
    lr: float = 0.005
    batch: int = 128
    memory_capacity: int = 2000
    warmup_samples: int = 2000
    eps_start: float = 0.5
    eps_decay: float = 0.04
    eps_floor: float = 0.1
    policy: str = "argmax"

    def to_dict(self) -> dict:
        return asdict(self)


def epsilon_schedule(epoch: int, start: float = 0.5, decay: float = 0.04, floor: float = 0.1) -> float:
    if epoch < 0:
        raise DomainError("epoch must be non-negative")
    return max(start - decay * epoch, floor)


class ReplayMemory:
    """Fixed-capacity FIFO store of (state, action, reward, next_state)."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise DomainError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.size = 0
        self.head = 0  # slot of the next write (== oldest entry once full)

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2) -> None:
        i = self.head
        self.states[i], self.actions[i], self.rewards[i], self.next_states[i] = s, a, r, s2
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ordered(self) -> list[tuple]:
        """Contents oldest first."""
        start = self.head if self.size == self.capacity else 0
        idx = [(start + k) % self.capacity for k in range(self.size)]
        return [(self.states[i], int(self.actions[i]), float(self.rewards[i]), self.next_states[i]) for i in idx]

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=min(batch, self.size))
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx]


class QAgent:
    def __init__(self, n_state: int, n_actions: int, cfg: AgentConfig | None = None,
                 backend=None, seed: int = 0):
        self.cfg = cfg or AgentConfig()
        dims = [n_state, *self.cfg.hidden, n_actions]
        acts = ["tanh"] * len(self.cfg.hidden) + ["linear"]
        self.net = DenseNet(dims, acts, backend if backend is not None else ExactBackend(), seed=seed)
        self.adam = AdamState.for_net(self.net, lr=self.cfg.lr)
        self.memory = ReplayMemory(self.cfg.memory_capacity, n_state)
        self.n_actions = n_actions
        self.epoch = 0
        self.iteration = 0
        self.losses: list[float] = []

    @property
    def epsilon(self) -> float:
        c = self.cfg
        return epsilon_schedule(self.epoch, c.eps_start, c.eps_decay, c.eps_floor)

    def q_values(self, states) -> np.ndarray:
        return self.net(np.atleast_2d(np.asarray(states, dtype=float)))

    def choose(self, q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
        """Epsilon-greedy choice from one row of Q values (ties -> lowest index)."""
        explore = rng.random() < epsilon
        rand_action = int(rng.integers(self.n_actions))
        if explore:
            return rand_action
        if self.cfg.policy == "softmax":
            p = np.exp(q - q.max())
            return int(rng.choice(self.n_actions, p=p / p.sum()))
        return int(np.argmax(q))

    def select_action(self, state_vec, explore: bool, rng: np.random.Generator,
                      epsilon: float | None = None) -> int:
        eps = (self.epsilon if epsilon is None else epsilon) if explore else 0.0
        return self.choose(self.q_values(state_vec)[0], eps, rng)

    def update(self, rng: np.random.Generator) -> float:
        """One gradient step on a replay batch; returns the squared TD loss."""
        s, a, r, s2 = self.memory.sample(self.cfg.batch, rng)
        target = r + self.cfg.gamma * self.q_values(s2).max(axis=1)
        acts = forward(self.net, s)
        q = acts.output
        rows = np.arange(len(a))
        td = q[rows, a] - target
        loss = float(np.mean(td ** 2))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite TD loss at iteration {self.iteration}")
        grad = np.zeros_like(q)
        grad[rows, a] = 2.0 * td / len(a)
        adam_step(self.net, backward(self.net, acts, grad), self.adam)
        self.losses.append(loss)
        return loss


def seed_memory(agent: QAgent, env, n: int, rng: np.random.Generator) -> None:
    """Fill the replay memory with random (state, action) samples and their rewards."""
    for _ in range(n):
        s = env.random_state(rng)
        a = int(rng.integers(env.n_actions))
        s2 = env.step(s, a)
        agent.memory.add(env.encode(s), a, env.reward(s2), env.encode(s2))


def train_agent(env, agent: QAgent, epochs: int, iters_per_epoch: int = 1000,
                seed: int = 0) -> OptimizationTrace:
    """Seed the memory, then run epsilon-greedy Q-learning; returns the training trace."""
    rng = stream(seed, 7)
    if len(agent.memory) == 0:
        seed_memory(agent, env, agent.cfg.warmup_samples, rng)
    records = []
    for _ in range(epochs):
        eps = agent.epsilon
        s = env.random_state(rng)
        for _ in range(iters_per_epoch):
            a = agent.select_action(env.encode(s), True, rng, eps)
            s2 = env.step(s, a)
            m = env.metrics(s2)
            agent.memory.add(env.encode(s), a, m["reward"], env.encode(s2))
            agent.update(rng)
            agent.iteration += 1
            records.append(m)
            s = s2
        agent.epoch += 1
    return OptimizationTrace.from_records([records], label="dqn-train")


def negative_starts(env, n: int, rng: np.random.Generator,
                    max_samples: int = MAX_REJECTION_SAMPLES) -> list:
    """``n`` random states with reward < 0 (rejection sampling)."""
    out, tries = [], 0
    while len(out) < n:
        if tries >= max_samples:
            raise ConfigurationError(
                f"no device with reward < 0 in {max_samples} random samples; the device space is too easy")
        s = env.random_state(rng)
        tries += 1
        if env.reward(s) < 0:
            out.append(s)
    return out


def rollout(agent: QAgent, env, starts: Sequence, iters: int, seed: int = 0,
            epsilon: float | None = None, label: str = "dqn") -> OptimizationTrace:
    """Epsilon-greedy rollouts from each start; all devices step together."""
    rng = stream(seed, 11)
    eps = agent.cfg.eps_floor if epsilon is None else epsilon
    states = list(starts)
    records = [[env.metrics(s)] for s in states]
    for _ in range(iters):
        q = agent.q_values([env.encode(s) for s in states])
        for k, s in enumerate(states):
            s2 = env.step(s, agent.choose(q[k], eps, rng))
            records[k].append(env.metrics(s2))
            states[k] = s2
    return OptimizationTrace.from_records(records, label=label)


def validate_agent(agent: QAgent, env, n_init_devices: int, iters: int = 500, seed: int = 0,
                   starts: Sequence | None = None) -> OptimizationTrace:
    """Roll the trained agent out from random devices whose reward is below zero."""
    if starts is None:
        starts = negative_starts(env, n_init_devices, stream(seed, 13))
    return rollout(agent, env, starts, iters, seed, label="dqn-validation")


def closed_loop_agent(host_tt, emu_cfg: EmulatorConfig, n_state: int = dev.N_DIMS,
                      n_actions: int = dev.N_ACTIONS, cfg: AgentConfig | None = None,
                      seed: int = 0) -> QAgent:
    """Agent whose Q-network products all run on the emulator with ``host_tt``."""
    return QAgent(n_state, n_actions, cfg, OpticalBackend(host_tt, emu_cfg, stream_key=99), seed)


def closed_loop_train(env, host_tt, emu_cfg: EmulatorConfig, epochs: int, iters_per_epoch: int = 1000,
                      n_init_devices: int = 10, val_iters: int = 500, cfg: AgentConfig | None = None,
                      seed: int = 0) -> tuple[OptimizationTrace, OptimizationTrace, QAgent]:
    """Train and validate an agent whose Q-network runs on the emulated hardware.

    Returns ``(training_trace, validation_trace, agent)``.
    """
    agent = closed_loop_agent(host_tt, emu_cfg, env.n_state, env.n_actions, cfg, seed)
    train = train_agent(env, agent, epochs, iters_per_epoch, seed)
    val = validate_agent(agent, env, n_init_devices, val_iters, seed)
    return train, val, agent
