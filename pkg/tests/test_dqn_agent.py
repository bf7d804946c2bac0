import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from ogemm import device as dev
from ogemm.device import ContinuousLevels
from ogemm.dqn import (AgentConfig, ChainEnvironment, DeviceEnvironment, QAgent, ReplayMemory, closed_loop_train,
                       epsilon_schedule, negative_starts, train_agent, validate_agent)
from ogemm.emulator import EmulatorConfig
from ogemm.errors import ConfigurationError, DomainError
from ogemm.trace import OptimizationTrace, read_trace_csv, running_mean

SMALL = AgentConfig(hidden=(32, 32), batch=32, memory_capacity=500, warmup_samples=200)
# left end pays 0.9 per step, right end 1.0; the optimum splits the chain
MIXED_CHAIN = (0.9, 0.0, 0.0, 0.0, 1.0)


def tiny_device_env(table, seed=0, n_pairs=200):
    return DeviceEnvironment(table, EmulatorConfig(rng_seed=seed), n_pairs=n_pairs)


# --- schedule and action choice ------------------------------------------------------------------


@pytest.mark.parametrize("epoch,eps", [(0, 0.5), (10, 0.1), (30, 0.1), (5, 0.3)])
def test_epsilon_schedule(epoch, eps):
    assert epsilon_schedule(epoch) == pytest.approx(eps, abs=1e-12)


@given(st.integers(0, 1000))
def test_epsilon_in_range(epoch):
    assert 0.1 <= epsilon_schedule(epoch) <= 0.5


def test_greedy_action_and_ties():
    agent = QAgent(3, 20, SMALL)
    rng = np.random.default_rng(0)
    q = np.zeros(20)
    q[7] = 1.0
    assert agent.choose(q, 0.0, rng) == 7
    q[4] = 1.0
    assert agent.choose(q, 0.0, rng) == 4


def test_hand_set_network_argmax():
    agent = QAgent(3, 20, AgentConfig(hidden=(4,)))
    net = agent.net
    net.weights[-1][:] = 0.0
    net.biases[-1][:] = 0.0
    net.biases[-1][7] = 1.0
    net.touch()
    assert agent.select_action(np.zeros(3), explore=False, rng=np.random.default_rng(0)) == 7


def test_uniform_exploration():
    agent = QAgent(3, 20, SMALL)
    rng = np.random.default_rng(1)
    q = np.arange(20.0)
    draws = np.array([agent.choose(q, 1.0, rng) for _ in range(100_000)])
    counts = np.bincount(draws, minlength=20)
    assert chisquare(counts).pvalue > 1e-3
    assert np.all(np.abs(counts - 5000) < 3 * np.sqrt(100_000 * 0.05 * 0.95))


# --- memory --------------------------------------------------------------------------------------


def test_memory_fifo_eviction():
    m = ReplayMemory(3, 1)
    for k in range(3):
        m.add([k], k, float(k), [k + 1])
    m.add([9], 9, 9.0, [10])
    assert len(m) == 3
    assert [a for _, a, _, _ in m.ordered()] == [1, 2, 9]


@given(st.integers(1, 20), st.integers(0, 60))
def test_memory_never_exceeds_capacity(cap, n):
    m = ReplayMemory(cap, 2)
    for k in range(n):
        m.add([k, k], 0, 0.0, [k, k])
    assert len(m) == min(cap, n)
    if n:
        assert m.ordered()[-1][0][0] == n - 1


def test_memory_capacity_must_be_positive():
    with pytest.raises(DomainError):
        ReplayMemory(0, 2)


# --- learning oracles ----------------------------------------------------------------------------


def test_chain_matches_value_iteration():
    env = ChainEnvironment(MIXED_CHAIN)
    _, optimum = env.value_iteration(SMALL.gamma)
    assert optimum.tolist() == [0, 0, 1, 1, 1]
    hits = 0
    for seed in range(5):
        agent = QAgent(env.n_state, env.n_actions, SMALL, seed=seed)
        train_agent(env, agent, 5, 300, seed)
        hits += np.array_equal(np.argmax(agent.q_values(np.eye(5)), axis=1), optimum)
    assert hits >= 4


def test_gamma_zero_learns_immediate_rewards():
    env = ChainEnvironment((0.2, 1.0))
    cfg = AgentConfig(hidden=(16,), gamma=0.0, batch=32, memory_capacity=400, warmup_samples=200)
    agent = QAgent(2, 2, cfg, seed=0)
    train_agent(env, agent, 2, 300, 0)
    # moving left always lands in state 0 (reward 0.2), right in state 1 (reward 1.0)
    assert np.allclose(agent.q_values(np.eye(2)), [[0.2, 1.0], [0.2, 1.0]], atol=0.05)


def test_losses_finite_and_non_negative():
    env = ChainEnvironment(MIXED_CHAIN)
    agent = QAgent(5, 2, SMALL, seed=3)
    train_agent(env, agent, 1, 100, 3)
    assert len(agent.losses) == 100
    assert all(np.isfinite(l) and l >= 0 for l in agent.losses)


def test_replay_determinism():
    env = ChainEnvironment(MIXED_CHAIN)
    runs = []
    for _ in range(2):
        agent = QAgent(5, 2, SMALL, seed=11)
        tr = train_agent(env, agent, 2, 50, 11)
        runs.append((agent, tr))
    (a, ta), (b, tb) = runs
    assert all(np.array_equal(p, q) for p, q in zip(a.net.params, b.net.params))
    assert all(np.array_equal(x[0], y[0]) and x[1:3] == y[1:3] for x, y in zip(a.memory.ordered(), b.memory.ordered()))
    assert np.array_equal(ta.reward, tb.reward)


# --- device environment --------------------------------------------------------------------------


def test_negative_starts(table):
    env = tiny_device_env(table)
    starts = negative_starts(env, 3, np.random.default_rng(0))
    assert len(starts) == 3 and all(env.reward(s) < 0 for s in starts)


def test_rejection_cap():
    env = ChainEnvironment((0.1, 0.2, 0.3))
    with pytest.raises(ConfigurationError):
        negative_starts(env, 1, np.random.default_rng(0), max_samples=50)


def test_degenerate_device_gets_floor_reward(table):
    flat = table.with_gst(table.gst_amorphous, table.gst_amorphous)
    env = DeviceEnvironment(flat, EmulatorConfig(), n_pairs=100)
    assert env.reward(dev.random_genome(0)) == -10.0


def test_validation_trace_shapes(table):
    env = tiny_device_env(table)
    cfg = AgentConfig(hidden=(16,), batch=8, memory_capacity=50, warmup_samples=20)
    agent = QAgent(10, 20, cfg, seed=0)
    train_agent(env, agent, 1, 10, 0)
    val = validate_agent(agent, env, 2, 7, 0)
    assert val.reward.shape == (2, 8)
    assert np.all(val.reward[:, 0] < 0)


def test_closed_loop_ideal_is_step_identical(table):
    env_a, env_b = tiny_device_env(table), tiny_device_env(table)
    cfg = AgentConfig(hidden=(16, 16), batch=8, memory_capacity=60, warmup_samples=30)
    ideal = ContinuousLevels(0.1, 0.7)
    quiet = EmulatorConfig(noise_enabled=False)
    tr_o, val_o, ag_o = closed_loop_train(env_a, ideal, quiet, 1, 25, 2, 6, cfg, seed=4)
    agent = QAgent(10, 20, cfg, seed=4)
    tr_e = train_agent(env_b, agent, 1, 25, 4)
    val_e = validate_agent(agent, env_b, 2, 6, 4)
    assert np.array_equal(tr_o.reward, tr_e.reward)
    assert np.array_equal(val_o.reward, val_e.reward)
    assert [g.key() for g in val_o.genomes[0]] == [g.key() for g in val_e.genomes[0]]
    assert max(np.max(np.abs(p - q)) for p, q in zip(ag_o.net.params, agent.net.params)) < 1e-9


# --- traces --------------------------------------------------------------------------------------


@given(st.lists(st.lists(st.floats(-10, 1), min_size=5, max_size=5), min_size=1, max_size=4))
def test_running_average_accounting(rows):
    x = np.array(rows)
    acc = running_mean(x)
    for n in range(1, x.shape[1] + 1):
        assert np.allclose(acc[:, n - 1], x[:, :n].mean(axis=1), atol=1e-12, rtol=0)


def test_trace_csv_round_trip(tmp_path):
    recs = [[{"reward": r, "t_max": 0.5, "t_diff": 0.1 * r, "thickness": 100.0} for r in (0.1, 0.4, 0.7)]] * 2
    tr = OptimizationTrace.from_records(recs)
    d = read_trace_csv(tr.write_csv(tmp_path / "t.csv"))
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "iteration,reward_avg,tmax_avg,tdiff_avg,thickness_avg"
    assert np.allclose(d["reward_avg"], tr.mean_curve("reward"), atol=1e-15)
    assert tr.initial() == pytest.approx(0.1) and tr.final() == pytest.approx(0.4)
