import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitrec.allocator import AllocState
from splitrec.rewards import (RewardConfig, StepRewards, cosine, discounted_returns, reward_coherence,
                              reward_fit, reward_new_thread, reward_orthogonality, total_reward)


def state_of(*threads):
    return AllocState(tuple(tuple((i, 0.0) for i in th) for th in threads), 0.0)


def test_fit_reward_is_delayed():
    assert reward_fit(1, 5, 1.386) == 0.0
    assert reward_fit(5, 5, 1.386) == -1.386
    assert reward_fit(5, 5, 1.386, enabled=False) == 0.0
    with pytest.raises(ValueError):
        reward_fit(6, 5, 1.0)


def test_coherence_examples():
    table = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 3.0], [2.0, 4.0, 0.0]])
    s = state_of([0])
    assert abs(reward_coherence(s, 0, 3.5 * table[0], None, table) - 1.0) < 1e-15
    assert reward_coherence(s, 0, table[1], None, table) == 0.0
    user = np.array([0.0, 0.0, 1.0])
    assert reward_coherence(s, 1, table[1], user, table) == 1.0


def test_coherence_two_item_thread_oracle():
    rng = np.random.default_rng(0)
    table = rng.normal(size=(5, 6))
    e = rng.normal(size=6)
    k = (table[1] + table[3]) / 2
    expect = k @ e / (np.linalg.norm(k) * np.linalg.norm(e))
    assert abs(reward_coherence(state_of([1, 3]), 0, e, None, table) - expect) < 1e-12


def test_orthogonality_examples():
    table = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert reward_orthogonality(state_of([0]), 0, table[0], table) == 0.0
    # new thread along y, existing along x -> orthogonal
    assert reward_orthogonality(state_of([0]), 1, table[1], table) == 0.0
    # new thread antiparallel to the other one
    assert reward_orthogonality(state_of([0]), 1, table[2], table) == -1.0


def test_new_thread_schedule():
    assert reward_new_thread(3, 1, 2, -0.1, 0.5) == 0.0
    assert abs(reward_new_thread(3, 2, 2, -0.1, 0.5) - 0.2) < 1e-15
    assert abs(reward_new_thread(10, 2, 2, -0.1, 0.5) + 0.5) < 1e-15
    vals = [reward_new_thread(i, 1, 1, -0.2, 0.3) for i in range(1, 20)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_total_reward_examples():
    assert abs(total_reward((0, 1, 0, 0.2)) - 1.2) < 1e-15
    assert total_reward((3, 1, -1, 0.2), (False,) * 4) == 0.0
    assert total_reward((3, 1, -1, 0.2), (True, False, True, False)) == 2.0


def test_discounted_examples():
    assert discounted_returns([0, 0, 1], 0.5) == 0.25
    r = [0.3, -1.0, 2.5, 0.1]
    assert discounted_returns(r, 1.0) == pytest.approx(sum(r), abs=1e-15)
    with pytest.raises(ValueError):
        discounted_returns(r, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_discounted_closed_form(seed):
    rng = np.random.default_rng(seed)
    r = rng.normal(size=10)
    g = float(rng.uniform(0.1, 1.0))
    assert abs(discounted_returns(r, g) - float(np.dot(g ** np.arange(10), r))) < 1e-12


vectors = st.lists(st.floats(-5, 5, allow_subnormal=False), min_size=3, max_size=3).map(np.array)


@settings(max_examples=300, deadline=None)
@given(st.lists(vectors, min_size=4, max_size=4), st.floats(0.1, 10), st.integers(0, 2))
def test_reward_ranges_and_scale_invariance(vecs, c, action):
    table = np.array(vecs[:3])
    e, user = vecs[3], vecs[0] + 1.0
    s = state_of([0], [1, 2])
    r2 = reward_coherence(s, action, e, user, table)
    r3 = reward_orthogonality(s, action, e, table)
    assert -1 - 1e-12 <= r2 <= 1 + 1e-12
    k_after = s.k + (action == s.k)
    assert -(k_after - 1) - 1e-12 <= r3 <= 0
    assert math.isclose(reward_coherence(s, action, c * e, c * user, c * table), r2, abs_tol=1e-9)
    assert math.isclose(reward_orthogonality(s, action, c * e, c * table), r3, abs_tol=1e-9)


def test_zero_vector_cosine_is_zero():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


def test_step_rewards_forced_step_and_toggles():
    table = np.eye(3)
    cfg = RewardConfig(w1=-0.1, w2=0.5)
    fn = StepRewards(cfg, table, np.ones(3))
    assert fn(1, AllocState(), 0, 0) == (0.0, 0.0, 0.0, pytest.approx(0.4))
    r = fn(2, state_of([0]), 1, 1)
    assert r[0] == 0.0 and r[3] == pytest.approx(0.3)
    off = StepRewards(RewardConfig().disable("-r2", "-r3", "-r4"), table, np.ones(3))
    assert off(2, state_of([0]), 1, 1) == (0.0, 0.0, 0.0, 0.0)
    const = StepRewards(RewardConfig(constant_lambda=True, lam=0.25), table, np.ones(3))
    assert const(9, state_of([0]), 1, 1)[3] == 0.25


def test_disable_names():
    cfg = RewardConfig().disable("-r1", "orthogonality")
    assert cfg.toggles == (False, True, False, True)
    with pytest.raises(ValueError):
        RewardConfig(w1=0.1).validate()
