"""Allocator rewards: data fit, coherence, orthogonality, new-thread curriculum.

All functions here work on plain numpy values; rewards never carry gradient.
"""
from dataclasses import dataclass

import numpy as np

COMPONENTS = ("fit", "coherence", "orthogonality", "new_thread")


@dataclass
class RewardConfig:
    gamma: float = 0.95
    w1: float = -0.1
    w2: float = 0.3
    use_fit: bool = True
    use_coherence: bool = True
    use_orthogonality: bool = True
    use_new_thread: bool = True
    # fixed lambda instead of the step schedule (the "-r4, c" variant)
    constant_lambda: bool = False
    lam: float = 0.1

    def validate(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.w1 >= 0 and not self.constant_lambda:
            raise ValueError("w1 must be negative")

    @property
    def toggles(self):
        return (self.use_fit, self.use_coherence, self.use_orthogonality, self.use_new_thread)

    def disable(self, *names):
        """Turn off components by ablation name: r1..r4 or component name."""
        for name in names:
            key = name.lstrip("-")
            idx = int(key[1]) - 1 if key in ("r1", "r2", "r3", "r4") else COMPONENTS.index(key)
            setattr(self, f"use_{COMPONENTS[idx]}", False)
        return self


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def reward_fit(i, T, loss, enabled=True):
    """Delayed data-fit reward: -loss at the last step, 0 before."""
    if not 1 <= i <= T:
        raise ValueError(f"step {i} outside [1, {T}]")
    if not enabled or i < T:
        return 0.0
    return -float(loss)


def thread_means(state, item_table):
    return [item_table[[item for item, _ in sub]].mean(axis=0) for sub in state.subsequences]


def reward_coherence(state, action, item_vec, user_vec, item_table):
    """Cosine between the item and the mean embedding of the chosen thread;
    against the user embedding when a new thread is opened."""
    k = state.k
    if not 0 <= action <= k:
        raise ValueError(f"action {action} outside [0, {k}]")
    if action == k:
        return cosine(user_vec, item_vec)
    sub = state.subsequences[action]
    return cosine(item_table[[i for i, _ in sub]].mean(axis=0), item_vec)


def reward_orthogonality(state, action, item_vec, item_table):
    """Minus the summed |cosine| between the updated thread and every other thread."""
    k = state.k
    if not 0 <= action <= k:
        raise ValueError(f"action {action} outside [0, {k}]")
    means = thread_means(state, item_table)
    if action == k:
        updated = item_vec
    else:
        n = len(state.subsequences[action])
        updated = (item_vec + n * means[action]) / (n + 1)
    return -sum(abs(cosine(updated, means[j])) for j in range(k) if j != action)


def new_thread_bonus(i, w1, w2):
    return w1 * i + w2


def reward_new_thread(i, action, k, w1, w2):
    if not 0 <= action <= k:
        raise ValueError(f"action {action} outside [0, {k}]")
    return new_thread_bonus(i, w1, w2) if action == k else 0.0


def total_reward(components, toggles=(True, True, True, True)):
    return float(sum(c for c, on in zip(components, toggles) if on))


def discounted_returns(rewards, gamma):
    """R = sum_i gamma^(i-1) r_i over a whole trajectory."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total


class StepRewards:
    """Per-step reward callback for the allocator (components 2-4).

    The data-fit component needs the finished decomposition, so the trainer
    fills it in after the trajectory ends.
    """

    def __init__(self, cfg, item_table, user_vec):
        self.cfg = cfg
        self.item_table = item_table
        self.user_vec = user_vec

    def __call__(self, i, state, action, item):
        cfg = self.cfg
        e = self.item_table[item]
        k = state.k
        if k == 0:
            # forced first step: only the new-thread bookkeeping applies
            r2 = r3 = 0.0
        else:
            r2 = reward_coherence(state, action, e, self.user_vec, self.item_table) if cfg.use_coherence else 0.0
            r3 = reward_orthogonality(state, action, e, self.item_table) if cfg.use_orthogonality else 0.0
        r4 = 0.0
        if cfg.use_new_thread and action == k:
            r4 = cfg.lam if cfg.constant_lambda else reward_new_thread(i, action, k, cfg.w1, cfg.w2)
        return (0.0, r2, r3, r4)
