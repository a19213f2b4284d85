"""Item allocator: the sequential decision process that splits a behaviour
sequence into sub-sequences.

Actions are 0-based: ``a < k`` appends the current item to sub-sequence
``a``; ``a == k`` opens a new sub-sequence with it.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import ThreadEncoder


class AllocationError(ValueError):
    pass


@dataclass
class AgentConfig:
    tau: str = "exponential"  # exponential | linear | none
    kappa1: float = 1.0
    kappa2: float = 1.0
    kappa3: float = 1.0
    epsilon: float = 0.5
    zeta: float = 1.0

    def validate(self):
        if self.tau not in ("exponential", "linear", "none"):
            raise ValueError(f"unknown tau kind {self.tau!r}")
        if self.kappa1 <= 0 or self.kappa3 <= 0:
            raise ValueError("kappa1 and kappa3 must be positive")
        if self.zeta <= 0:
            raise ValueError("zeta must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")


@dataclass(frozen=True)
class AllocState:
    subsequences: tuple = ()  # tuple of tuples of (item, time)
    clock: float = 0.0

    @property
    def k(self):
        return len(self.subsequences)

    @property
    def n_items(self):
        return sum(len(s) for s in self.subsequences)

    def last_times(self):
        return [s[-1][1] for s in self.subsequences]


def tau(dt, cfg):
    """Temporal decay of a coherence score for a gap ``dt`` >= 0."""
    if cfg.tau == "exponential":
        return math.exp(-cfg.kappa3 * dt)
    if cfg.tau == "linear":
        # clamped so the score never goes negative
        return max(0.0, -cfg.kappa1 * dt + cfg.kappa2)
    return 1.0


def init_agent(bank, d, rng):
    h = max(1, d // 2)
    bank.add("agent.w1_ctx", rng.normal(0, np.sqrt(2.0 / (2 * d)), (d, d)), "policy")
    bank.add("agent.w1_item", rng.normal(0, np.sqrt(2.0 / (2 * d)), (d, d)), "policy")
    bank.add("agent.b1", np.zeros(d), "policy")
    bank.add("agent.w2", rng.normal(0, np.sqrt(2.0 / d), (d, h)), "policy")
    bank.add("agent.b2", np.zeros(h), "policy")
    bank.add("agent.w3", rng.normal(0, np.sqrt(1.0 / h), h), "policy")
    bank.add("agent.b3", np.zeros(()), "policy")


def semantic_scores(tape, contexts, item):
    """sigmoid(MLP([c_b ; e])) for every context row, as a (k,) node.

    The first layer's weight is split into a context block and an item block,
    which equals one layer over the concatenation.
    """
    p = tape.param
    return ad.mlp_scores(ad.stack(contexts), item, p("agent.w1_ctx"), p("agent.w1_item"), p("agent.b1"),
                         p("agent.w2"), p("agent.b2"), p("agent.w3"), p("agent.b3"))


def coherence_scores(tape, contexts, item, t, last_times, cfg):
    """cs_b = semantic(c_b, e) * tau(t - t_b) for each existing sub-sequence."""
    if not contexts:
        raise AllocationError("coherence_scores needs at least one sub-sequence")
    decay = []
    for tb in last_times:
        if t < tb:
            raise AllocationError(f"time must advance: item at {t}, sub-sequence ends at {tb}")
        decay.append(tau(t - tb, cfg))
    sem = semantic_scores(tape, contexts, item)
    if cfg.tau == "none":
        return sem
    return ad.mul(sem, tape.const(np.array(decay, dtype=tape.dtype)))


def epsilon_softmax(scores, epsilon, zeta=1.0):
    """Softmax over [cs_1..cs_k, epsilon] / zeta (numpy)."""
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    logits = np.append(np.asarray(scores, dtype=np.float64), epsilon)
    return ad.np_softmax(logits / zeta)


def policy_logits(tape, scores, epsilon):
    return ad.concat([scores, tape.const(epsilon)])


def choose(logits, mode, rng, zeta):
    """Argmax takes the lowest index on ties, so 'new' wins only when every
    score is strictly below epsilon."""
    if mode == "argmax":
        return int(np.argmax(logits))
    return int(rng.choice(len(logits), p=ad.np_softmax(logits / zeta)))


def transition(state, action, item, t):
    k = state.k
    if not 0 <= action <= k:
        raise AllocationError(f"action {action} outside [0, {k}]")
    subs = list(state.subsequences)
    if action == k:
        subs.append(((item, t),))
    else:
        if subs[action] and subs[action][-1][1] > t:
            raise AllocationError("time must not decrease within a sub-sequence")
        subs[action] = subs[action] + ((item, t),)
    return AllocState(tuple(subs), t)


def replay(actions, items, times):
    state = AllocState()
    for a, item, t in zip(actions, items, times):
        state = transition(state, a, item, t)
    return state


@dataclass
class Step:
    state: AllocState
    action: int
    logp: float
    rewards: tuple = (0.0, 0.0, 0.0, 0.0)


@dataclass
class Trajectory:
    steps: list
    final: AllocState
    seed: object = None
    logp_nodes: list = field(default_factory=list, repr=False)
    contexts: list = field(default_factory=list, repr=False)

    @property
    def actions(self):
        return [s.action for s in self.steps]

    def reward_matrix(self):
        return np.array([s.rewards for s in self.steps], dtype=np.float64).reshape(len(self.steps), 4)

    def logp_sum(self, tape):
        """Sum of log-probabilities of the sampled actions, forced step excluded."""
        if not self.logp_nodes:
            return tape.const(0.0)
        total = self.logp_nodes[0]
        for node in self.logp_nodes[1:]:
            total = ad.add(total, node)
        return total


class Allocator:
    """Runs the allocation process for one user on a tape.

    ``forced`` replays given actions instead of choosing (used to rebuild
    log-probabilities of a recorded trajectory under new parameters).
    """

    def __init__(self, tape, cfg, user, item_table="item_emb", prefix="gs"):
        self.tape = tape
        self.cfg = cfg
        self.user = user
        self.item_table = item_table
        self.prefix = prefix

    def run(self, items, times, mode="sample", rng=None, forced=None, reward_fn=None, seed=None):
        if len(items) != len(times):
            raise AllocationError("items and times differ in length")
        tape, cfg = self.tape, self.cfg
        state = AllocState(clock=times[0] if times else 0.0)
        encoders = []
        steps, logps = [], []
        for i, (item, t) in enumerate(zip(items, times)):
            state = AllocState(state.subsequences, t)
            e = tape.embed(self.item_table, item)
            k = state.k
            if k == 0:
                action, logp = 0, 0.0
            else:
                ctx = [enc.output() for enc in encoders]
                scores = coherence_scores(tape, ctx, e, t, state.last_times(), cfg)
                logits = policy_logits(tape, scores, cfg.epsilon)
                if forced is not None:
                    action = int(forced[i])
                    if not 0 <= action <= k:
                        raise AllocationError(f"forced action {action} outside [0, {k}]")
                else:
                    action = choose(logits.value, mode, rng, cfg.zeta)
                node = ad.index(ad.log_softmax(logits, cfg.zeta), action)
                logps.append(node)
                logp = float(node.value)
            rewards = reward_fn(i + 1, state, action, item) if reward_fn else (0.0, 0.0, 0.0, 0.0)
            steps.append(Step(state, action, logp, rewards))
            if action == k:
                encoders.append(ThreadEncoder(tape, self.prefix, self.user))
            encoders[action].push(e, t)
            state = transition(state, action, item, t)
        traj = Trajectory(steps, state, seed, logps)
        traj.contexts = encoders
        return traj


def sample_trajectory(tape, cfg, user, items, times, mode="sample", seed=None, reward_fn=None):
    """Allocate every item of a sequence; reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    return Allocator(tape, cfg, user).run(items, times, mode=mode, rng=rng,
                                          reward_fn=reward_fn, seed=seed)
