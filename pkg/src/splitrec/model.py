"""Parameter layout and per-sample forward passes for the decomposed model
and the single-sequence GRU comparator."""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .allocator import Allocator, coherence_scores, init_agent, policy_logits
from .encoder import ThreadEncoder, encode, init_encoder
from .objectives import modeler_loss, single_sequence_loss
from .params import Overlay, ParamBank


@dataclass
class ModelConfig:
    dim: int = 16
    init_scale: float = 0.1
    dtype: str = "float64"  # float64 | float32

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type


def _embeddings(bank, n_users, n_items, d, scale, rng):
    bank.add("user_emb", rng.normal(0, scale, (n_users, d)), "embed")
    bank.add("item_emb", rng.normal(0, scale, (n_items, d)), "embed")


def build_split_bank(n_users, n_items, cfg, seed):
    rng = np.random.default_rng(seed)
    bank = ParamBank()
    d = cfg.dim
    _embeddings(bank, n_users, n_items, d, cfg.init_scale, rng)
    init_encoder(bank, "gs", "policy", d, d, d, rng)
    init_agent(bank, d, rng)
    init_encoder(bank, "gx", "modeler", d, d, d, rng)
    return bank.astype(cfg.np_dtype)


def build_baseline_bank(n_users, n_items, cfg, seed):
    rng = np.random.default_rng(seed)
    bank = ParamBank()
    _embeddings(bank, n_users, n_items, cfg.dim, cfg.init_scale, rng)
    init_encoder(bank, "gx", "modeler", cfg.dim, cfg.dim, cfg.dim, rng)
    return bank.astype(cfg.np_dtype)


def allocation_probs(tape, contexts, item, t, last_times, agent):
    """Candidate-dependent allocation distribution over [threads..., new]."""
    scores = coherence_scores(tape, contexts, item, t, last_times, agent)
    return ad.softmax(policy_logits(tape, scores, agent.epsilon), agent.zeta)


@dataclass
class SampleGraph:
    trajectory: object
    logp_sum: object
    modeler: object
    probs: object


def split_forward(tape, agent, user, items, times, target, t_target, negs,
                  mode="sample", rng=None, forced=None, reward_fn=None, seed=None):
    """Allocate the history, then build the modeler loss for the target.

    Returns a SampleGraph whose nodes live on ``tape``.
    """
    u = tape.embed("user_emb", user)
    traj = Allocator(tape, agent, u).run(items, times, mode=mode, rng=rng, forced=forced,
                                        reward_fn=reward_fn, seed=seed)
    return SampleGraph(traj, traj.logp_sum(tape),
                       *modeler_graph(tape, agent, u, traj, target, t_target, negs))


def modeler_graph(tape, agent, u, traj, target, t_target, negs, contexts=None):
    """(loss node, allocation probs node) for a finished decomposition.

    ``contexts`` overrides the allocator-side thread embeddings (used when
    those come from another tape).
    """
    state = traj.final
    if contexts is None:
        contexts = [enc.output() for enc in traj.contexts]
    e_pos = tape.embed("item_emb", target)
    probs = allocation_probs(tape, contexts, e_pos, t_target, state.last_times(), agent)
    encodings = []
    for sub in state.subsequences:
        enc = ThreadEncoder(tape, "gx", u)
        for item, t in sub:
            enc.push(tape.embed("item_emb", item), t)
        encodings.append(enc.output())
    e_neg = tape.embed("item_emb", np.asarray(negs))
    return modeler_loss(probs, encodings, u, e_pos, e_neg), probs


def frozen_fit_loss(bank, frozen_gx, agent, user, traj, target, t_target, negs):
    """Modeler loss of a sampled decomposition with the modeler weights taken
    from ``frozen_gx`` (the snapshot from the previous batch)."""
    tape = ad.Tape(Overlay(bank, frozen_gx), grad=False, dtype=bank["item_emb"].dtype.type)
    contexts = [tape.const(enc.output().value) for enc in traj.contexts]
    u = tape.embed("user_emb", user)
    loss, _ = modeler_graph(tape, agent, u, traj, target, t_target, negs, contexts=contexts)
    return float(loss.value)


def baseline_forward(tape, user, items, times, target, negs):
    u = tape.embed("user_emb", user)
    x = encode(tape, "gx", [tape.embed("item_emb", i) for i in items], times, u)
    return single_sequence_loss(x, tape.embed("item_emb", target), tape.embed("item_emb", np.asarray(negs)))

