"""Training loops for the decomposed model and the single-sequence comparator.

Per batch, every sample first gets its own trajectory and an immediate policy
update of the allocator and embeddings; then the whole batch is replayed
under the updated weights and all parameters take one step on
alpha * policy loss + (1 - alpha) * modeler loss.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .allocator import Allocator
from .evaluation import SequenceScorer, SplitScorer, evaluate
from .model import baseline_forward, frozen_fit_loss, split_forward
from .objectives import EMABaseline, combined_loss, negative_sample, policy_loss
from .params import Adam
from .rewards import StepRewards, discounted_returns, reward_fit, total_reward

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.005
    alpha: float = 0.5
    n_neg: int = 4
    prefix_mode: str = "last"  # last | all | random
    ema_baseline: bool = True
    ema_decay: float = 0.9
    seed: int = 0
    eval_every: int = 0
    k: int = 5

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.n_neg < 1:
            raise ValueError("n_neg must be >= 1")
        if self.prefix_mode not in ("last", "all", "random"):
            raise ValueError(f"unknown prefix_mode {self.prefix_mode!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class Sample:
    user: int
    items: list
    times: list
    target: int
    t_target: float


def make_samples(dataset, prefix_mode="last", rng=None):
    """Training samples from the train partitions.

    ``last`` predicts the final training event from everything before it,
    ``all`` uses every prefix, ``random`` one uniformly drawn prefix per user
    (redrawn each epoch by the caller). A user whose training part has a
    single event yields no sample.
    """
    out = []
    for u, row in enumerate(dataset.rows):
        train = row.train
        if prefix_mode == "last":
            ends = [len(train) - 1]
        elif prefix_mode == "all":
            ends = range(1, len(train))
        else:
            ends = [int(rng.integers(1, len(train)))] if len(train) > 1 else []
        for j in ends:
            if j < 1:
                continue
            hist = train[:j]
            out.append(Sample(u, [i for i, _ in hist], [t for _, t in hist], train[j][0], train[j][1]))
    return out


def _negative_pools(dataset):
    pools = []
    for row in dataset.rows:
        mask = np.ones(dataset.n_items, dtype=bool)
        mask[[i for i, _ in row.train]] = False
        pools.append(np.flatnonzero(mask))
    return pools


@dataclass
class TrainResult:
    bank: object
    optimizer: object
    history: list = field(default_factory=list)
    n_trajectories: int = 0
    n_policy_updates: int = 0
    n_joint_updates: int = 0
    baseline: object = None


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _finite_or_raise(value, what, checkpoint_fn, epoch):
    if not np.isfinite(value):
        if checkpoint_fn is not None:
            checkpoint_fn(epoch)
        raise NumericalError(f"{what} diverged (value {value}) in epoch {epoch}")


def train_split(dataset, bank, agent, rewards, cfg, optimizer=None, start_epoch=0,
                baseline=None, log_fn=None, checkpoint_fn=None):
    """Train the decomposed model in place; returns a TrainResult."""
    cfg.validate()
    agent.validate()
    rewards.validate()
    optimizer = optimizer or Adam(cfg.lr)
    baseline = baseline or EMABaseline(cfg.ema_decay, cfg.ema_baseline)
    pools = _negative_pools(dataset)
    dtype = bank["item_emb"].dtype.type
    pi_names = set(bank.names("policy")) | set(bank.names("embed"))
    frozen = bank.snapshot("modeler")
    result = TrainResult(bank, optimizer, baseline=baseline)
    toggles = rewards.toggles

    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        samples = make_samples(dataset, cfg.prefix_mode, rng)
        stats = {"combined": 0.0, "policy": 0.0, "modeler": 0.0, "return": 0.0, "k": 0.0,
                 "r1": 0.0, "r2": 0.0, "r3": 0.0, "r4": 0.0}
        n_batches = 0
        for batch in _batches(len(samples), cfg.batch_size, rng):
            records = []
            for idx in batch:
                s = samples[idx]
                negs = negative_sample(None, cfg.n_neg, dataset.n_items, rng, candidates=pools[s.user])
                seed = int(rng.integers(2 ** 63))
                tape = ad.Tape(bank, dtype=dtype)
                u = tape.embed("user_emb", s.user)
                reward_fn = StepRewards(rewards, bank["item_emb"], bank["user_emb"][s.user])
                traj = Allocator(tape, agent, u).run(s.items, s.times, mode="sample",
                                                     rng=np.random.default_rng(seed),
                                                     reward_fn=reward_fn, seed=seed)
                result.n_trajectories += 1
                comps = traj.reward_matrix()
                T = len(traj.steps)
                if rewards.use_fit:
                    fit = frozen_fit_loss(bank, frozen, agent, s.user, traj, s.target, s.t_target, negs)
                    _finite_or_raise(fit, "fit reward", checkpoint_fn, epoch)
                    comps[T - 1, 0] = reward_fit(T, T, fit)
                per_step = [total_reward(c, toggles) for c in comps]
                ret = discounted_returns(per_step, rewards.gamma)
                b = baseline.current()
                if traj.logp_nodes:
                    loss = policy_loss(traj.logp_sum(tape), ret, b)
                    grads = tape.backward(loss)
                    optimizer.step(bank, {n: g for n, g in grads.items() if n in pi_names}, cfg.lr)
                    result.n_policy_updates += 1
                baseline.update(ret)
                records.append((s, negs, traj.actions, ret, b))
                stats["return"] += ret
                stats["k"] += traj.final.k
                for j in range(4):
                    stats[f"r{j + 1}"] += float(comps[:, j].sum())

            tape = ad.Tape(bank, dtype=dtype)
            terms, pls, mls = [], [], []
            for s, negs, actions, ret, b in records:
                g = split_forward(tape, agent, s.user, s.items, s.times, s.target, s.t_target, negs,
                                  forced=actions)
                pl = policy_loss(g.logp_sum, ret, b)
                terms.append(combined_loss(pl, g.modeler, cfg.alpha))
                pls.append(float(pl.value))
                mls.append(float(g.modeler.value))
            total = ad.average(terms) if len(terms) > 1 else terms[0]
            _finite_or_raise(float(total.value), "combined loss", checkpoint_fn, epoch)
            optimizer.step(bank, tape.backward(total), cfg.lr)
            result.n_joint_updates += 1
            frozen = bank.snapshot("modeler")
            stats["combined"] += float(total.value)
            stats["policy"] += float(np.mean(pls))
            stats["modeler"] += float(np.mean(mls))
            n_batches += 1

        n = max(1, len(samples))
        record = {
            "epoch": epoch,
            "combined_loss": stats["combined"] / max(1, n_batches),
            "policy_loss": stats["policy"] / max(1, n_batches),
            "modeler_loss": stats["modeler"] / max(1, n_batches),
            "mean_return": stats["return"] / n,
            "mean_k": stats["k"] / n,
            "r1": stats["r1"] / n,
            "r2": stats["r2"] / n,
            "r3": stats["r3"] / n,
            "r4": stats["r4"] / n,
            "valid_ndcg": None,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        if cfg.eval_every and epoch % cfg.eval_every == 0:
            record["valid_ndcg"] = evaluate(SplitScorer(bank, agent), dataset, "valid", cfg.k)["ndcg"]
        result.history.append(record)
        if log_fn is not None:
            log_fn(record)
        log.info("epoch %d combined %.4f modeler %.4f k %.2f", epoch, record["combined_loss"],
                 record["modeler_loss"], record["mean_k"])
    return result


def train_baseline(dataset, bank, cfg, optimizer=None, start_epoch=0, log_fn=None):
    """Single-sequence GRU comparator, trained on the same samples and schedule."""
    cfg.validate()
    optimizer = optimizer or Adam(cfg.lr)
    pools = _negative_pools(dataset)
    dtype = bank["item_emb"].dtype.type
    result = TrainResult(bank, optimizer)
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        samples = make_samples(dataset, cfg.prefix_mode, rng)
        losses = []
        for batch in _batches(len(samples), cfg.batch_size, rng):
            tape = ad.Tape(bank, dtype=dtype)
            terms = []
            for idx in batch:
                s = samples[idx]
                negs = negative_sample(None, cfg.n_neg, dataset.n_items, rng, candidates=pools[s.user])
                terms.append(baseline_forward(tape, s.user, s.items, s.times, s.target, negs))
            total = ad.average(terms) if len(terms) > 1 else terms[0]
            _finite_or_raise(float(total.value), "baseline loss", None, epoch)
            optimizer.step(bank, tape.backward(total), cfg.lr)
            result.n_joint_updates += 1
            losses.append(float(total.value))
        record = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else 0.0, "valid_ndcg": None,
                  "seconds": round(time.perf_counter() - t0, 3)}
        if cfg.eval_every and epoch % cfg.eval_every == 0:
            record["valid_ndcg"] = evaluate(SequenceScorer(bank), dataset, "valid", cfg.k)["ndcg"]
        result.history.append(record)
        if log_fn is not None:
            log_fn(record)
    return result
