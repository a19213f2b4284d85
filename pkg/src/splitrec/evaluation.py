"""Serving-time candidate scoring and top-k ranking metrics."""
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .allocator import Allocator, tau
from .encoder import ThreadEncoder, encode

METRICS = ("precision", "recall", "ndcg", "mrr")


@dataclass
class RankResult:
    user: str
    ranked: list
    position: object  # 1-based rank of the ground truth within the list, or None
    k: int


def rank(scores, candidates, k):
    """Top-k candidates by descending score; ties go to the smaller item index."""
    scores = np.asarray(scores)
    candidates = np.asarray(candidates)
    order = np.lexsort((candidates, -scores))
    return candidates[order[:k]].tolist()


def metrics_at_k(ranked, truth, k=5):
    if k < 1:
        raise ValueError("k must be >= 1")
    top = list(ranked)[:k]
    if truth not in top:
        return 0.0, 0.0, 0.0, 0.0
    r = top.index(truth) + 1
    return 1.0 / k, 1.0, 1.0 / math.log2(r + 1), 1.0 / r


def rank_result(user, scores, candidates, truth, k=5):
    ranked = rank(scores, candidates, k)
    pos = ranked.index(truth) + 1 if truth in ranked else None
    return RankResult(user, ranked, pos, k)


class SplitScorer:
    """Pools per-thread modeler scores with candidate-dependent allocation
    probabilities. The history is split once by the greedy (argmax) policy."""

    def __init__(self, bank, agent):
        self.bank = bank
        self.agent = agent

    def decompose(self, user, items, times):
        tape = ad.Tape(self.bank, grad=False, dtype=self.bank["item_emb"].dtype.type)
        u = tape.embed("user_emb", user)
        return Allocator(tape, self.agent, u).run(items, times, mode="argmax"), tape, u

    def thread_views(self, user, items, times):
        """(allocator contexts C, modeler encodings X, last times, user vector)."""
        traj, tape, u = self.decompose(user, items, times)
        ctx = np.stack([enc.output().value for enc in traj.contexts])
        xs = []
        for sub in traj.final.subsequences:
            enc = ThreadEncoder(tape, "gx", u)
            for item, t in sub:
                enc.push(tape.embed("item_emb", item), t)
            xs.append(enc.output().value)
        return ctx, np.stack(xs), traj.final.last_times(), u.value

    def allocation(self, ctx, last_times, cand_emb, t):
        """(n_candidates, K+1) allocation probabilities."""
        b = self.bank
        agent = self.agent
        h1 = (ctx @ b["agent.w1_ctx"])[None, :, :] + (cand_emb @ b["agent.w1_item"] + b["agent.b1"])[:, None, :]
        h1 = np.maximum(h1, 0.0)
        h2 = np.maximum(h1 @ b["agent.w2"] + b["agent.b2"], 0.0)
        sem = ad.np_sigmoid(h2 @ b["agent.w3"] + b["agent.b3"])
        decay = np.array([tau(t - tb, agent) for tb in last_times])
        cs = sem * decay if agent.tau != "none" else sem
        logits = np.concatenate([cs, np.full((cs.shape[0], 1), agent.epsilon)], axis=1) / agent.zeta
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def score(self, user, items, times, t_target, candidates):
        ctx, xs, last_times, u = self.thread_views(user, items, times)
        emb = self.bank["item_emb"][np.asarray(candidates)]
        probs = self.allocation(ctx, last_times, emb, t_target)
        per_thread = ad.np_sigmoid(emb @ np.vstack([xs, u]).T)
        return np.sum(probs * per_thread, axis=1)


class SequenceScorer:
    """sigma(x . e_v) with x the pooled GRU state of the whole history."""

    def __init__(self, bank):
        self.bank = bank

    def score(self, user, items, times, t_target, candidates):
        tape = ad.Tape(self.bank, grad=False, dtype=self.bank["item_emb"].dtype.type)
        u = tape.embed("user_emb", user)
        x = encode(tape, "gx", [tape.embed("item_emb", i) for i in items], times, u).value
        return ad.np_sigmoid(self.bank["item_emb"][np.asarray(candidates)] @ x)


class RandomScorer:
    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def score(self, user, items, times, t_target, candidates):
        return self.rng.random(len(candidates))


def candidate_set(row, n_items):
    mask = np.ones(n_items, dtype=bool)
    mask[[i for i, _ in row.train]] = False
    return np.flatnonzero(mask)


def evaluate(scorer, dataset, partition="test", k=5, with_results=False):
    """Average P/R/NDCG/MRR@k over users, ranking every item the user has not
    trained on. Returns fractions plus ``*_pct`` percentages."""
    totals = np.zeros(4)
    results = []
    for u, row in enumerate(dataset.rows):
        history, (target, t_target) = row.history(partition)
        candidates = candidate_set(row, dataset.n_items)
        scores = scorer.score(u, [i for i, _ in history], [t for _, t in history], t_target, candidates)
        res = rank_result(row.user, scores, candidates, target, k)
        results.append(res)
        totals += metrics_at_k(res.ranked, target, k)
    n = max(1, len(dataset.rows))
    out = {name: totals[j] / n for j, name in enumerate(METRICS)}
    out.update({f"{name}_pct": 100.0 * out[name] for name in METRICS})
    out["users"] = len(dataset.rows)
    out["k"] = k
    if with_results:
        return out, results
    return out


def format_report(rows, k=5):
    """Table of percentages, one line per (dataset, partition, metrics) row."""
    header = f"{'dataset':<20} {'partition':<9} {'P@' + str(k):>8} {'R@' + str(k):>8} {'NDCG@' + str(k):>8} {'MRR@' + str(k):>8}"
    lines = [header, "-" * len(header)]
    for name, partition, m in rows:
        lines.append(f"{name:<20} {partition:<9} {m['precision_pct']:8.2f} {m['recall_pct']:8.2f} "
                     f"{m['ndcg_pct']:8.2f} {m['mrr_pct']:8.2f}")
    return "\n".join(lines)


def decomposition_nmi(bank, agent, dataset, labels):
    """Mean per-user NMI between argmax thread ids and planted labels, over
    each user's full sequence. A new thread's index equals the action that
    opened it, so the action string doubles as the thread labelling."""
    import warnings

    from sklearn.metrics import normalized_mutual_info_score

    scorer = SplitScorer(bank, agent)
    vals = []
    for u, row in enumerate(dataset.rows):
        events = row.train + [row.valid, row.test]
        traj, _, _ = scorer.decompose(u, [i for i, _ in events], [t for _, t in events])
        with warnings.catch_warnings():
            # sklearn warns when most labels are distinct; harmless here
            warnings.simplefilter("ignore", UserWarning)
            vals.append(normalized_mutual_info_score(labels[row.user], traj.actions))
    return float(np.mean(vals))
