"""Losses: sampled BCE, the allocation-weighted modeler loss, the REINFORCE
policy term and their combination; plus negative sampling."""
import logging

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)


def negative_sample(interacted, n_neg, n_items, rng, candidates=None):
    """Draw ``n_neg`` items uniformly without replacement from the items the
    user never interacted with. Falls back to sampling with replacement (and a
    warning) when there are not enough of them."""
    if candidates is None:
        mask = np.ones(n_items, dtype=bool)
        mask[list(interacted)] = False
        candidates = np.flatnonzero(mask)
    if len(candidates) == 0:
        raise ValueError("user has interacted with every item")
    if len(candidates) < n_neg:
        log.warning("only %d negative candidates for %d draws; sampling with replacement",
                    len(candidates), n_neg)
        return rng.choice(candidates, size=n_neg, replace=True)
    return rng.choice(candidates, size=n_neg, replace=False)


def l_ce(x, pos, negs):
    """log sigma(x.pos) + sum_k log(1 - sigma(x.neg_k)); higher is better.

    ``x`` and ``pos`` are (d,) nodes, ``negs`` is an (n, d) node.
    """
    return ad.add(ad.log_sigmoid(ad.dot(x, pos)),
                  ad.total(ad.log_sigmoid(ad.scale(ad.matmul(negs, x), -1.0))))


def l_ce_rows(xs, pos, negs):
    """l_ce for every row of ``xs`` (m, d) at once, as an (m,) node."""
    tape = xs.tape
    n = negs.value.shape[0]
    neg_part = ad.matmul(ad.log_sigmoid(ad.scale(ad.matmul(xs, ad.transpose(negs)), -1.0)),
                         tape.const(np.ones(n, dtype=tape.dtype)))
    return ad.add(ad.log_sigmoid(ad.matmul(xs, pos)), neg_part)


def modeler_loss(probs, encodings, user, pos, negs):
    """-sum_b pi_b * l_ce(x_b, pos) with x_{K+1} = user embedding."""
    xs = ad.stack(list(encodings) + [user])
    return ad.scale(ad.dot(probs, l_ce_rows(xs, pos, negs)), -1.0)


def policy_loss(logp_sum, ret, baseline=0.0):
    """-(R - b) * sum_i log pi(a_i); minimizing it ascends the REINFORCE objective."""
    return ad.scale(logp_sum, -(ret - baseline))


def combined_loss(policy, modeler, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return ad.add(ad.scale(policy, alpha), ad.scale(modeler, 1.0 - alpha))


def single_sequence_loss(x, pos, negs):
    """Undecomposed BCE loss of one pooled history representation."""
    return ad.scale(l_ce(x, pos, negs), -1.0)


class EMABaseline:
    """Exponential moving average of returns; starts at the first return."""

    def __init__(self, decay=0.9, enabled=True):
        self.decay = decay
        self.enabled = enabled
        self.value = None

    def current(self):
        if not self.enabled or self.value is None:
            return 0.0
        return self.value

    def update(self, ret):
        if not self.enabled:
            return
        if self.value is None:
            self.value = float(ret)
        else:
            self.value = self.decay * self.value + (1 - self.decay) * float(ret)
