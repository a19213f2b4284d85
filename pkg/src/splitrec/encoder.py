"""Time-aware GRU sequence encoders.

The allocator's encoder and the sub-sequence modeler share this code under
different parameter prefixes (``gs`` and ``gx``) and never share weights.
Each step consumes ``[item embedding ; time projection(dt)]``; the hidden
state starts from a projection of the user embedding and the output is the
mean of the hidden states produced by the items (the initial state is left
out of the mean).
"""
import numpy as np

from . import autodiff as ad


class EncoderError(ValueError):
    pass


def time_dim(d):
    return max(1, min(8, d // 4))


def init_encoder(bank, prefix, group, d_item, d, d_user, rng):
    d_t = time_dim(d)
    n_in = d_item + d_t
    s = 1.0 / np.sqrt(d)
    bank.add(f"{prefix}.time_w", rng.uniform(-1.0, 1.0, d_t), group)
    bank.add(f"{prefix}.time_b", np.zeros(d_t), group)
    bank.add(f"{prefix}.w", rng.uniform(-s, s, (n_in, 3 * d)), group)
    bank.add(f"{prefix}.u", rng.uniform(-s, s, (d, 3 * d)), group)
    bank.add(f"{prefix}.b", np.zeros(3 * d), group)
    bank.add(f"{prefix}.user_w", rng.uniform(-s, s, (d_user, d)), group)
    bank.add(f"{prefix}.user_b", np.zeros(d), group)


class ThreadEncoder:
    """Incremental encoder for one growing sub-sequence.

    ``push`` appends an item; ``output`` is the pooled embedding so far. The
    result after pushing items one by one is the same as encoding the full
    list at once, but each item is processed only once.
    """

    __slots__ = ("tape", "prefix", "h0", "h", "total", "count", "last_time", "_out")

    def __init__(self, tape, prefix, user):
        self.tape = tape
        self.prefix = prefix
        p = tape.param
        self.h0 = ad.add(ad.matmul(user, p(f"{prefix}.user_w")), p(f"{prefix}.user_b"))
        self.h = self.h0
        self.total = None
        self.count = 0
        self.last_time = None
        self._out = None

    def push(self, item, t):
        p = self.tape.param
        prefix = self.prefix
        if self.last_time is None:
            dt = 0.0
        else:
            dt = t - self.last_time
            if dt < 0:
                raise EncoderError(f"time went backwards: {self.last_time} -> {t}")
        x = ad.time_input(item, dt, p(f"{prefix}.time_w"), p(f"{prefix}.time_b"))
        self.h = ad.gru_cell(x, self.h, p(f"{prefix}.w"), p(f"{prefix}.u"), p(f"{prefix}.b"))
        self.total = self.h if self.total is None else ad.add(self.total, self.h)
        self.count += 1
        self.last_time = t
        self._out = None
        return self

    def output(self):
        if self.count == 0:
            return self.h0
        if self._out is None:
            self._out = self.total if self.count == 1 else ad.scale(self.total, 1.0 / self.count)
        return self._out


def encode(tape, prefix, items, times, user):
    """Pooled embedding of one sub-sequence.

    ``items`` are embedding nodes, ``times`` their normalized timestamps.
    """
    if len(items) != len(times):
        raise EncoderError("items and times differ in length")
    enc = ThreadEncoder(tape, prefix, user)
    for item, t in zip(items, times):
        enc.push(item, t)
    return enc.output()


def encode_all(tape, prefix, state, user, item_table="item_emb"):
    """One embedding per sub-sequence of an allocation state, in order."""
    out = []
    for sub in state.subsequences:
        items = [tape.embed(item_table, i) for i, _ in sub]
        out.append(encode(tape, prefix, items, [t for _, t in sub], user))
    return out
