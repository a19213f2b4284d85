"""Synthetic interleaved-thread users with planted thread labels.

Each user owns a few latent threads. A thread is tied to one item cluster
(clusters are disjoint). Events arrive in bursts: after each event the user
either stays on the current thread (short gap) or switches to another of
their threads (long gap).
"""
import configparser
import io
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import DataError, Interaction, UserSequence, normalize_times


@dataclass
class SyntheticSpec:
    users: int = 200
    min_threads: int = 2
    max_threads: int = 3
    n_clusters: int = 6
    items_per_cluster: int = 30
    min_length: int = 10
    max_length: int = 16
    intra_gap: float = 3600.0
    inter_gap: float = 18000.0
    gap_dist: str = "exponential"  # exponential | constant
    switch_prob: float = 0.35
    item_order: str = "walk"  # walk | random
    seed: int = 0

    def validate(self):
        if self.users < 1:
            raise DataError("users must be positive")
        if not 1 <= self.min_threads <= self.max_threads:
            raise DataError("need 1 <= min_threads <= max_threads")
        if self.max_threads > self.n_clusters:
            raise DataError(f"{self.max_threads} threads need as many clusters, have {self.n_clusters}")
        if not 3 <= self.min_length <= self.max_length:
            raise DataError("need 3 <= min_length <= max_length")
        if self.max_length > self.items_per_cluster:
            # a single thread may take every event of a sequence
            raise DataError(f"sequences of {self.max_length} events cannot be drawn without "
                            f"replacement from clusters of {self.items_per_cluster} items")
        if self.gap_dist not in ("exponential", "constant"):
            raise DataError(f"unknown gap_dist {self.gap_dist!r}")
        if self.item_order not in ("walk", "random"):
            raise DataError(f"unknown item_order {self.item_order!r}")
        if self.intra_gap <= 0 or self.inter_gap <= 0:
            raise DataError("gaps must be positive")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise DataError("switch_prob must be in [0, 1]")

    def cluster_items(self, c):
        return [f"c{c}-i{j:03d}" for j in range(self.items_per_cluster)]

    def dumps(self):
        cp = configparser.ConfigParser()
        cp["synthetic"] = {k: str(v) for k, v in asdict(self).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text):
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if "synthetic" not in cp:
            raise DataError("missing [synthetic] section")
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in cp["synthetic"].items():
            if key not in types:
                raise DataError(f"unknown synthetic key {key!r}")
            kwargs[key] = types[key](value)
        return cls(**kwargs)


def _gap(rng, mean, dist):
    if dist == "constant":
        return max(1, int(round(mean)))
    return max(1, int(round(rng.exponential(mean))))


def generate_synthetic(spec):
    """Returns (sequences, labels) where labels[user] lists each event's cluster id."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    orders = [rng.permutation(spec.items_per_cluster) for _ in range(spec.n_clusters)]
    width = len(str(spec.users - 1))
    sequences, labels = [], {}
    for u in range(spec.users):
        user = f"u{u:0{width}d}"
        n_threads = int(rng.integers(spec.min_threads, spec.max_threads + 1))
        clusters = rng.choice(spec.n_clusters, size=n_threads, replace=False)
        length = int(rng.integers(spec.min_length, spec.max_length + 1))
        if spec.item_order == "walk":
            cursor = {int(c): int(rng.integers(spec.items_per_cluster)) for c in clusters}
        else:
            pools = {int(c): list(rng.permutation(spec.items_per_cluster)) for c in clusters}
        current = int(clusters[rng.integers(n_threads)])
        t = int(rng.integers(0, 10 ** 6))
        raw, items, thread_labels = [], [], []
        for i in range(length):
            if i > 0:
                if n_threads > 1 and rng.random() < spec.switch_prob:
                    others = [int(c) for c in clusters if int(c) != current]
                    current = others[rng.integers(len(others))]
                    t += _gap(rng, spec.inter_gap, spec.gap_dist)
                else:
                    t += _gap(rng, spec.intra_gap, spec.gap_dist)
            if spec.item_order == "walk":
                j = int(orders[current][cursor[current]])
                cursor[current] = (cursor[current] + 1) % spec.items_per_cluster
            else:
                j = int(pools[current].pop())
            items.append(f"c{current}-i{j:03d}")
            raw.append(t)
            thread_labels.append(current)
        sequences.append(UserSequence(user, list(zip(items, normalize_times(raw))), raw))
        labels[user] = thread_labels
    return sequences, labels


def sequences_to_interactions(sequences):
    return [Interaction(s.user, item, ts) for s in sequences for item, ts in zip(s.items, s.raw_times)]


def write_synthetic(sequences, labels, directory):
    """Write the raw interaction log and the (user, position, label) sidecar."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "interactions.tsv"), "w", encoding="utf-8") as fh:
        for seq in sequences:
            for item, ts in zip(seq.items, seq.raw_times):
                fh.write(f"{seq.user}\t{item}\t{ts}\n")
    with open(os.path.join(directory, "labels.tsv"), "w", encoding="utf-8") as fh:
        for seq in sequences:
            for pos, label in enumerate(labels[seq.user]):
                fh.write(f"{seq.user}\t{pos}\t{label}\n")


def read_labels(path):
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            user, pos, label = line.rstrip("\n").split("\t")
            seq = labels.setdefault(user, [])
            if int(pos) != len(seq):
                raise DataError(f"{path}: positions for {user} out of order")
            seq.append(int(label))
    return labels
