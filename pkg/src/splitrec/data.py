"""Interaction logs, chronological user sequences and the leave-one-out split."""
import csv
import logging
import os
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

MALFORMED_LIMIT = 0.01


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass
class UserSequence:
    user: str
    events: list  # [(item, normalized time)]
    raw_times: list

    @property
    def items(self):
        return [item for item, _ in self.events]

    @property
    def times(self):
        return [t for _, t in self.events]

    def __len__(self):
        return len(self.events)


@dataclass
class UserSplit:
    """One user's partitions, with items as vocabulary indices."""

    user: str
    train: list  # [(item index, normalized time)]
    valid: tuple
    test: tuple
    raw_times: list = field(default_factory=list)

    def history(self, partition):
        """Events visible before the target of ``partition``, and the target."""
        if partition == "valid":
            return self.train, self.valid
        if partition == "test":
            return self.train + [self.valid], self.test
        raise ValueError(f"unknown partition {partition!r}")


@dataclass
class SplitDataset:
    items: list  # index -> raw item id
    users: list  # index -> raw user id
    rows: list  # [UserSplit], aligned with ``users``

    @property
    def item_index(self):
        return {item: i for i, item in enumerate(self.items)}

    @property
    def user_index(self):
        return {user: i for i, user in enumerate(self.users)}

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_users(self):
        return len(self.users)

    def n_interactions(self):
        return sum(len(r.train) + 2 for r in self.rows)

    def stats(self):
        n = self.n_interactions()
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": n,
            "density": n / (self.n_users * self.n_items) if self.rows else 0.0,
        }


def load_interactions(path, delimiter="\t", header=False, columns=(0, 1, 2)):
    """Read (user, item, timestamp) rows from delimited text.

    Malformed rows are skipped and counted; more than 1% malformed is fatal.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    out, bad, total = [], [], 0
    ucol, icol, tcol = columns
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        if header:
            next(reader, None)
        for lineno, row in enumerate(reader, start=2 if header else 1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            total += 1
            try:
                ts = int(row[tcol].strip())
                user, item = row[ucol].strip(), row[icol].strip()
                if not user or not item:
                    raise ValueError("empty id")
                out.append(Interaction(user, item, ts))
            except (IndexError, ValueError):
                bad.append((lineno, row))
    if bad:
        log.warning("%s: %d of %d rows malformed", path, len(bad), total)
        if len(bad) > MALFORMED_LIMIT * total:
            samples = "; ".join(f"line {n}: {delimiter.join(r)!r}" for n, r in bad[:5])
            raise DataError(f"{path}: {len(bad)}/{total} malformed rows (e.g. {samples})")
    load_interactions.last_malformed = len(bad)
    return out


load_interactions.last_malformed = 0


def normalize_times(raw):
    lo, hi = raw[0], raw[-1]
    if hi == lo:
        return [0.0] * len(raw)
    span = float(hi - lo)
    return [(t - lo) / span for t in raw]


def build_sequences(interactions, min_length=3):
    """Group by user, order by time (stable), drop short users, normalize time.

    Users come out sorted by id so the result does not depend on row order.
    """
    if min_length < 3:
        raise ValueError("min_length must be at least 3")
    per_user = {}
    for inter in interactions:
        per_user.setdefault(inter.user, []).append(inter)
    out = []
    for user in sorted(per_user):
        # ties broken by item id, then input order
        events = sorted(per_user[user], key=lambda x: (x.timestamp, x.item))
        if len(events) < min_length:
            continue
        raw = [e.timestamp for e in events]
        out.append(UserSequence(user, list(zip([e.item for e in events], normalize_times(raw))), raw))
    if not out:
        raise DataError(f"no user has at least {min_length} interactions")
    return out


def leave_one_out(sequences):
    items = sorted({item for seq in sequences for item in seq.items})
    index = {item: i for i, item in enumerate(items)}
    rows = []
    for seq in sequences:
        if len(seq) < 3:
            raise DataError(f"user {seq.user} has {len(seq)} events, need 3")
        enc = [(index[item], t) for item, t in seq.events]
        rows.append(UserSplit(seq.user, enc[:-2], enc[-2], enc[-1], list(seq.raw_times)))
    return SplitDataset(items, [s.user for s in sequences], rows)


def reconstruct(row):
    return row.train + [row.valid, row.test]


def save_split(dataset, directory):
    """Write train/valid/test files plus item and user vocabularies.

    Partition files hold ``user, item, timestamp, normalized time`` rows with
    raw ids; ``items.tsv`` / ``users.tsv`` map ids to contiguous indices.
    """
    os.makedirs(directory, exist_ok=True)
    files = {name: open(os.path.join(directory, f"{name}.tsv"), "w", newline="", encoding="utf-8")
             for name in ("train", "valid", "test")}
    try:
        writers = {k: csv.writer(f, delimiter="\t", lineterminator="\n") for k, f in files.items()}
        for row in dataset.rows:
            events = reconstruct(row)
            raws = row.raw_times or [0] * len(events)
            parts = ["train"] * len(row.train) + ["valid", "test"]
            for part, (item, t), raw in zip(parts, events, raws):
                writers[part].writerow([row.user, dataset.items[item], raw, repr(float(t))])
    finally:
        for f in files.values():
            f.close()
    with open(os.path.join(directory, "items.tsv"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{item}\t{i}\n" for i, item in enumerate(dataset.items))
    with open(os.path.join(directory, "users.tsv"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{user}\t{i}\n" for i, user in enumerate(dataset.users))


def _read_vocab(path):
    vocab = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            key, idx = line.rstrip("\n").split("\t")
            if int(idx) != len(vocab):
                raise DataError(f"{path}: non-contiguous index {idx}")
            vocab.append(key)
    return vocab


def load_split(directory):
    try:
        items = _read_vocab(os.path.join(directory, "items.tsv"))
        users = _read_vocab(os.path.join(directory, "users.tsv"))
    except OSError as exc:
        raise DataError(f"cannot read dataset in {directory}: {exc}") from exc
    index = {item: i for i, item in enumerate(items)}
    parts = {u: {"train": [], "valid": [], "test": []} for u in users}
    for name in ("train", "valid", "test"):
        with open(os.path.join(directory, f"{name}.tsv"), newline="", encoding="utf-8") as fh:
            for user, item, raw, t in csv.reader(fh, delimiter="\t"):
                parts[user][name].append((index[item], float(t), int(raw)))
    rows = []
    for user in users:
        p = parts[user]
        if len(p["valid"]) != 1 or len(p["test"]) != 1:
            raise DataError(f"user {user}: expected one valid and one test event")
        events = p["train"] + p["valid"] + p["test"]
        rows.append(UserSplit(user, [(i, t) for i, t, _ in p["train"]], p["valid"][0][:2],
                              p["test"][0][:2], [r for _, _, r in events]))
    return SplitDataset(items, users, rows)
