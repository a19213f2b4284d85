"""splitrec command line: prepare, synth, train, evaluate, decompose, ablate.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
"""
import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .allocator import replay
from .config import ConfigError, RunConfig
from .data import DataError, build_sequences, leave_one_out, load_interactions, load_split, save_split
from .evaluation import SequenceScorer, SplitScorer, decomposition_nmi, evaluate, format_report
from .model import build_baseline_bank, build_split_bank
from .objectives import EMABaseline
from .params import Adam, load_bank, save_bank
from .synthetic import SyntheticSpec, generate_synthetic, read_labels, write_synthetic
from .training import NumericalError, train_baseline, train_split

log = logging.getLogger("splitrec")

CHECKPOINT = "checkpoint.bin"
ABLATIONS = ("-r1", "-r2", "-r3", "-r4", "-r4,c", "-tau")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def apply_ablation(cfg, name):
    """Switch a RunConfig to one of the ablated variants (``full`` is a no-op)."""
    if name == "full":
        return cfg
    if name == "-tau":
        cfg.agent.tau = "none"
    elif name == "-r4,c":
        cfg.rewards.constant_lambda = True
    elif name in ("-r1", "-r2", "-r3", "-r4"):
        cfg.rewards.disable(name)
    else:
        raise UsageError(f"unknown ablation {name!r}; choose from full, {', '.join(ABLATIONS)}")
    return cfg


def _text_tensor(text):
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def _checkpoint_path(path):
    return os.path.join(path, CHECKPOINT) if os.path.isdir(path) else path


def load_checkpoint(path, optimizer=None):
    """(bank, RunConfig, kind, epoch, baseline value or None)."""
    path = _checkpoint_path(path)
    if not os.path.isfile(path):
        raise DataError(f"no checkpoint at {path}")
    bank, extra = load_bank(path, optimizer)
    cfg = RunConfig.loads(bytes(extra["config"]).decode("utf-8"))
    kind = bytes(extra["kind"]).decode("utf-8")
    base = extra.get("baseline")
    base = float(base[0]) if base is not None and base.size else None
    return bank, cfg, kind, int(extra["epoch"]), base


def write_checkpoint(path, bank, optimizer, cfg, kind, epoch, baseline=None):
    extra = {"config": _text_tensor(cfg.dumps()), "kind": _text_tensor(kind),
             "epoch": np.array(epoch, dtype=np.int64),
             "baseline": np.array([] if baseline is None else [baseline], dtype=np.float64)}
    save_bank(path, bank, optimizer, extra)


def cmd_prepare(args):
    rows = load_interactions(args.input, delimiter=args.delimiter, header=args.header)
    if not rows:
        raise DataError(f"{args.input}: no interactions")
    seqs = build_sequences(rows, min_length=args.min_length)
    if not seqs:
        raise DataError(f"no user has at least {args.min_length} interactions")
    ds = leave_one_out(seqs)
    save_split(ds, args.output)
    st = ds.stats()
    print(f"{'#User':>8} {'#Item':>8} {'#Interaction':>13} {'Density':>8}")
    print(f"{st['users']:>8} {st['items']:>8} {st['interactions']:>13} {100 * st['density']:>7.2f}%")
    return 0


def cmd_synth(args):
    with open(args.spec, encoding="utf-8") as fh:
        spec = SyntheticSpec.loads(fh.read())
    if args.seed is not None:
        spec.seed = args.seed
    seqs, labels = generate_synthetic(spec)
    write_synthetic(seqs, labels, args.output)
    with open(os.path.join(args.output, "synthetic.ini"), "w", encoding="utf-8") as fh:
        fh.write(spec.dumps())
    if args.split:
        save_split(leave_one_out(seqs), os.path.join(args.output, "split"))
    print(f"wrote {len(seqs)} users to {args.output}")
    return 0


def _run_config(args):
    cfg = RunConfig.load(args.config, overrides=args.set or ())
    for name in args.ablate or ():
        apply_ablation(cfg, name)
    return cfg.validate()


def train_run(cfg, dataset, run_dir, kind="split", resume=False, echo=None):
    """Train into ``run_dir`` (checkpoint, config.ini, log.jsonl); returns the bank."""
    os.makedirs(run_dir, exist_ok=True)
    ckpt = os.path.join(run_dir, CHECKPOINT)
    optimizer = Adam(cfg.train.lr)
    start, base_value = 0, None
    if resume:
        bank, saved, kind, start, base_value = load_checkpoint(ckpt, optimizer)
        cfg.model, cfg.agent, cfg.rewards = saved.model, saved.agent, saved.rewards
    elif kind == "split":
        bank = build_split_bank(dataset.n_users, dataset.n_items, cfg.model, cfg.train.seed)
    else:
        bank = build_baseline_bank(dataset.n_users, dataset.n_items, cfg.model, cfg.train.seed)
    cfg.save(os.path.join(run_dir, "config.ini"))
    mode = "a" if resume else "w"
    baseline = EMABaseline(cfg.train.ema_decay, cfg.train.ema_baseline)
    baseline.value = base_value
    # state at the last epoch boundary, written out if training diverges
    good = {"epoch": start, "state": (bank.copy(), copy.deepcopy(optimizer), base_value)}
    with open(os.path.join(run_dir, "log.jsonl"), mode, encoding="utf-8") as logf:
        def log_fn(record):
            logf.write(json.dumps(record) + "\n")
            logf.flush()
            good["epoch"] = record["epoch"]
            good["state"] = (bank.copy(), copy.deepcopy(optimizer), baseline.value)
            if echo:
                echo(record)

        if kind == "split":
            def checkpoint_fn(epoch):
                b, opt, base = good["state"]
                write_checkpoint(ckpt, b, opt, cfg, kind, good["epoch"], base)

            res = train_split(dataset, bank, cfg.agent, cfg.rewards, cfg.train, optimizer=optimizer,
                              start_epoch=start, baseline=baseline, log_fn=log_fn,
                              checkpoint_fn=checkpoint_fn)
            write_checkpoint(ckpt, bank, optimizer, cfg, kind, start + cfg.train.epochs, res.baseline.value)
        else:
            train_baseline(dataset, bank, cfg.train, optimizer=optimizer, start_epoch=start, log_fn=log_fn)
            write_checkpoint(ckpt, bank, optimizer, cfg, kind, start + cfg.train.epochs)
    return bank


def cmd_train(args):
    cfg = _run_config(args)
    ds = load_split(args.dataset)
    if args.resume and not os.path.isfile(os.path.join(args.run, CHECKPOINT)):
        raise DataError(f"nothing to resume in {args.run}")
    echo = None if args.quiet else (lambda r: print(json.dumps(r), flush=True))
    train_run(cfg, ds, args.run, kind=args.model, resume=args.resume, echo=echo)
    return 0


def _scorer(bank, cfg, kind):
    return SplitScorer(bank, cfg.agent) if kind == "split" else SequenceScorer(bank)


def cmd_evaluate(args):
    bank, cfg, kind, _, _ = load_checkpoint(args.checkpoint)
    ds = load_split(args.dataset)
    rows = []
    for part in args.partition:
        rows.append((args.name or os.path.basename(os.path.normpath(args.dataset)), part,
                     evaluate(_scorer(bank, cfg, kind), ds, part, args.k)))
    print(format_report(rows, args.k))
    return 0


def decomposition_lines(bank, cfg, ds, user_ids):
    """Human-readable decomposition of full sequences; every dump is checked
    against a replay of its action string."""
    index = {u: i for i, u in enumerate(ds.users)}
    scorer = SplitScorer(bank, cfg.agent)
    lines = []
    for user in user_ids:
        if user not in index:
            raise DataError(f"unknown user {user!r}")
        row = ds.rows[index[user]]
        events = row.train + [row.valid, row.test]
        items, times = [i for i, _ in events], [t for _, t in events]
        traj, _, _ = scorer.decompose(index[user], items, times)
        if replay(traj.actions, items, times).subsequences != traj.final.subsequences:
            raise DataError(f"user {user}: decomposition does not replay")
        lines.append(f"user {user} actions {' '.join(str(a) for a in traj.actions)}")
        for b, sub in enumerate(traj.final.subsequences):
            body = ", ".join(f"{ds.items[i]}@{t:.3f}" for i, t in sub)
            lines.append(f"  thread {b}: {body}")
    return lines


def cmd_decompose(args):
    bank, cfg, kind, _, _ = load_checkpoint(args.checkpoint)
    if kind != "split":
        raise UsageError("decompose needs a split checkpoint")
    ds = load_split(args.dataset)
    users = args.user or ds.users[:args.limit]
    print("\n".join(decomposition_lines(bank, cfg, ds, users)))
    if args.labels:
        print(f"nmi {decomposition_nmi(bank, cfg.agent, ds, read_labels(args.labels)):.4f}")
    return 0


def cmd_ablate(args):
    ds = load_split(args.dataset)
    variants = [v.strip() for v in args.variants.split(";") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    labels = read_labels(args.labels) if args.labels else None
    rows = []
    for variant in variants:
        per_seed = []
        for seed in seeds:
            cfg = _run_config(args)
            cfg.train.seed = seed
            kind = "gru" if variant == "gru" else "split"
            if kind == "split":
                apply_ablation(cfg, variant)
            run_dir = os.path.join(args.output, variant.replace(",", "_"), f"seed{seed}")
            bank = train_run(cfg, ds, run_dir, kind=kind)
            m = evaluate(_scorer(bank, cfg, kind), ds, args.partition, cfg.train.k)
            if labels is not None and kind == "split":
                m["nmi"] = decomposition_nmi(bank, cfg.agent, ds, labels)
            per_seed.append(m)
        mean = {k: float(np.mean([m[k] for m in per_seed])) for k in per_seed[0] if k not in ("users", "k")}
        rows.append((variant, args.partition, mean))
    print(format_report(rows, _run_config(args).train.k))
    if labels is not None:
        for variant, _, m in rows:
            if "nmi" in m:
                print(f"{variant:<20} nmi {m['nmi']:.4f}")
    return 0


def build_parser():
    p = _Parser(prog="splitrec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="raw interaction log -> leave-one-out split")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--delimiter", default="\t")
    s.add_argument("--header", action="store_true")
    s.add_argument("--min-length", type=int, default=3)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    s.add_argument("spec", help="INI file with a [synthetic] section")
    s.add_argument("output")
    s.add_argument("--seed", type=int)
    s.add_argument("--split", action="store_true", help="also write the split under OUTPUT/split")
    s.set_defaults(func=cmd_synth)

    def run_opts(s):
        s.add_argument("--config", help="INI run configuration")
        s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="config override; --section.key=value is shorthand")
        s.add_argument("--ablate", action="append", choices=ABLATIONS, help="write as --ablate=-r4")

    s = sub.add_parser("train", help="train into a run directory")
    s.add_argument("dataset")
    s.add_argument("run")
    s.add_argument("--model", choices=("split", "gru"), default="split")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--quiet", action="store_true")
    run_opts(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="metrics report for a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--partition", nargs="+", choices=("valid", "test"), default=["test"])
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--name")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("decompose", help="print argmax sub-sequences per user")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--user", action="append")
    s.add_argument("--limit", type=int, default=5)
    s.add_argument("--labels", help="planted labels file; prints NMI")
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("ablate", help="train and evaluate a grid of variants")
    s.add_argument("dataset")
    s.add_argument("output")
    s.add_argument("--variants", default="full;-tau;gru",
                   help="';'-separated: full, gru, " + ", ".join(ABLATIONS))
    s.add_argument("--seeds", default="0")
    s.add_argument("--partition", choices=("valid", "test"), default="test")
    s.add_argument("--labels")
    run_opts(s)
    s.set_defaults(func=cmd_ablate)
    return p


def expand_config_flags(argv):
    """Rewrite ``--section.key=value`` and ``--section.key value`` into
    ``--set section.key=value``."""
    out, it = [], iter(argv)
    for tok in it:
        name = tok[2:].split("=", 1)[0] if tok.startswith("--") else ""
        if name.split(".", 1)[0] in RunConfig.SECTIONS and "." in name:
            value = tok.split("=", 1)[1] if "=" in tok else next(it, None)
            if value is None:
                raise UsageError(f"{tok} needs a value")
            out += ["--set", f"{name}={value}"]
        else:
            out.append(tok)
    return out


def main(argv=None):
    parser = build_parser()
    try:
        argv = expand_config_flags(sys.argv[1:] if argv is None else list(argv))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            threadpool_limits(args.threads)
        return args.func(args)
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
