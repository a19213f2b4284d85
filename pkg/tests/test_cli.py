import json

import numpy as np
import pytest

from splitrec.cli import expand_config_flags, load_checkpoint, main
from splitrec.data import load_split

SYNTH = "[synthetic]\nusers = 12\nn_clusters = 4\nitem_order = random\ngap_dist = constant\n"
FAST = ["--model.dim=6", "--set", "train.batch_size=4", "--quiet"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = root / "spec.ini"
    spec.write_text(SYNTH)
    assert main(["synth", str(spec), str(root / "data"), "--seed", "1", "--split"]) == 0
    return root / "data"


def log_records(run):
    return [json.loads(line) for line in (run / "log.jsonl").read_text().splitlines()]


def test_synth_writes_dataset(synth_dir):
    for name in ("interactions.tsv", "labels.tsv", "synthetic.ini", "split"):
        assert (synth_dir / name).exists()
    assert len(load_split(synth_dir / "split").rows) == 12


def test_prepare_is_reproducible(synth_dir, tmp_path, capsys):
    src = synth_dir / "interactions.tsv"
    assert main(["prepare", str(src), str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "#User" in out and "Density" in out
    assert main(["prepare", str(src), str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_prepare_empty_input_is_data_error(tmp_path):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    assert main(["prepare", str(empty), str(tmp_path / "out")]) == 2
    assert main(["prepare", str(tmp_path / "missing.tsv"), str(tmp_path / "out")]) == 2


def test_config_flag_shorthand():
    assert expand_config_flags(["train", "d", "r", "--train.lr=0.5", "--model.dim", "8", "--quiet"]) == [
        "train", "d", "r", "--set", "train.lr=0.5", "--set", "model.dim=8", "--quiet"]
    assert main(["train", "d", "r", "--train.lr"]) == 1


def test_usage_errors_exit_one(synth_dir, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 1
    assert main(["train", str(synth_dir / "split"), str(tmp_path / "r"), "--set", "train.bogus=1"]) == 1


def test_train_checkpoint_and_evaluate(synth_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", str(synth_dir / "split"), str(run), "--set", "train.epochs=2", *FAST]) == 0
    assert [r["epoch"] for r in log_records(run)] == [1, 2]
    bank, cfg, kind, epoch, base = load_checkpoint(str(run))
    assert (kind, epoch, cfg.model.dim) == ("split", 2, 6)
    assert base is not None
    again, *_ = load_checkpoint(str(run / "checkpoint.bin"))
    for name in bank.names():
        assert np.array_equal(bank[name], again[name]) and bank[name].dtype == again[name].dtype
    capsys.readouterr()
    assert main(["evaluate", str(run), str(synth_dir / "split"), "--partition", "valid", "test"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and lines[2].split()[1] == "valid"
    assert main(["evaluate", str(tmp_path / "nowhere"), str(synth_dir / "split")]) != 0


def test_ablated_reward_column_is_zero(synth_dir, tmp_path):
    run = tmp_path / "abl"
    assert main(["train", str(synth_dir / "split"), str(run), "--set", "train.epochs=2", "--ablate=-r4", *FAST]) == 0
    recs = log_records(run)
    assert all(r["r4"] == 0.0 for r in recs)
    assert any(r["r2"] != 0.0 for r in recs)


def test_resume_matches_continuous_run(synth_dir, tmp_path):
    data = str(synth_dir / "split")
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", data, str(full), "--set", "train.epochs=2", *FAST]) == 0
    assert main(["train", data, str(part), "--set", "train.epochs=1", *FAST]) == 0
    assert main(["train", data, str(part), "--resume", "--set", "train.epochs=1", *FAST]) == 0
    assert [r["epoch"] for r in log_records(part)] == [1, 2]
    a, *_, ea, ba = load_checkpoint(str(full))
    b, *_, eb, bb = load_checkpoint(str(part))
    assert ea == eb == 2 and ba == bb
    for name in a.names():
        assert np.array_equal(a[name], b[name]), name
    strip = lambda r: {k: v for k, v in r.items() if k != "seconds"}
    assert [strip(r) for r in log_records(full)] == [strip(r) for r in log_records(part)]
    assert main(["train", data, str(tmp_path / "fresh"), "--resume", *FAST]) == 2


def test_gru_train_and_evaluate(synth_dir, tmp_path):
    run = tmp_path / "gru"
    assert main(["train", str(synth_dir / "split"), str(run), "--model", "gru", "--set", "train.epochs=1",
                 *FAST]) == 0
    assert load_checkpoint(str(run))[2] == "gru"
    assert main(["evaluate", str(run), str(synth_dir / "split")]) == 0
    assert main(["decompose", str(run), str(synth_dir / "split")]) == 1


def test_decompose_output(synth_dir, tmp_path, capsys):
    run = tmp_path / "dec"
    assert main(["train", str(synth_dir / "split"), str(run), "--set", "train.epochs=1", *FAST]) == 0
    capsys.readouterr()
    assert main(["decompose", str(run), str(synth_dir / "split"), "--limit", "3",
                 "--labels", str(synth_dir / "labels.tsv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert sum(line.startswith("user ") for line in out) == 3
    for line in out:
        if line.startswith("  thread"):
            for entry in line.split(": ", 1)[1].split(", "):
                t = float(entry.rsplit("@", 1)[1])
                assert 0.0 <= t <= 1.0
    assert out[-1].startswith("nmi ") and 0.0 <= float(out[-1].split()[1]) <= 1.0
    assert main(["decompose", str(run), str(synth_dir / "split"), "--user", "nobody"]) == 2


def test_ablate_grid(synth_dir, tmp_path, capsys):
    assert main(["ablate", str(synth_dir / "split"), str(tmp_path / "grid"), "--variants", "full;-tau;gru",
                 "--seeds", "0", "--set", "train.epochs=1", "--set", "model.dim=6"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in out[2:5]] == ["full", "-tau", "gru"]


def test_divergence_keeps_last_epoch_boundary(synth_dir, tmp_path, monkeypatch):
    from splitrec import cli
    from splitrec.config import RunConfig
    from splitrec.training import NumericalError, train_split

    def diverging(dataset, bank, agent, rewards, cfg, **kw):
        one = type(cfg)(**{**cfg.__dict__, "epochs": 1})
        train_split(dataset, bank, agent, rewards, one, **{k: v for k, v in kw.items() if k != "checkpoint_fn"})
        bank["gx.w"] = bank["gx.w"] * np.nan
        kw["checkpoint_fn"](2)
        raise NumericalError("combined loss diverged")

    ds = load_split(synth_dir / "split")
    cfg = RunConfig.load(overrides=["model.dim=6", "train.epochs=1"])
    clean = cli.train_run(cfg, ds, str(tmp_path / "clean"))
    monkeypatch.setattr(cli, "train_split", diverging)
    cfg = RunConfig.load(overrides=["model.dim=6", "train.epochs=3"])
    with pytest.raises(NumericalError):
        cli.train_run(cfg, ds, str(tmp_path / "bad"))
    bank, _, _, epoch, _ = load_checkpoint(str(tmp_path / "bad"))
    assert epoch == 1
    for name in bank.names():
        assert np.array_equal(bank[name], clean[name]), name


def test_numerical_failure_exits_three(synth_dir, tmp_path, monkeypatch):
    from splitrec import cli
    from splitrec.training import NumericalError

    def boom(*args, **kw):
        raise NumericalError("diverged")

    monkeypatch.setattr(cli, "train_split", boom)
    assert main(["train", str(synth_dir / "split"), str(tmp_path / "r"), *FAST]) == 3
