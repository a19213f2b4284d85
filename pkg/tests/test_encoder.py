import numpy as np
import pytest

import gradcheck
from splitrec import autodiff as ad
from splitrec.allocator import AllocState
from splitrec.encoder import EncoderError, ThreadEncoder, encode, encode_all, init_encoder, time_dim
from splitrec.params import ParamBank

D = 4


def make_bank(seed=0, n_items=6, zero=False):
    rng = np.random.default_rng(seed)
    bank = ParamBank()
    bank.add("item_emb", rng.normal(size=(n_items, D)), "embed")
    bank.add("user_emb", rng.normal(size=(2, D)), "embed")
    init_encoder(bank, "gx", "modeler", D, D, D, rng)
    for name in bank.names("modeler"):
        if zero:
            bank[name] = np.zeros_like(bank[name])
        elif name.endswith("b"):
            bank[name] = rng.normal(0, 0.3, bank[name].shape)
    return bank


def run(bank, items, times, user=0):
    t = ad.Tape(bank, grad=False)
    return encode(t, "gx", [t.embed("item_emb", i) for i in items], times, t.embed("user_emb", user)).value


def reference(bank, items, times, user=0):
    """Straight-line GRU over [e ; time_w * dt + time_b], mean of states."""
    p = {k: bank[f"gx.{k}"] for k in ("time_w", "time_b", "w", "u", "b", "user_w", "user_b")}
    sig = lambda v: 1 / (1 + np.exp(-v))
    h = bank["user_emb"][user] @ p["user_w"] + p["user_b"]
    states, prev = [], None
    for i, t in zip(items, times):
        dt = 0.0 if prev is None else t - prev
        prev = t
        x = np.concatenate([bank["item_emb"][i], p["time_w"] * dt + p["time_b"]])
        z = sig(x @ p["w"][:, :D] + p["b"][:D] + h @ p["u"][:, :D])
        r = sig(x @ p["w"][:, D:2 * D] + p["b"][D:2 * D] + h @ p["u"][:, D:2 * D])
        n = np.tanh(x @ p["w"][:, 2 * D:] + p["b"][2 * D:] + r * (h @ p["u"][:, 2 * D:]))
        h = (1 - z) * n + z * h
        states.append(h)
    return np.mean(states, axis=0)


def test_time_dim():
    assert [time_dim(d) for d in (2, 4, 16, 64, 256)] == [1, 1, 4, 8, 8]


def test_zero_weights_halve_initial_state():
    bank = make_bank(zero=True)
    bank["gx.user_b"] = np.array([1.0, -2.0, 0.5, 4.0])
    np.testing.assert_array_equal(run(bank, [3], [0.2]), 0.5 * bank["gx.user_b"])


def test_empty_subsequence_is_user_projection():
    bank = make_bank(1)
    h0 = bank["user_emb"][1] @ bank["gx.user_w"] + bank["gx.user_b"]
    np.testing.assert_allclose(run(bank, [], [], user=1), h0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_matches_unrolled_reference(seed):
    bank = make_bank(seed)
    items, times = [1, 4, 2], [0.1, 0.35, 0.8]
    np.testing.assert_allclose(run(bank, items, times), reference(bank, items, times), rtol=0, atol=1e-12)


def test_incremental_push_matches_batch_encode():
    bank = make_bank(2)
    t = ad.Tape(bank, grad=False)
    enc = ThreadEncoder(t, "gx", t.embed("user_emb", 0))
    for i, tt in [(0, 0.0), (5, 0.2), (3, 0.5)]:
        enc.push(t.embed("item_emb", i), tt)
    np.testing.assert_array_equal(enc.output().value, run(bank, [0, 5, 3], [0.0, 0.2, 0.5]))


def test_reversal_changes_output():
    bank = make_bank(3)
    a = run(bank, [1, 2, 3], [0.0, 0.5, 1.0])
    b = run(bank, [3, 2, 1], [0.0, 0.5, 1.0])
    assert not np.allclose(a, b)


def test_time_scaling_changes_output():
    bank = make_bank(4)
    a = run(bank, [1, 2, 3], [0.0, 0.2, 0.4])
    b = run(bank, [1, 2, 3], [0.0, 0.4, 0.8])
    assert not np.allclose(a, b)


def test_time_going_backwards_raises():
    bank = make_bank()
    with pytest.raises(EncoderError):
        run(bank, [1, 2], [0.5, 0.1])
    with pytest.raises(EncoderError):
        t = ad.Tape(bank)
        encode(t, "gx", [t.embed("item_emb", 1)], [0.1, 0.2], t.embed("user_emb", 0))


def test_encode_all_matches_per_thread_encode():
    bank = make_bank(5)
    state = AllocState((((1, 0.0), (2, 0.3)), ((4, 0.1),), ((0, 0.2), (5, 0.6), (3, 0.9))), 0.9)
    t = ad.Tape(bank, grad=False)
    got = encode_all(t, "gx", state, t.embed("user_emb", 0))
    assert len(got) == 3
    for node, sub in zip(got, state.subsequences):
        np.testing.assert_array_equal(node.value, run(bank, [i for i, _ in sub], [tt for _, tt in sub]))


def test_identical_subsequences_identical_embeddings():
    bank = make_bank(6)
    state = AllocState((((1, 0.0), (2, 0.3)), ((1, 0.0), (2, 0.3))), 0.3)
    t = ad.Tape(bank, grad=False)
    a, b = encode_all(t, "gx", state, t.embed("user_emb", 1))
    assert np.array_equal(a.value, b.value)


@pytest.mark.parametrize("seed", range(3))
def test_encoder_gradients(seed):
    bank = make_bank(seed)
    items, times = [1, 4, 2, 0], [0.0, 0.3, 0.35, 0.9]
    w = np.random.default_rng(seed).normal(size=D)

    def fn(t):
        x = encode(t, "gx", [t.embed("item_emb", i) for i in items], times, t.embed("user_emb", 0))
        return ad.dot(x, t.const(w))

    assert gradcheck.check(bank, fn) < 1e-4
