import itertools
import os
import random

import pytest
from hypothesis import given, settings, strategies as st

from onionbox.errors import ReplayError, SizeError, UnwrapError
from onionbox.onion import (LAYER_OVERHEAD, LayerFlag, OnionLayer, derive_session_key,
                            max_layered_plaintext, onion_wrap, seal_backward, unwrap_backward, unwrap_layer,
                            wrap_backward)


def make_keys(n, seed=None):
    rng = random.Random(seed)
    return [derive_session_key(rng.randbytes(64), rng.randbytes(96))[0] for _ in range(n)]


def receivers(keys):
    return [k.fresh_copy() for k in keys]


def peel(ciphertext, hop_keys):
    """Reference relay pipeline: each hop removes exactly one layer in order."""
    body = ciphertext
    for i, key in enumerate(hop_keys):
        layer = unwrap_layer(body, key)
        if i < len(hop_keys) - 1:
            assert layer.flag is LayerFlag.FORWARD
            body = layer.body
    return layer


def test_zero_hops_is_identity():
    assert onion_wrap(b"plain", []) == b"plain"


def test_single_layer_round_trip():
    (k,) = make_keys(1, seed=1)
    relay = k.fresh_copy()
    assert unwrap_layer(onion_wrap(b"m", [k]), relay) == OnionLayer(LayerFlag.DELIVER, b"m")


def test_three_layer_orderings_exhaustive():
    keys = make_keys(3, seed=2)
    ct = onion_wrap(b"secret", [k.fresh_copy() for k in keys])
    outcomes = {}
    for perm in itertools.permutations(range(3)):
        rx = [keys[i].fresh_copy() for i in perm]
        try:
            layer = peel(ct, rx)
            outcomes[perm] = layer
        except UnwrapError:
            outcomes[perm] = None
    assert outcomes.pop((0, 1, 2)) == OnionLayer(LayerFlag.DELIVER, b"secret")
    assert all(v is None for v in outcomes.values())


def test_wrong_first_key_fails():
    keys = make_keys(3, seed=3)
    ct = onion_wrap(b"m", receivers(keys))
    for wrong in keys[1:]:
        with pytest.raises(UnwrapError):
            unwrap_layer(ct, wrong.fresh_copy())


def test_wrong_key_unrelated():
    (k,) = make_keys(1, seed=4)
    (other,) = make_keys(1, seed=5)
    with pytest.raises(UnwrapError):
        unwrap_layer(onion_wrap(b"m", [k]), other)


def test_replay_with_same_counter_rejected():
    (k,) = make_keys(1, seed=6)
    relay = k.fresh_copy()
    ct = onion_wrap(b"m", [k])
    unwrap_layer(ct, relay, counter=0)
    with pytest.raises(ReplayError):
        unwrap_layer(ct, relay, counter=0)
    # without an explicit counter the stale nonce simply does not authenticate
    with pytest.raises(UnwrapError):
        unwrap_layer(ct, relay)


def test_failed_unwrap_does_not_advance_counter():
    (k,) = make_keys(1, seed=7)
    relay = k.fresh_copy()
    ct = bytearray(onion_wrap(b"m", [k]))
    ct[0] ^= 1
    with pytest.raises(UnwrapError):
        unwrap_layer(bytes(ct), relay)
    assert relay.forward_counter == 0


def test_three_layers_1000_random_messages():
    rng = random.Random(8)
    keys = make_keys(3, seed=8)
    sender, relays = receivers(keys), receivers(keys)
    limit = max_layered_plaintext(3)
    for _ in range(1000):
        m = rng.randbytes(rng.randint(0, limit))
        assert peel(onion_wrap(m, sender), relays) == OnionLayer(LayerFlag.DELIVER, m)
    assert [k.forward_counter for k in relays] == [1000] * 3


def test_size_limit_enforced_per_hop_count():
    for n in range(1, 6):
        keys = make_keys(n, seed=n)
        limit = max_layered_plaintext(n)
        assert limit == 505 - n * LAYER_OVERHEAD
        assert len(onion_wrap(bytes(limit), receivers(keys))) == 505
        with pytest.raises(SizeError):
            onion_wrap(bytes(limit + 1), receivers(keys))


def test_size_error_consumes_no_counters():
    keys = make_keys(2, seed=9)
    with pytest.raises(SizeError):
        onion_wrap(bytes(600), keys)
    assert [k.forward_counter for k in keys] == [0, 0]


@settings(max_examples=60, deadline=None)
@given(n=st.integers(0, 5), data=st.data())
def test_round_trip_property(n, data):
    keys = make_keys(n)
    limit = max_layered_plaintext(n)
    m = data.draw(st.binary(max_size=limit))
    ct = onion_wrap(m, receivers(keys))
    if n == 0:
        assert ct == m
    else:
        assert peel(ct, receivers(keys)) == OnionLayer(LayerFlag.DELIVER, m)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_order_sensitivity_first_out_of_order_hop(n):
    keys = make_keys(n, seed=10 + n)
    ct = onion_wrap(b"x" * 10, receivers(keys))
    for perm in itertools.permutations(range(n)):
        if perm == tuple(range(n)):
            continue
        first_bad = next(i for i, p in enumerate(perm) if p != i)
        body = ct
        for step, idx in enumerate(perm):
            rx = keys[idx].fresh_copy()
            if step < first_bad:
                body = unwrap_layer(body, rx).body
            else:
                with pytest.raises(UnwrapError):
                    unwrap_layer(body, rx)
                break


# -- backward path -----------------------------------------------------------

def test_reply_from_exit_needs_one_unwrap_per_hop():
    keys = make_keys(3, seed=20)
    ct = wrap_backward(b"reply", receivers(keys), from_hop=3)
    client = receivers(keys)
    assert unwrap_backward(ct, client) == (3, b"reply")
    assert [k.backward_counter for k in client] == [1, 1, 1]


def test_reply_from_middle_stops_early():
    keys = make_keys(3, seed=21)
    ct = wrap_backward(b"ext", receivers(keys), from_hop=2)
    client = receivers(keys)
    assert unwrap_backward(ct, client) == (2, b"ext")
    assert [k.backward_counter for k in client] == [1, 1, 0]


def test_reply_with_reversed_hop_order_fails():
    keys = make_keys(3, seed=22)
    ct = wrap_backward(b"reply", receivers(keys), from_hop=3)
    for perm in itertools.permutations(range(3)):
        client = [keys[i].fresh_copy() for i in perm]
        if perm == (0, 1, 2):
            assert unwrap_backward(ct, client) == (3, b"reply")
        else:
            with pytest.raises(UnwrapError):
                unwrap_backward(ct, client)


def test_reply_pipeline_exit_then_relays_add_layers():
    keys = make_keys(3, seed=23)
    exit_, middle, entry = (k.fresh_copy() for k in reversed(keys))
    rng = random.Random(23)
    client = receivers(keys)
    for _ in range(200):
        m = rng.randbytes(rng.randint(0, 400))
        body = seal_backward(m, exit_, deliver=True)
        body = seal_backward(body, middle, deliver=False)
        body = seal_backward(body, entry, deliver=False)
        assert unwrap_backward(body, client) == (3, m)


def test_forward_only_layers_raise():
    keys = make_keys(2, seed=24)
    body = seal_backward(b"x", keys[1].fresh_copy(), deliver=False)
    body = seal_backward(body, keys[0].fresh_copy(), deliver=False)
    with pytest.raises(UnwrapError):
        unwrap_backward(body, receivers(keys))


# -- key schedule ------------------------------------------------------------

def test_derivation_is_deterministic():
    secret, transcript = os.urandom(64), os.urandom(96)
    a, tag_a = derive_session_key(secret, transcript)
    b, tag_b = derive_session_key(secret, transcript)
    assert a.same_keys(b) and tag_a == tag_b


def test_single_bit_flip_changes_tag():
    rng = random.Random(30)
    secret, transcript = rng.randbytes(64), rng.randbytes(96)
    _, tag = derive_session_key(secret, transcript)
    for _ in range(100):
        bit = rng.randrange(len(transcript) * 8)
        flipped = bytearray(transcript)
        flipped[bit // 8] ^= 1 << (bit % 8)
        assert derive_session_key(secret, bytes(flipped))[1] != tag


def test_forward_and_backward_keys_differ():
    rng = random.Random(31)
    for _ in range(1000):
        key, _ = derive_session_key(rng.randbytes(64), b"t")
        assert key.forward_key != key.backward_key
        assert len(key.forward_key) == len(key.backward_key) == 32


def test_no_nonce_reuse_within_a_circuit():
    keys = make_keys(3, seed=32)
    sender = receivers(keys)
    seen = set()
    for hop in range(1, 4):
        for _ in range(50):
            before = [(id(k), k.forward_counter) for k in sender[:hop]]
            onion_wrap(b"m", sender[:hop])
            for pair in before:
                assert pair not in seen
                seen.add(pair)
