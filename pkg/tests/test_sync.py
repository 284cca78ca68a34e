import hashlib
import hmac
import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from mpd.dialects import DialectSpec
from mpd.errors import ConfigError, EmptyKey, InvalidDepth, LastDialect
from mpd.harness import REGRESSION_KEY
from mpd.protocols import FTP_TABLE
from mpd.sync import (DialectTable, SyncState, cache_update, init_state, keyed_hash,
                      keyed_hash_digest, load_key, map_index, next_index, parse_key, s_max,
                      table_add, table_remove)

# Frozen with openssl, composing H((K'^opad) || H(K'^ipad) || M) by hand.
VECTORS = [
    (b"k", b"MPD-INIT", "md5", "087c75b55c83d382913471086ad347d6"),
    (b"k", b"", "md5", "cd32bedd46aa63cffa3023f050fc78e3"),
    (b"k", b"MPD-INIT", "sha256", "be0bd027e6286b4f527db40cc413f9d7ebac695db8ac868b2048feb55645b252"),
    (REGRESSION_KEY, b"MPD-INIT", "md5", "8fca79ca23b0a7877f091801b660c788"),
]


@pytest.mark.parametrize("key, msg, algo, hexdigest", VECTORS)
def test_keyed_hash_vectors(key, msg, algo, hexdigest):
    assert keyed_hash_digest(key, msg, algo).hex() == hexdigest
    assert keyed_hash(key, msg, algo) == int(hexdigest, 16)


def test_keyed_hash_is_not_rfc2104():
    standard = hmac.new(b"k", b"MPD-INIT", "md5").hexdigest()
    assert standard == "c1de3c76905cca8c850372b88c487538"
    assert keyed_hash_digest(b"k", b"MPD-INIT").hex() != standard


def test_long_keys_are_hashed_first():
    long_key = bytes(range(100))
    assert keyed_hash(long_key, b"m") == keyed_hash(hashlib.md5(long_key).digest(), b"m")


def test_empty_key():
    with pytest.raises(EmptyKey):
        keyed_hash(b"", b"m")
    with pytest.raises(EmptyKey):
        init_state(b"")


def test_s_max():
    assert s_max("md5") == 2**128 - 1
    assert s_max("sha256") == 2**256 - 1


def test_appended_zero_changes_value():
    rng = random.Random(11)
    for _ in range(10_000):
        k = rng.randbytes(rng.randrange(1, 40))
        m = rng.randbytes(rng.randrange(0, 40))
        assert keyed_hash(k, m) != keyed_hash(k, m + b"\0")


def test_key_bit_flip_changes_value():
    rng = random.Random(12)
    changed = 0
    for _ in range(10_000):
        k = bytearray(rng.randbytes(16))
        m = rng.randbytes(16)
        before = keyed_hash(bytes(k), m)
        k[rng.randrange(16)] ^= 1 << rng.randrange(8)
        changed += keyed_hash(bytes(k), m) != before
    assert changed >= 9_900


@pytest.mark.parametrize("s, n_max, smax, n", [
    (15, 4, 15, 4),
    (7, 4, 15, 2),
    (0, 4, 15, 1),
    (0, 1, 2**128 - 1, 1),
    (2**128 - 1, 8, 2**128 - 1, 8),
])
def test_map_index_vectors(s, n_max, smax, n):
    assert map_index(s, n_max, smax) == n


@pytest.mark.parametrize("smax", [15, 255])
def test_map_index_exhaustive(smax):
    for n_max in range(1, 17):
        seen = {map_index(s, n_max, smax) for s in range(smax + 1)}
        assert seen <= set(range(1, n_max + 1))
        # arcs are contiguous from index 1; a tiny keyspace may not reach the last one
        assert seen == set(range(1, max(seen) + 1))


def test_map_index_rejects_bad_input():
    with pytest.raises(ValueError):
        map_index(1, 0, 15)
    with pytest.raises(ValueError):
        map_index(16, 4, 15)


@given(st.integers(0, 2**128 - 1), st.integers(1, 1000))
def test_map_index_range_md5(s, n_max):
    assert 1 <= map_index(s, n_max, 2**128 - 1) <= n_max


def test_map_index_near_uniform():
    rng = random.Random(5)
    smax = 2**128 - 1
    counts = Counter(map_index(rng.getrandbits(128), 8, smax) for _ in range(100_000))
    for n in range(1, 9):
        assert abs(counts[n] / 12_500 - 1) <= 0.05


def test_init_and_fifo():
    st1 = init_state(b"k", 1)
    assert st1.snapshot() == (b"MPD-INIT",)
    st3 = init_state(b"k", 3, b"P0")
    assert st3.snapshot() == (b"P0", b"P0", b"P0")
    st2 = init_state(b"k", 2)
    cache_update(st2, b"A")
    cache_update(st2, b"B")
    cache_update(st2, b"C")
    assert st2.snapshot() == (b"B", b"C")
    assert st2.cached == b"BC"
    with pytest.raises(InvalidDepth):
        init_state(b"k", 0)
    with pytest.raises(InvalidDepth):
        SyncState(b"k", 2, [b"only-one"])


def test_next_index_is_pure_and_tracks_updates():
    a, b = init_state(REGRESSION_KEY), init_state(REGRESSION_KEY)
    first = next_index(a, FTP_TABLE)
    assert first == next_index(a, FTP_TABLE) == next_index(b, FTP_TABLE)
    assert a.snapshot() == (b"MPD-INIT",)
    expected = map_index(keyed_hash(REGRESSION_KEY, b"MPD-INIT"), 8, s_max())
    assert first == (expected, FTP_TABLE[expected])
    a.update(b"x")
    assert next_index(a, FTP_TABLE)[0] == map_index(keyed_hash(REGRESSION_KEY, b"x"), 8, s_max())


def test_single_entry_table():
    table = DialectTable((DialectSpec.identity(),))
    state = init_state(b"k")
    for i in range(20):
        assert next_index(state, table)[0] == 1
        state.update(bytes([i]))


@settings(max_examples=50)
@given(st.integers(1, 4), st.lists(st.binary(max_size=8), max_size=6),
       st.lists(st.binary(max_size=8), max_size=6), st.lists(st.binary(max_size=8), min_size=4, max_size=8))
def test_self_synchronization(h, past_a, past_b, common):
    a, b = init_state(b"key", h), init_state(b"key", h)
    for p in past_a:
        a.update(p)
    for p in past_b:
        b.update(p)
    for p in common[:h]:
        a.update(p)
        b.update(p)
    if len(common) >= h:
        assert a.snapshot() == b.snapshot()
        assert next_index(a, FTP_TABLE) == next_index(b, FTP_TABLE)


def test_depth_concatenates_oldest_first():
    state = init_state(b"k", 2, b"P")
    state.update(b"A")
    assert state.pseudo_random() == keyed_hash(b"k", b"PA")


def test_table_add_remove():
    base = DialectTable(tuple(DialectSpec.shuffle(0, 1, o) for o in (1, 2, 3, 4)))
    grown = table_add(base, DialectSpec.shuffle(0, 1, 5))
    assert grown.n_max == 5 and grown.entries[:4] == base.entries
    assert table_remove(grown) == base
    with pytest.raises(LastDialect):
        table_remove(DialectTable((DialectSpec.identity(),)))
    with pytest.raises(IndexError):
        base[5]
    with pytest.raises(ConfigError):
        DialectTable(())
    with pytest.raises(ConfigError):
        DialectTable((DialectSpec.shuffle(0, 2, 1),))


def test_table_file_round_trip(tmp_path):
    path = tmp_path / "t.tbl"
    FTP_TABLE.save(path)
    assert DialectTable.load(path) == FTP_TABLE
    text = "# comment\n\nshuffle 1 1 3  # trailing\nsplit 1 2 2\nidentity\n"
    assert DialectTable.loads(text).entries == (
        DialectSpec.shuffle(1, 1, 3), DialectSpec.split(1, 2, 2), DialectSpec.identity())
    with pytest.raises(ConfigError, match="line 2"):
        DialectTable.loads("identity\nshuffle x\n")


def test_key_loading(tmp_path, monkeypatch):
    assert parse_key(b"6b6579\n") == b"key"
    assert parse_key(b"raw key bytes") == b"raw key bytes"
    path = tmp_path / "k.bin"
    path.write_bytes(b"\x00\x01binary")
    assert load_key(path) == b"\x00\x01binary"
    monkeypatch.setenv("MPD_KEY", "6b6579")
    assert load_key() == b"key"
    monkeypatch.delenv("MPD_KEY")
    with pytest.raises(Exception):
        load_key()
