import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canforest.errors import ChainError, TamperError
from canforest.forest import ForestParams, train_federated, train_partial
from canforest.registry import (ContentStore, HashChain, Registry, ZERO_HASH, append_block, fetch_model,
                                first_bad_index, store_model, train_registered, verify_chain)

from conftest import blobs

PARAMS = ForestParams(n_trees=2, max_depth=4)


@pytest.fixture(scope="module")
def partial():
    return train_partial(blobs(10), PARAMS, seed=0)


def digest(i):
    return bytes([i]) * 32


def test_genesis_and_append():
    chain = HashChain()
    b0 = append_block(chain, digest(1), "m0", 0.0)
    assert b0.index == 0 and b0.prev_hash == ZERO_HASH
    for i in range(2, 4):
        append_block(chain, digest(i), "m", float(i))
    assert append_block(chain, digest(9), "m", 9.0).index == 3
    assert verify_chain(chain)


def test_untouched_ten_block_chain_verifies(tmp_path):
    chain = HashChain(tmp_path / "c.jsonl")
    for i in range(10):
        chain.append(digest(i), f"m{i}", float(i))
    assert HashChain(tmp_path / "c.jsonl").verify()


def test_undecodable_byte_in_chain_names_its_block(tmp_path):
    path = tmp_path / "c.jsonl"
    chain = HashChain(path)
    for i in range(3):
        chain.append(digest(i), "m", float(i))
    lines = path.read_bytes().split(b"\n")
    lines[1] = lines[1].replace(b'"m"', b'"\xb0"')
    path.write_bytes(b"\n".join(lines))
    reloaded = HashChain(path)
    assert not reloaded.verify() and first_bad_index(reloaded.records) == 1


def test_mutated_model_hash_names_block(tmp_path):
    path = tmp_path / "c.jsonl"
    chain = HashChain(path)
    for i in range(8):
        chain.append(digest(i), "m", float(i))
    lines = path.read_text().splitlines()
    lines[4] = lines[4].replace(digest(4).hex(), digest(99).hex())
    path.write_text("\n".join(lines) + "\n")
    reloaded = HashChain(path)
    assert not reloaded.verify() and first_bad_index(reloaded.records) == 4
    with pytest.raises(ChainError) as exc:
        reloaded.append(digest(50), "m", 0.0)
    assert exc.value.index == 4


def test_store_is_content_addressed(partial):
    store = ContentStore()
    assert store_model(store, partial) == store_model(store, partial)
    tree = partial.trees[0]
    thr = tree.threshold.copy()
    thr[0] += 1e-9
    other = type(partial)((type(tree)(tree.feature, thr, tree.left, tree.right, tree.counts, tree.max_depth),)
                          + partial.forest_trees[1:], partial.miner_id, partial.class_names, partial.train_meta)
    assert store_model(store, other) != store_model(store, partial)
    assert fetch_model(store, store_model(store, partial)).encode() == partial.encode()


def test_every_single_byte_flip_in_a_stored_model_is_caught(tmp_path, partial):
    store = ContentStore(tmp_path)
    d = store_model(store, partial)
    path = tmp_path / d.hex()
    clean = path.read_bytes()
    rng = np.random.default_rng(0)
    for pos in rng.choice(len(clean), 100, replace=False):
        data = bytearray(clean)
        data[pos] ^= int(rng.integers(1, 256))
        path.write_bytes(bytes(data))
        with pytest.raises(TamperError):
            fetch_model(store, d)
    path.write_bytes(clean)
    assert fetch_model(store, d).encode() == partial.encode()


@settings(max_examples=50)
@given(st.integers(0, 5), st.data())
def test_any_byte_flip_in_the_chain_is_caught(n_extra, data):
    chain = HashChain()
    for i in range(3 + n_extra):
        chain.append(digest(i), f"m{i}", float(i))
    records = chain.records
    row = data.draw(st.integers(0, len(records) - 1))
    line = bytearray(records[row].encode())
    pos = data.draw(st.integers(0, len(line) - 1))
    line[pos] ^= data.draw(st.integers(1, 127))
    records[row] = line.decode("latin-1")
    assert first_bad_index(records) == row


def test_every_single_bit_flip_in_the_chain_is_caught():
    # exhaustive over bits, including case flips of hex digits (a -> A)
    chain = HashChain()
    for i in range(3):
        chain.append(digest(i), f"m{i}", float(i))
    missed = []
    for row, record in enumerate(chain.records):
        raw = record.encode()
        for pos in range(len(raw)):
            for bit in range(8):
                line = bytearray(raw)
                line[pos] ^= 1 << bit
                records = chain.records
                records[row] = line.decode("utf-8", errors="surrogateescape")
                if first_bad_index(records) != row:
                    missed.append((row, pos, bit))
    assert missed == []


def test_registry_round_trip_predicts_like_memory(tmp_path):
    ds = blobs(12)
    reg = Registry(tmp_path)
    model, digests = train_registered(ds, 3, PARAMS, 5, reg, timestamp=0.0)
    in_memory, _ = train_federated(ds, 3, PARAMS, 5)
    X = blobs(seed=3).X
    assert np.array_equal(model.predict_proba(X), in_memory.predict_proba(X))
    assert np.array_equal(Registry(tmp_path).aggregate(digests).predict(X), in_memory.predict(X))
    assert reg.verify() == (True, None, [])


def test_unanchored_model_refused(partial):
    reg = Registry()
    d = reg.store.put(partial.encode())
    with pytest.raises(TamperError):
        reg.aggregate([d])


def test_retraining_is_reproducible():
    ds = blobs(12)
    a = train_registered(ds, 2, PARAMS, 1, Registry(), 0.0)[1]
    b = train_registered(ds, 2, PARAMS, 1, Registry(), 0.0)[1]
    assert a == b
