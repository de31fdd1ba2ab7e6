"""Content-addressed model store plus an append-only hash chain.

Stands in for IPFS (the store) and the blockchain (the chain): each published
partial model is stored under the SHA-256 of its canonical bytes, and that
digest is anchored in a block linked to its predecessor.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from canforest import canonical
from canforest.errors import ChainError, TamperError
from canforest.forest import FederatedForest, PartialForest, aggregate

ZERO_HASH = bytes(32)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


@dataclass(frozen=True)
class RegistryBlock:
    index: int
    prev_hash: bytes
    model_hash: bytes
    miner_id: str
    timestamp: float

    def body(self) -> dict:
        return {
            "index": self.index,
            "prev_hash": self.prev_hash.hex(),
            "model_hash": self.model_hash.hex(),
            "miner_id": self.miner_id,
            "timestamp": float(self.timestamp),
        }

    def encode(self) -> bytes:
        return canonical.dump_bytes(self.body())

    @property
    def digest(self) -> bytes:
        return canonical.sha256(self.encode())

    def record(self) -> str:
        """One chain-file line: the block body plus its own digest."""
        return canonical.dumps({**self.body(), "hash": self.digest.hex()})


def _parse_record(line: str, index: int) -> tuple[RegistryBlock, bytes]:
    try:
        line.encode("utf-8")  # undecodable bytes survive loading as lone surrogates
        d = canonical.loads(line)
        block = RegistryBlock(
            int(d["index"]), bytes.fromhex(d["prev_hash"]), bytes.fromhex(d["model_hash"]),
            str(d["miner_id"]), float(d["timestamp"]),
        )
        stored = bytes.fromhex(d["hash"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ChainError(index, f"unreadable record ({exc})") from None
    if set(d) != {"index", "prev_hash", "model_hash", "miner_id", "timestamp", "hash"}:
        raise ChainError(index, "unexpected record fields")
    # Exact re-encoding of the decoded block: rules out variants that parse to
    # the same values (upper-case hex, 1 vs 1.0, "7" vs 7).
    if canonical.dumps({**block.body(), "hash": stored.hex()}) != line:
        raise ChainError(index, "record is not canonically encoded")
    return block, stored


def first_bad_index(records: Sequence[str]) -> int | None:
    """Index of the first block failing its digest or link check, else None."""
    prev = ZERO_HASH
    for i, line in enumerate(records):
        try:
            block, stored = _parse_record(line, i)
        except ChainError:
            return i
        if block.index != i or len(block.prev_hash) != 32 or len(block.model_hash) != 32:
            return i
        if block.digest != stored or block.prev_hash != prev:
            return i
        prev = stored
    return None


class HashChain:
    """Append-only block list, optionally persisted one record per line."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: list[str] = []
        if self.path is not None and self.path.exists():
            self._records = self.path.read_text(errors="surrogateescape").splitlines()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[str]:
        return list(self._records)

    @property
    def blocks(self) -> list[RegistryBlock]:
        return [_parse_record(r, i)[0] for i, r in enumerate(self._records)]

    def head_hash(self) -> bytes:
        if not self._records:
            return ZERO_HASH
        return _parse_record(self._records[-1], len(self._records) - 1)[1]

    def verify(self) -> bool:
        return first_bad_index(self._records) is None

    def append(self, model_hash: bytes, miner_id: str, timestamp: float | None = None) -> RegistryBlock:
        bad = first_bad_index(self._records)
        if bad is not None:
            raise ChainError(bad, "refusing to append to an invalid chain")
        if len(model_hash) != 32:
            raise ValueError("model_hash must be 32 bytes")
        block = RegistryBlock(
            len(self._records), self.head_hash(), bytes(model_hash), miner_id,
            time.time() if timestamp is None else float(timestamp),
        )
        records = self._records + [block.record()]
        if self.path is not None:
            _atomic_write(self.path, ("\n".join(records) + "\n").encode("ascii"))
        self._records = records
        return block


def append_block(chain: HashChain, model_hash: bytes, miner_id: str, timestamp: float | None = None) -> RegistryBlock:
    return chain.append(model_hash, miner_id, timestamp)


def verify_chain(chain: HashChain) -> bool:
    return chain.verify()


class ContentStore:
    """digest -> bytes; backed by `<hexdigest>` files when given a directory."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[bytes, bytes] = {}

    def put(self, data: bytes) -> bytes:
        digest = canonical.sha256(data)
        if self.root is None:
            self._mem[digest] = bytes(data)
        else:
            path = self.root / digest.hex()
            if not path.exists():
                _atomic_write(path, data)
        return digest

    def get(self, digest: bytes) -> bytes:
        if self.root is None:
            data = self._mem[digest]
        else:
            data = (self.root / digest.hex()).read_bytes()
        if canonical.sha256(data) != digest:
            raise TamperError(f"content under {digest.hex()} does not match its digest")
        return data

    def digests(self) -> list[bytes]:
        if self.root is None:
            return sorted(self._mem)
        if not self.root.exists():
            return []
        return sorted(bytes.fromhex(p.name) for p in self.root.iterdir() if not p.name.endswith(".tmp"))


def store_model(store: ContentStore, model: PartialForest) -> bytes:
    return store.put(model.encode())


def fetch_model(store: ContentStore, digest: bytes) -> PartialForest:
    return PartialForest.decode(store.get(digest))


class Registry:
    """Store + chain pair rooted at one directory (or in memory)."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self.store = ContentStore(self.root / "store" if self.root else None)
        self.chain = HashChain(self.root / "chain.jsonl" if self.root else None)

    def publish(self, model: PartialForest, timestamp: float | None = None) -> tuple[bytes, RegistryBlock]:
        digest = store_model(self.store, model)
        return digest, self.chain.append(digest, model.miner_id, timestamp)

    def fetch(self, digest: bytes) -> PartialForest:
        return fetch_model(self.store, digest)

    def aggregate(self, digests: Sequence[bytes]) -> FederatedForest:
        """Aggregate partials fetched (and digest-checked) from the store."""
        anchored = {b.model_hash for b in self.chain.blocks}
        missing = [d.hex() for d in digests if d not in anchored]
        if missing:
            raise TamperError(f"models not anchored in the chain: {missing}")
        return aggregate([self.fetch(d) for d in digests])

    def verify(self) -> tuple[bool, int | None, list[str]]:
        """(ok, first bad block, digests of tampered blobs)."""
        bad = first_bad_index(self.chain.records)
        tampered = []
        for d in self.store.digests():
            try:
                self.store.get(d)
            except TamperError:
                tampered.append(d.hex())
        return bad is None and not tampered, bad, tampered


def train_registered(
    dataset,
    k: int,
    params=None,
    seed: int = 0,
    registry: Registry | None = None,
    timestamp: float | None = None,
) -> tuple[FederatedForest, list[bytes]]:
    """shard -> partials -> publish each to the registry -> aggregate the fetched copies."""
    from canforest.forest import ForestParams, train_federated

    registry = registry if registry is not None else Registry()
    _, partials = train_federated(dataset, k, params or ForestParams(), seed)
    digests = [registry.publish(p, timestamp)[0] for p in partials]
    return registry.aggregate(digests), digests
