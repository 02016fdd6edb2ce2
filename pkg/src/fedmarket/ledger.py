"""In-process ledger: content-addressed blobs, transactions, PoW blocks, forks, gas.

Everything is hashed with SHA-256. Blocks carry a difficulty expressed as a
number of leading zero bits of the block hash; mining scans nonces upward
from a start value seeded by the miner id, so results are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BlobNotFoundError,
    BlockRejected,
    TransactionRejected,
    UnknownKindError,
)

MAX_DIFFICULTY = 20
ZERO_HASH = bytes(32)

# Historical conversion constants from the reference deployment's cost table.
GWEI_PER_ETHER = 1e9
GWEI_PER_USD = 246_940.5627


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def leading_zero_bits(digest: bytes) -> int:
    return len(digest) * 8 - int.from_bytes(digest, "big").bit_length()


class TxKind(str, Enum):
    CONTRACT_REGISTRY = "ContractRegistry"
    ADD_WORKER = "AddWorker"
    MODEL_TRANSMISSION = "ModelTransmission"
    MODEL_TRAINING = "ModelTraining"
    MODEL_AGGREGATION = "ModelAggregation"
    SETTLEMENT = "Settlement"
    PAY_CHANNEL_EXECUTE = "PayChannelExecute"
    PUBLISH = "Publish"
    COMMIT = "Commit"
    DEPLOY = "Deploy"
    UPDATE = "Update"
    SETTLE = "Settle"


def as_kind(kind) -> TxKind:
    try:
        return TxKind(kind)
    except ValueError:
        raise UnknownKindError(f"unknown transaction kind {kind!r}") from None


@dataclass(frozen=True)
class GasRow:
    gas: int
    ether: float
    usd: float
    sender: str = ""


# (kind, sender, gas, ether, usd), in table order.
MEASURED_GAS_ROWS: tuple[tuple[str, str, int, float, float], ...] = (
    ("ContractRegistry", "0x283D382F", 1459430, 15.9e-5, 0.0723),
    ("AddWorker", "0x283D382F", 452467, 45.2e-5, 0.0692),
    ("AddWorker", "0x283D382F", 452545, 45.2e-5, 0.0692),
    ("AddWorker", "0x283D382F", 452436, 45.2e-5, 0.0692),
    ("AddWorker", "0x283D382F", 452545, 45.2e-5, 0.0692),
    ("AddWorker", "0x283D382F", 452436, 45.2e-5, 0.0692),
    ("ModelTransmission", "0x5846F427", 19374, 19.3e-5, 0.1621),
    ("ModelTransmission", "0x9dD8Fd06", 243482, 24.3e-5, 0.0902),
    ("ModelTransmission", "0x98HF8F94", 228779, 22.3e-5, 0.1121),
    ("ModelTransmission", "0x8H9FH780", 253924, 25.3e-5, 0.0951),
    ("ModelTransmission", "0x0932FD99", 263924, 19.3e-5, 0.0571),
    ("ModelTraining", "0x5846F427", 223924, 22.3e-5, 0.1021),
    ("ModelTraining", "0x9DD8Fd06", 253924, 25.3e-5, 0.0951),
    ("ModelTraining", "0x98HF8F94", 193924, 19.3e-5, 0.0571),
    ("ModelTraining", "0x8H9FH780", 253924, 25.3e-5, 0.0951),
    ("ModelTraining", "0x0932FD99", 253924, 19.3e-5, 0.0571),
    ("ModelAggregation", "0x5846F427", 324942, 32.4e-5, 0.0766),
    ("ModelAggregation", "0x9dD8Fd06", 283445, 22.4e-5, 0.0408),
    ("ModelAggregation", "0x98HF8F94", 214939, 21.4e-5, 0.0709),
    ("ModelAggregation", "0x8H9FH780", 253924, 25.3e-5, 0.0951),
    ("ModelAggregation", "0x0932FD99", 193924, 19.3e-5, 0.0571),
    ("Settlement", "0x283D382F", 212559, 21.3e-5, 0.0712),
    ("PayChannelExecute", "0x283D382F", 212538, 21.2e-5, 0.0702),
)

# Kinds without a measured row reuse the row of the closest measured operation.
_ALIASES = {
    TxKind.PUBLISH: TxKind.CONTRACT_REGISTRY,
    TxKind.DEPLOY: TxKind.CONTRACT_REGISTRY,
    TxKind.COMMIT: TxKind.SETTLEMENT,
    TxKind.SETTLE: TxKind.SETTLEMENT,
    TxKind.UPDATE: TxKind.PAY_CHANNEL_EXECUTE,
}


class GasSchedule:
    """Gas cost per transaction kind.

    A kind may have several rows; a transaction's ``slot`` selects row
    ``slot % len(rows)``. Slot 0 is the first listed row.
    """

    def __init__(self, rows: Mapping[TxKind, Sequence[GasRow]]):
        self.rows: dict[TxKind, tuple[GasRow, ...]] = {}
        for kind, rs in rows.items():
            rs = tuple(rs)
            if not rs or any(r.gas <= 0 for r in rs):
                raise ValueError(f"gas for {kind} must be positive")
            self.rows[as_kind(kind)] = rs

    @classmethod
    def default(cls) -> "GasSchedule":
        rows: dict[TxKind, list[GasRow]] = {}
        for kind, sender, gas, ether, usd in MEASURED_GAS_ROWS:
            rows.setdefault(TxKind(kind), []).append(GasRow(gas, ether, usd, sender))
        for kind, source in _ALIASES.items():
            rows[kind] = list(rows[source][:1])
        return cls(rows)

    def row(self, kind, slot: int = 0) -> GasRow:
        k = as_kind(kind)
        if k not in self.rows:
            raise UnknownKindError(f"no gas entry for {k.value}")
        rs = self.rows[k]
        return rs[slot % len(rs)]

    def charge(self, kind, slot: int = 0) -> int:
        return self.row(kind, slot).gas


DEFAULT_SCHEDULE = GasSchedule.default()


def charge_gas(kind, slot: int = 0, schedule: GasSchedule = DEFAULT_SCHEDULE) -> int:
    return schedule.charge(kind, slot)


def gwei_to_ether(gwei: float) -> float:
    return gwei / GWEI_PER_ETHER


def gwei_to_usd(gwei: float) -> float:
    return gwei / GWEI_PER_USD


class BlobStore:
    """Content-addressed byte store keyed by SHA-256 digest."""

    def __init__(self):
        self._blobs: dict[bytes, bytes] = {}
        self._lock = threading.Lock()

    def store(self, data: bytes) -> bytes:
        data = bytes(data)
        key = sha256(data)
        with self._lock:
            existing = self._blobs.setdefault(key, data)
        if existing != data:  # pragma: no cover - would need a SHA-256 collision
            raise ValueError("digest collision")
        return key

    def fetch(self, digest: bytes) -> bytes:
        try:
            return self._blobs[bytes(digest)]
        except KeyError:
            raise BlobNotFoundError(f"no blob {bytes(digest).hex()}") from None

    def __contains__(self, digest) -> bool:
        return bytes(digest) in self._blobs

    def __len__(self) -> int:
        return len(self._blobs)

    def remove(self, digest: bytes) -> None:
        """Drop a blob (simulates off-chain data loss)."""
        with self._lock:
            self._blobs.pop(bytes(digest), None)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for key, data in sorted(self._blobs.items()):
            (d / key.hex()).write_bytes(data)

    @classmethod
    def load(cls, directory: str | Path) -> "BlobStore":
        store = cls()
        for path in sorted(Path(directory).iterdir()):
            key = store.store(path.read_bytes())
            if key.hex() != path.name:
                raise ValueError(f"blob file {path.name} does not match its content")
        return store


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    sender: str
    payload_hash: bytes
    nonce: int
    slot: int = 0
    gas_used: int = 0

    def identity(self) -> dict:
        return {
            "kind": self.kind.value,
            "sender": self.sender,
            "payload_hash": self.payload_hash.hex(),
            "nonce": self.nonce,
            "slot": self.slot,
        }

    @property
    def tx_id(self) -> str:
        return sha256(json.dumps(self.identity(), sort_keys=True).encode()).hex()

    def to_dict(self) -> dict:
        return {**self.identity(), "gas_used": self.gas_used}

    def encode(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        return cls(
            as_kind(d["kind"]),
            d["sender"],
            bytes.fromhex(d["payload_hash"]),
            int(d["nonce"]),
            int(d.get("slot", 0)),
            int(d.get("gas_used", 0)),
        )


def body_root(txs: Iterable[Transaction]) -> bytes:
    h = hashlib.sha256()
    for tx in txs:
        h.update(sha256(tx.encode()))
    return h.digest()


def header_prefix(height: int, prev_hash: bytes, miner: str, difficulty: int, root: bytes) -> bytes:
    return b"|".join([str(height).encode(), prev_hash, miner.encode(), str(difficulty).encode(), root])


def block_digest(prefix: bytes, nonce: int) -> bytes:
    return sha256(prefix + nonce.to_bytes(8, "little"))


def proof_of_work(prefix: bytes, difficulty: int, start: int) -> tuple[int, bytes, int]:
    """Scan nonces from ``start`` until the digest has ``difficulty`` leading zero bits.

    Returns ``(nonce, digest, attempts)``.
    """
    if not 0 <= difficulty <= MAX_DIFFICULTY:
        raise ValueError(f"difficulty must lie in [0, {MAX_DIFFICULTY}]")
    attempts = 0
    nonce = start % (1 << 64)
    while True:
        attempts += 1
        digest = block_digest(prefix, nonce)
        if leading_zero_bits(digest) >= difficulty:
            return nonce, digest, attempts
        nonce = (nonce + 1) % (1 << 64)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    nonce: int
    miner: str
    txs: tuple[Transaction, ...]
    difficulty: int
    block_hash: bytes

    def recompute_hash(self) -> bytes:
        prefix = header_prefix(self.height, self.prev_hash, self.miner, self.difficulty, body_root(self.txs))
        return block_digest(prefix, self.nonce)

    @property
    def tx_ids(self) -> list[str]:
        return [tx.tx_id for tx in self.txs]

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash.hex(),
            "block_hash": self.block_hash.hex(),
            "nonce": self.nonce,
            "miner": self.miner,
            "difficulty": self.difficulty,
            "tx_ids": self.tx_ids,
            "txs": [tx.to_dict() for tx in self.txs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        return cls(
            int(d["height"]),
            bytes.fromhex(d["prev_hash"]),
            int(d["nonce"]),
            d["miner"],
            tuple(Transaction.from_dict(t) for t in d["txs"]),
            int(d["difficulty"]),
            bytes.fromhex(d["block_hash"]),
        )


def _genesis() -> Block:
    prefix = header_prefix(0, ZERO_HASH, "genesis", 0, body_root(()))
    return Block(0, ZERO_HASH, 0, "genesis", (), 0, block_digest(prefix, 0))


@dataclass(frozen=True)
class Violation:
    height: int
    block_hash: str
    kind: str
    detail: str


class Chain:
    """A single-writer chain with a pending pool and a shared blob store.

    Mutating methods hold an internal lock, so commands from several threads
    are applied one at a time.
    """

    def __init__(
        self,
        difficulty: int = 8,
        blobs: BlobStore | None = None,
        schedule: GasSchedule | None = None,
        tx_cap: int = 64,
    ):
        if not 0 <= difficulty <= MAX_DIFFICULTY:
            raise ValueError(f"difficulty must lie in [0, {MAX_DIFFICULTY}]")
        self.difficulty = difficulty
        self.blobs = blobs if blobs is not None else BlobStore()
        self.schedule = schedule or DEFAULT_SCHEDULE
        self.tx_cap = tx_cap
        genesis = _genesis()
        self.genesis_hash = genesis.block_hash
        self.blocks: dict[bytes, Block] = {genesis.block_hash: genesis}
        self.tip = genesis.block_hash
        self.pending: list[Transaction] = []
        self.orphans: list[Block] = []
        self.accounts: set[str] = set()
        self._nonces: dict[str, int] = {}
        self._lock = threading.RLock()

    # accounts and transactions

    def register_account(self, account: str) -> None:
        with self._lock:
            self.accounts.add(account)

    def make_tx(self, kind, sender: str, payload_hash: bytes, slot: int = 0) -> Transaction:
        with self._lock:
            nonce = self._nonces.get(sender, 0)
            self._nonces[sender] = nonce + 1
        return Transaction(as_kind(kind), sender, bytes(payload_hash), nonce, slot)

    def submit_tx(self, tx: Transaction) -> str:
        """Validate ``tx``, fill in its gas and add it to the pending pool."""
        kind = as_kind(tx.kind)
        with self._lock:
            if tx.sender not in self.accounts:
                raise TransactionRejected(f"sender {tx.sender} is not registered")
            if tx.payload_hash not in self.blobs:
                raise TransactionRejected(f"payload {tx.payload_hash.hex()} is not in the blob store")
            gas = self.schedule.charge(kind, tx.slot)
            tx = replace(tx, kind=kind, gas_used=gas)
            tx_id = tx.tx_id
            if any(p.tx_id == tx_id for p in self.pending) or tx_id in self.included_tx_ids():
                raise TransactionRejected(f"duplicate transaction {tx_id}")
            self.pending.append(tx)
            return tx_id

    def submit(self, kind, sender: str, payload: bytes, slot: int = 0) -> str:
        """Store ``payload`` in the blob store and submit a transaction referencing it."""
        digest = self.blobs.store(payload)
        return self.submit_tx(self.make_tx(kind, sender, digest, slot))

    # chain structure

    @property
    def height(self) -> int:
        return self.blocks[self.tip].height

    def main_path(self) -> list[Block]:
        path, h = [], self.tip
        while True:
            block = self.blocks[h]
            path.append(block)
            if h == self.genesis_hash:
                break
            h = block.prev_hash
        return path[::-1]

    def included_tx_ids(self) -> set[str]:
        return {tx_id for b in self.main_path() for tx_id in b.tx_ids}

    def included_txs(self) -> list[Transaction]:
        return [tx for b in self.main_path() for tx in b.txs]

    # mining

    def _start_nonce(self, miner: str, height: int, prev: bytes) -> int:
        return int.from_bytes(sha256(f"{miner}|{height}|".encode() + prev)[:8], "little")

    def build_candidate(self, miner: str, txs: Sequence[Transaction] | None = None) -> Block:
        """Mine a block on the current tip without appending it.

        Takes up to ``tx_cap`` pending transactions unless ``txs`` is given.
        """
        with self._lock:
            body = tuple(self.pending[: self.tx_cap] if txs is None else txs)
            height, prev = self.height + 1, self.tip
        prefix = header_prefix(height, prev, miner, self.difficulty, body_root(body))
        nonce, digest, _ = proof_of_work(prefix, self.difficulty, self._start_nonce(miner, height, prev))
        return Block(height, prev, nonce, miner, body, self.difficulty, digest)

    def check_block(self, block: Block) -> list[str]:
        problems = []
        parent = self.blocks.get(block.prev_hash)
        if parent is None:
            problems.append("unknown parent")
        elif block.height != parent.height + 1:
            problems.append(f"height {block.height} does not follow parent {parent.height}")
        if block.recompute_hash() != block.block_hash:
            problems.append("block hash does not match contents")
        if leading_zero_bits(block.block_hash) < block.difficulty:
            problems.append("block hash misses its difficulty target")
        if block.difficulty < self.difficulty:
            problems.append("block difficulty below chain difficulty")
        for tx in block.txs:
            if tx.payload_hash not in self.blobs:
                problems.append(f"tx {tx.tx_id[:12]} payload does not resolve")
            if tx.gas_used <= 0:
                problems.append(f"tx {tx.tx_id[:12]} has no gas charged")
        return problems

    def append(self, block: Block) -> None:
        with self._lock:
            if block.prev_hash != self.tip:
                raise BlockRejected("block does not extend the current tip")
            problems = self.check_block(block)
            seen = self.included_tx_ids()
            if any(t in seen for t in block.tx_ids):
                problems.append("block repeats an included transaction")
            if problems:
                raise BlockRejected("; ".join(problems))
            self.blocks[block.block_hash] = block
            self.tip = block.block_hash
            included = set(block.tx_ids)
            self.pending = [tx for tx in self.pending if tx.tx_id not in included]

    def mine_block(self, miner: str) -> Block:
        with self._lock:
            block = self.build_candidate(miner)
            self.append(block)
            return block

    def resolve_fork(self, candidates: Sequence[Block], acks: Mapping[bytes, int] | None = None) -> Block:
        """Pick one of several blocks competing for the next height and append it.

        The candidate with the most ACKs wins; ties go to the lexicographically
        smallest block hash. Transactions carried only by losing candidates
        go back to the pending pool.
        """
        if not candidates:
            raise BlockRejected("no candidates")
        acks = acks or {}
        with self._lock:
            for c in candidates:
                if c.prev_hash != self.tip:
                    raise BlockRejected(f"candidate {c.block_hash.hex()[:12]} does not extend the tip")
                problems = self.check_block(c)
                if problems:
                    raise BlockRejected(f"candidate {c.block_hash.hex()[:12]}: " + "; ".join(problems))
            winner = min(candidates, key=lambda c: (-int(acks.get(c.block_hash, 0)), c.block_hash))
            self.append(winner)
            kept = set(winner.tx_ids) | {tx.tx_id for tx in self.pending}
            for c in candidates:
                if c.block_hash == winner.block_hash:
                    continue
                self.orphans.append(c)
                for tx in c.txs:
                    if tx.tx_id not in kept:
                        self.pending.append(tx)
                        kept.add(tx.tx_id)
            return winner

    # export

    def to_jsonl(self) -> str:
        return "".join(json.dumps(b.to_dict(), sort_keys=True) + "\n" for b in self.main_path())

    @classmethod
    def from_jsonl(cls, text: str, blobs: BlobStore, schedule: GasSchedule | None = None) -> "Chain":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        blocks = [Block.from_dict(r) for r in rows]
        if not blocks or blocks[0].height != 0:
            raise BlockRejected("export does not start at genesis")
        difficulty = max((b.difficulty for b in blocks[1:]), default=0)
        chain = cls(difficulty=difficulty, blobs=blobs, schedule=schedule)
        if blocks[0].block_hash != chain.genesis_hash:
            raise BlockRejected("genesis mismatch")
        for b in blocks[1:]:
            for tx in b.txs:
                chain.accounts.add(tx.sender)
            chain.append(b)
        return chain

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def collect_acks(candidates: Sequence[Block], miners: Sequence[str], seed: int) -> dict[bytes, int]:
    """Each miner ACKs the candidate that reached it first (seeded arrival order)."""
    rng = np.random.default_rng(seed)
    ordered = sorted(candidates, key=lambda c: c.block_hash)
    votes: dict[bytes, int] = {c.block_hash: 0 for c in ordered}
    for _ in miners:
        votes[ordered[int(rng.integers(len(ordered)))].block_hash] += 1
    return votes


def validate_chain(chain: Chain) -> list[Violation]:
    """Walk the main path and report every structural problem found (empty = ok)."""
    out: list[Violation] = []
    seen: set[str] = set()
    path = chain.main_path()
    if path[0].block_hash != chain.genesis_hash:
        out.append(Violation(0, path[0].block_hash.hex(), "genesis", "path does not start at genesis"))
    for parent, block in zip(path, path[1:]):
        h = block.block_hash.hex()
        if block.prev_hash != parent.block_hash:
            out.append(Violation(block.height, h, "link", "prev_hash does not match parent"))
        if block.height != parent.height + 1:
            out.append(Violation(block.height, h, "height", f"follows height {parent.height}"))
        if block.recompute_hash() != block.block_hash:
            out.append(Violation(block.height, h, "hash", "block hash does not match contents"))
        if leading_zero_bits(block.block_hash) < block.difficulty or block.difficulty < chain.difficulty:
            out.append(Violation(block.height, h, "difficulty", "proof of work below target"))
        for tx in block.txs:
            if tx.payload_hash not in chain.blobs:
                out.append(Violation(block.height, h, "dangling-payload", f"tx {tx.tx_id} payload missing"))
            if tx.gas_used <= 0:
                out.append(Violation(block.height, h, "gas", f"tx {tx.tx_id} has no gas"))
            if tx.tx_id in seen:
                out.append(Violation(block.height, h, "duplicate-tx", f"tx {tx.tx_id} repeated"))
            seen.add(tx.tx_id)
    return out
