"""Simulated append-only blockchain.

A single-writer chain driven by a simulated clock. Transactions are signed,
nonce-ordered calls against a contract object; blocks link by SHA-256 digest
and the whole history can be replayed from its persisted form.

The contract is any object with::

    initial_state() -> state
    apply(state, tx, height) -> list of events   # raise ContractError to revert
    query(state, call) -> result
"""

import copy
import logging
import math
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .encoding import (
    DecodeError,
    decode_fields,
    encode_fields,
    encode_list,
    read_u64,
    sha256,
    u64,
)
from .errors import LedgerError, OtaError
from .keys import ADDRESS_LEN, KeyPair, address_of, verify_signature

log = logging.getLogger(__name__)

ZERO_DIGEST = bytes(32)


class BadSignature(LedgerError):
    pass


class BadNonce(LedgerError):
    pass


class TooEarly(LedgerError):
    pass


class UnknownCall(LedgerError):
    pass


class ChainCorrupt(LedgerError):
    pass


class ContractError(OtaError):
    """Raised by contract code to revert a transaction.

    Concrete contract errors inherit from both this class and their own
    family (registry, multisig).
    """


@dataclass(frozen=True)
class ChainConfig:
    block_interval: float = 15.0
    confirmations_required: int = 1

    def __post_init__(self):
        if not self.block_interval > 0:
            raise ValueError("block_interval must be > 0")
        if self.confirmations_required < 1:
            raise ValueError("confirmations_required must be >= 1")


def _to_ms(seconds: float) -> int:
    return int(round(seconds * 1000))


@dataclass(frozen=True)
class Transaction:
    sender: bytes
    nonce: int
    action: bytes
    public_key: bytes
    signature: bytes

    def body(self) -> bytes:
        return encode_fields(self.sender, u64(self.nonce), self.action, self.public_key)

    def signing_digest(self) -> bytes:
        return sha256(self.body())

    def encode(self) -> bytes:
        return encode_fields(self.sender, u64(self.nonce), self.action,
                             self.public_key, self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        sender, nonce, action, pub, sig = decode_fields(data, 5)
        return cls(sender, read_u64(nonce), action, pub, sig)

    @property
    def tx_id(self) -> bytes:
        return sha256(self.encode())

    def signature_valid(self) -> bool:
        if len(self.sender) != ADDRESS_LEN or address_of(self.public_key) != self.sender:
            return False
        return verify_signature(self.public_key, self.signing_digest(), self.signature)


def make_transaction(key: KeyPair, nonce: int, action: bytes) -> Transaction:
    unsigned = Transaction(key.address, nonce, action, key.public, b"")
    return Transaction(key.address, nonce, action, key.public,
                       key.sign(unsigned.signing_digest()))


@dataclass(frozen=True)
class Block:
    height: int
    parent_digest: bytes
    timestamp_ms: int
    transactions: Tuple[Transaction, ...]
    digest: bytes

    @staticmethod
    def content(height, parent_digest, timestamp_ms, transactions) -> bytes:
        return encode_fields(u64(height), parent_digest, u64(timestamp_ms),
                             encode_list(tx.encode() for tx in transactions))

    @classmethod
    def build(cls, height, parent_digest, timestamp_ms, transactions) -> "Block":
        txs = tuple(transactions)
        d = sha256(cls.content(height, parent_digest, timestamp_ms, txs))
        return cls(height, parent_digest, timestamp_ms, txs, d)

    @property
    def timestamp(self) -> float:
        return self.timestamp_ms / 1000

    def encode(self) -> bytes:
        return encode_fields(u64(self.height), self.parent_digest, u64(self.timestamp_ms),
                             encode_list(tx.encode() for tx in self.transactions),
                             self.digest)

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        height, parent, ts, txs, digest = decode_fields(data, 5)
        transactions = tuple(Transaction.decode(t) for t in decode_fields(txs))
        return cls(read_u64(height), parent, read_u64(ts), transactions, digest)

    def recompute_digest(self) -> bytes:
        return sha256(self.content(self.height, self.parent_digest,
                                   self.timestamp_ms, self.transactions))


@dataclass
class Receipt:
    tx_id: bytes
    height: int
    index: int
    ok: bool
    error: Optional[OtaError] = None
    events: List[tuple] = field(default_factory=list)


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    failed_height: Optional[int] = None
    reason: str = ""

    def __bool__(self):
        return self.ok


def verify_encoded_chain(encoded_blocks: Sequence[bytes]) -> ChainCheck:
    """Check digest and parent linkage of a chain in its persisted form."""
    parent = ZERO_DIGEST
    for i, raw in enumerate(encoded_blocks):
        try:
            block = Block.decode(raw)
        except DecodeError as e:
            return ChainCheck(False, i, f"undecodable: {e}")
        if block.encode() != bytes(raw):
            return ChainCheck(False, i, "non-canonical encoding")
        if block.height != i:
            return ChainCheck(False, i, f"height {block.height} at position {i}")
        if block.parent_digest != parent:
            return ChainCheck(False, i, "parent linkage broken")
        if block.recompute_digest() != block.digest:
            return ChainCheck(False, i, "digest mismatch")
        parent = block.digest
    return ChainCheck(True)


class Ledger:
    def __init__(self, contract, config: ChainConfig = None, path=None, genesis_time: float = 0.0):
        self.contract = contract
        self.config = config or ChainConfig()
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._blocks: List[Block] = []
        self._encoded: List[bytes] = []
        self._states: List[Any] = []
        self._pending: List[Transaction] = []
        self._nonces: Dict[bytes, int] = {}  # confirmed next nonce per sender
        self._receipts: Dict[bytes, Receipt] = {}
        if self.path is not None and self.path.exists() and self.path.stat().st_size:
            self._replay_file()
        else:
            genesis = Block.build(0, ZERO_DIGEST, _to_ms(genesis_time), ())
            self._append(genesis, contract.initial_state())

    # -- persistence -------------------------------------------------------

    def _append(self, block: Block, state) -> None:
        raw = block.encode()
        self._blocks.append(block)
        self._encoded.append(raw)
        self._states.append(state)
        if self.path is not None:
            with open(self.path, "ab") as fh:
                fh.write(struct.pack(">I", len(raw)) + raw)
                fh.flush()
                os.fsync(fh.fileno())

    def _replay_file(self) -> None:
        blobs = read_chain_file(self.path)
        check = verify_encoded_chain(blobs)
        if not check:
            raise ChainCorrupt(f"chain file fails verification at height "
                               f"{check.failed_height}: {check.reason}")
        path, self.path = self.path, None  # no re-append while replaying
        try:
            genesis = Block.decode(blobs[0])
            self._append(genesis, self.contract.initial_state())
            for raw in blobs[1:]:
                block = Block.decode(raw)
                state, receipts = self._execute(block.transactions, block.height)
                self._record(block.transactions, receipts)
                self._append(block, state)
        finally:
            self.path = path

    @classmethod
    def open(cls, path, contract, config: ChainConfig = None) -> "Ledger":
        return cls(contract, config, path=path)

    # -- write side --------------------------------------------------------

    def next_nonce(self, sender: bytes) -> int:
        n = self._nonces.get(sender, 0)
        return n + sum(1 for tx in self._pending if tx.sender == sender)

    def submit_transaction(self, tx: Transaction) -> bytes:
        with self._lock:
            if not tx.signature_valid():
                raise BadSignature(f"signature does not verify for {tx.sender.hex()}")
            expected = self.next_nonce(tx.sender)
            if tx.nonce != expected:
                raise BadNonce(f"nonce {tx.nonce}, expected {expected}")
            self._pending.append(tx)
            return tx.tx_id

    def _execute(self, txs, height, base_state=None):
        state = copy.deepcopy(self._states[-1] if base_state is None else base_state)
        receipts = []
        for index, tx in enumerate(txs):
            working = copy.deepcopy(state)
            try:
                events = self.contract.apply(working, tx, height)
            except ContractError as e:
                receipts.append(Receipt(tx.tx_id, height, index, False, e))
            else:
                state = working
                receipts.append(Receipt(tx.tx_id, height, index, True, None, list(events)))
        return state, receipts

    def _record(self, txs, receipts) -> None:
        for tx, r in zip(txs, receipts):
            self._receipts[tx.tx_id] = r
            self._nonces[tx.sender] = tx.nonce + 1
            if not r.ok:
                log.info("tx %s reverted: %s: %s", tx.tx_id.hex()[:12], r.error.name, r.error)

    def advance_block(self, now: float) -> Block:
        with self._lock:
            tip = self._blocks[-1]
            now_ms = _to_ms(now)
            if now_ms < tip.timestamp_ms + _to_ms(self.config.block_interval):
                raise TooEarly(f"t={now}s is before {tip.timestamp + self.config.block_interval}s")
            txs = tuple(self._pending)
            self._pending.clear()
            height = tip.height + 1
            state, receipts = self._execute(txs, height)
            self._record(txs, receipts)
            block = Block.build(height, tip.digest, now_ms, txs)
            self._append(block, state)
            return block

    def preview(self, extra: Sequence[Transaction] = ()) -> List[Receipt]:
        """Dry-run pending plus ``extra`` transactions against the tip state."""
        _, receipts = self._execute(list(self._pending) + list(extra), self.height + 1)
        return receipts

    # -- read side ---------------------------------------------------------

    @property
    def height(self) -> int:
        return self._blocks[-1].height

    @property
    def tip(self) -> Block:
        return self._blocks[-1]

    @property
    def now(self) -> float:
        return self._blocks[-1].timestamp

    @property
    def blocks(self) -> List[Block]:
        return list(self._blocks)

    @property
    def pending(self) -> List[Transaction]:
        return list(self._pending)

    def encoded_blocks(self) -> List[bytes]:
        return list(self._encoded)

    @property
    def confirmed_height(self) -> int:
        return max(0, self.height - (self.config.confirmations_required - 1))

    @property
    def confirmed_state(self):
        return self._states[self.confirmed_height]

    @property
    def tip_state(self):
        return self._states[-1]

    def state_at(self, height: int):
        return self._states[height]

    def query(self, call):
        """Keyless read against the latest confirmed state."""
        return self.contract.query(self.confirmed_state, call)

    def receipt(self, tx_id: bytes) -> Optional[Receipt]:
        r = self._receipts.get(tx_id)
        if r is None or r.height > self.confirmed_height:
            return None
        return r

    def block_receipts(self, height: int) -> List[Receipt]:
        return [self._receipts[tx.tx_id] for tx in self._blocks[height].transactions]

    def confirmations(self, tx_id: bytes) -> int:
        r = self._receipts.get(tx_id)
        return 0 if r is None else self.height - r.height + 1

    def verify_chain(self) -> ChainCheck:
        return verify_encoded_chain(self._encoded)

    def next_block_time(self, at: float) -> float:
        """Earliest admissible block time on the interval grid not before ``at``."""
        interval = self.config.block_interval
        earliest = self.now + interval
        if at <= earliest:
            return earliest
        k = math.ceil(round((at - self.now) / interval, 9))
        return self.now + k * interval


def read_chain_file(path) -> List[bytes]:
    data = Path(path).read_bytes()
    blobs, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ChainCorrupt("truncated record header")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise ChainCorrupt("truncated block record")
        blobs.append(data[pos:pos + n])
        pos += n
    return blobs
