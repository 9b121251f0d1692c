"""Firmware registry contract.

Publication is only reachable through an executed multisig proposal; the
getters are keyless reads of confirmed state.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .encoding import DecodeError, decode_fields, encode_fields, read_u64, u64
from .errors import RegistryError
from .keys import KeyPair
from .ledger import ContractError, Ledger, Transaction, UnknownCall, make_transaction
from .multisig import MultiSigWallet, NotOwner, OwnerSet

MAX_TEXT = 64


class NotFound(RegistryError):
    pass


class VersionNotMonotonic(RegistryError, ContractError):
    pass


class Unauthorized(RegistryError, ContractError):
    pass


class MalformedRecord(RegistryError, ContractError):
    pass


class UnknownAction(RegistryError, ContractError):
    pass


class AlreadyDeployed(RegistryError, ContractError):
    pass


class NotDeployed(RegistryError, ContractError):
    pass


@dataclass(frozen=True)
class FirmwareRecord:
    product_id: str
    version: int
    content_id: bytes
    firmware_digest: bytes
    target_model: str

    def validate(self) -> None:
        for name in ("product_id", "target_model"):
            text = getattr(self, name)
            if not text or len(text.encode()) > MAX_TEXT:
                raise MalformedRecord(f"{name} must be 1..{MAX_TEXT} bytes")
        if self.version <= 0:
            raise MalformedRecord("version must be > 0")
        for name in ("content_id", "firmware_digest"):
            v = getattr(self, name)
            if len(v) != 32 or v == bytes(32):
                raise MalformedRecord(f"{name} must be a nonzero 32-byte digest")

    def encode(self) -> bytes:
        return encode_fields(self.product_id.encode(), u64(self.version), self.content_id,
                             self.firmware_digest, self.target_model.encode())

    @classmethod
    def decode(cls, data: bytes) -> "FirmwareRecord":
        try:
            pid, ver, cid, dig, model = decode_fields(data, 5)
            return cls(pid.decode(), read_u64(ver), cid, dig, model.decode())
        except (DecodeError, UnicodeDecodeError) as e:
            raise MalformedRecord(str(e)) from e

    def to_json(self) -> dict:
        return {
            "product_id": self.product_id,
            "version": self.version,
            "content_id": self.content_id.hex(),
            "firmware_digest": self.firmware_digest.hex(),
            "target_model": self.target_model,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FirmwareRecord":
        return cls(d["product_id"], int(d["version"]), bytes.fromhex(d["content_id"]),
                   bytes.fromhex(d["firmware_digest"]), d["target_model"])


# -- action payloads -------------------------------------------------------

def deploy_action(owner_set: OwnerSet) -> bytes:
    return encode_fields(b"deploy", owner_set.encode())


def publish_action(record: FirmwareRecord) -> bytes:
    return encode_fields(b"publish", record.encode())


def propose_action(inner: bytes) -> bytes:
    return encode_fields(b"propose", inner)


def confirm_action(proposal_id: int) -> bytes:
    return encode_fields(b"confirm", u64(proposal_id))


def decode_action(action: bytes):
    try:
        fields = decode_fields(action)
    except DecodeError as e:
        raise UnknownAction(f"undecodable action: {e}") from e
    if not fields:
        raise UnknownAction("empty action")
    return fields[0], fields[1:]


@dataclass
class RegistryState:
    records: Dict[str, List[FirmwareRecord]] = field(default_factory=dict)
    wallet: Optional[MultiSigWallet] = None

    @property
    def owner_set(self) -> Optional[OwnerSet]:
        return self.wallet.owner_set if self.wallet else None

    @property
    def proposals(self):
        return self.wallet.proposals if self.wallet else {}

    def latest(self, product_id: str) -> Optional[FirmwareRecord]:
        h = self.records.get(product_id)
        return h[-1] if h else None


class RegistryContract:
    def initial_state(self) -> RegistryState:
        return RegistryState()

    # -- mutations (inside block application only) --------------------------

    def apply(self, state: RegistryState, tx: Transaction, height: int) -> list:
        name, args = decode_action(tx.action)
        if name == b"deploy":
            return self._deploy(state, tx.sender, args)
        if state.wallet is None:
            raise NotDeployed("registry has no owner set yet")
        if name == b"publish":
            raise Unauthorized("publish is only executable through a multisig proposal")
        events = []

        def run(action: bytes):
            inner, inner_args = decode_action(action)
            if inner != b"publish" or len(inner_args) != 1:
                raise UnknownAction(f"cannot execute {inner!r}")
            rec = self.publish_firmware(state, FirmwareRecord.decode(inner_args[0]))
            events.append(("executed", pid))
            events.append(("published", rec.product_id, rec.version))

        if name == b"propose":
            if len(args) != 1:
                raise UnknownAction("propose takes one action")
            self._check_proposable(state, args[0])
            pid = state.wallet.next_id
            p = state.wallet.propose(tx.sender, args[0], execute=run)
            return [("proposed", p.id, tx.sender)] + events
        if name == b"confirm":
            if len(args) != 1:
                raise UnknownAction("confirm takes a proposal id")
            pid = read_u64(args[0])
            state.wallet.confirm(pid, tx.sender, execute=run)
            return [("confirmed", pid, tx.sender)] + events
        raise UnknownAction(f"unknown action {name!r}")

    def _deploy(self, state, sender, args):
        if state.wallet is not None:
            raise AlreadyDeployed("owner set already deployed")
        if len(args) != 1:
            raise UnknownAction("deploy takes one owner set")
        owner_set = OwnerSet.decode(args[0])
        if sender not in owner_set.owners:
            raise NotOwner("deployer must be one of the owners")
        state.wallet = MultiSigWallet(owner_set)
        return [("deployed", owner_set.threshold, len(owner_set.owners))]

    def _check_proposable(self, state, action):
        name, args = decode_action(action)
        if name != b"publish" or len(args) != 1:
            raise UnknownAction("only publish actions can be proposed")
        FirmwareRecord.decode(args[0]).validate()

    def publish_firmware(self, state: RegistryState, record: FirmwareRecord) -> FirmwareRecord:
        """Append ``record``; callers must already hold multisig authorization."""
        record.validate()
        latest = state.latest(record.product_id)
        if latest is not None and record.version <= latest.version:
            raise VersionNotMonotonic(
                f"{record.product_id}: version {record.version} <= latest {latest.version}")
        state.records.setdefault(record.product_id, []).append(record)
        return record

    # -- keyless reads -----------------------------------------------------

    def query(self, state: RegistryState, call):
        name, *args = call
        if name == "get_latest":
            return get_latest(state, *args)
        if name == "get_version":
            return get_version(state, *args)
        if name == "history":
            return history(state, *args)
        if name == "owner_set":
            return state.owner_set
        if name == "proposal":
            p = state.proposals.get(args[0])
            if p is None:
                raise NotFound(f"no proposal {args[0]}")
            return p
        raise UnknownCall(f"unknown call {name!r}")


def get_latest(state: RegistryState, product_id: str) -> FirmwareRecord:
    rec = state.latest(product_id)
    if rec is None:
        raise NotFound(f"no firmware for {product_id!r}")
    return rec


def get_version(state: RegistryState, product_id: str, version: int) -> FirmwareRecord:
    for rec in state.records.get(product_id, ()):
        if rec.version == version:
            return rec
    raise NotFound(f"{product_id!r} has no version {version}")


def history(state: RegistryState, product_id: str) -> List[FirmwareRecord]:
    h = state.records.get(product_id)
    if not h:
        raise NotFound(f"no firmware for {product_id!r}")
    return list(h)


class RegistryClient:
    """Read access used by devices and tools."""

    def __init__(self, ledger: Ledger):
        self.ledger = ledger

    def get_latest(self, product_id: str) -> FirmwareRecord:
        return self.ledger.query(("get_latest", product_id))

    def get_version(self, product_id: str, version: int) -> FirmwareRecord:
        return self.ledger.query(("get_version", product_id, version))

    def history(self, product_id: str) -> List[FirmwareRecord]:
        return self.ledger.query(("history", product_id))


# -- transaction helpers -----------------------------------------------------

def signed(ledger: Ledger, key: KeyPair, action: bytes, nonce_offset: int = 0) -> Transaction:
    return make_transaction(key, ledger.next_nonce(key.address) + nonce_offset, action)


def predicted_proposal_id(ledger: Ledger) -> int:
    """Id the next propose transaction will get, assuming pending ones succeed."""
    base = ledger.tip_state.wallet.next_id if ledger.tip_state.wallet else 0
    pending = sum(1 for tx in ledger.pending
                  if decode_action(tx.action)[0] == b"propose")
    return base + pending


def submit_publish(ledger: Ledger, record: FirmwareRecord, signers: List[KeyPair]) -> int:
    """Propose ``record`` with ``signers[0]`` and confirm with the rest.

    Returns the proposal id. Everything lands in the pending pool; the record
    becomes visible after the next block (and required confirmations).
    """
    pid = predicted_proposal_id(ledger)
    ledger.submit_transaction(signed(ledger, signers[0], propose_action(publish_action(record))))
    for key in signers[1:]:
        ledger.submit_transaction(signed(ledger, key, confirm_action(pid)))
    return pid


def deploy(ledger: Ledger, deployer: KeyPair, owner_set: OwnerSet) -> bytes:
    return ledger.submit_transaction(signed(ledger, deployer, deploy_action(owner_set)))


@dataclass
class AuditResult:
    ok: bool
    mutations: int
    executed: int
    problems: List[str] = field(default_factory=list)

    def __bool__(self):
        return self.ok


def audit_authorization(ledger: Ledger) -> AuditResult:
    """Check every registry mutation on chain maps 1:1 to an executed proposal."""
    problems = []
    mutations = executed = 0
    seen_exec = set()
    replayed: Dict[str, List[FirmwareRecord]] = {}
    for block in ledger.blocks[1:]:
        for r in ledger.block_receipts(block.height):
            if not r.ok:
                continue
            ev = r.events
            for i, e in enumerate(ev):
                if e[0] == "executed":
                    executed += 1
                    if e[1] in seen_exec:
                        problems.append(f"proposal {e[1]} executed twice")
                    seen_exec.add(e[1])
                    if i + 1 >= len(ev) or ev[i + 1][0] != "published":
                        problems.append(f"proposal {e[1]} executed without a mutation")
                elif e[0] == "published":
                    mutations += 1
                    if i == 0 or ev[i - 1][0] != "executed":
                        problems.append(f"mutation {e[1:]} at height {block.height} "
                                        "has no executed proposal")
                    prop = ledger.state_at(block.height).proposals.get(ev[i - 1][1])
                    if prop is None or not prop.executed:
                        problems.append(f"mutation {e[1:]} not backed by proposal state")
                    else:
                        rec = FirmwareRecord.decode(decode_action(prop.action)[1][0])
                        replayed.setdefault(rec.product_id, []).append(rec)
    if replayed != ledger.tip_state.records:
        problems.append("record state differs from the executed proposals")
    return AuditResult(not problems, mutations, executed, problems)


def record_json(record: FirmwareRecord) -> str:
    return json.dumps(record.to_json(), sort_keys=True)
