"""M-of-N owner authorization.

Owner keys come from one root seed through a simple hash chain
(``secret = SHA-256(root_seed || index_be32)``). The wallet itself is plain
state logic; it is embedded in the registry contract so proposals and
confirmations are ledger transactions.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Set, Tuple

from .encoding import decode_fields, encode_fields, read_u32, sha256, u32
from .errors import MultisigError
from .keys import KeyPair, scalar_from_bytes
from .ledger import ContractError

DEFAULT_OWNERS = 3
DEFAULT_THRESHOLD = 2


class NotOwner(MultisigError, ContractError):
    pass


class UnknownProposal(MultisigError, ContractError):
    pass


class AlreadyExecuted(MultisigError, ContractError):
    pass


class BadOwnerSet(MultisigError, ContractError):
    pass


def derive_owner(root_seed: bytes, index: int) -> KeyPair:
    if len(root_seed) != 32:
        raise ValueError("root seed must be 32 bytes")
    if not 0 <= index < 2 ** 32:
        raise ValueError("index out of range")
    return KeyPair.from_secret(scalar_from_bytes(sha256(root_seed + u32(index))))


def root_commitment(root_seed: bytes) -> bytes:
    return sha256(root_seed)


@dataclass(frozen=True)
class OwnerSet:
    root_commitment: bytes
    owners: Tuple[bytes, ...]
    threshold: int

    def __post_init__(self):
        if len(set(self.owners)) != len(self.owners):
            raise BadOwnerSet("owners must be pairwise distinct")
        if not 1 <= self.threshold <= len(self.owners):
            raise BadOwnerSet(f"threshold {self.threshold} not in 1..{len(self.owners)}")

    @classmethod
    def from_root(cls, root_seed: bytes, n: int = DEFAULT_OWNERS,
                  threshold: int = DEFAULT_THRESHOLD) -> "OwnerSet":
        owners = tuple(derive_owner(root_seed, i).address for i in range(n))
        return cls(root_commitment(root_seed), owners, threshold)

    def encode(self) -> bytes:
        return encode_fields(self.root_commitment, u32(self.threshold), *self.owners)

    @classmethod
    def decode(cls, data: bytes) -> "OwnerSet":
        fields = decode_fields(data)
        if len(fields) < 3:
            raise BadOwnerSet("owner set needs a commitment, threshold and owners")
        return cls(fields[0], tuple(fields[2:]), read_u32(fields[1]))


@dataclass
class Proposal:
    id: int
    action: bytes
    confirmations: Set[bytes] = field(default_factory=set)
    executed: bool = False


class MultiSigWallet:
    """Proposal book keeping for one owner set.

    ``execute`` callbacks run the wrapped action. An exception from the
    callback propagates and leaves the proposal unexecuted; callers that
    need all-or-nothing semantics (the ledger) revert the whole transition.
    """

    def __init__(self, owner_set: OwnerSet):
        self.owner_set = owner_set
        self.proposals: Dict[int, Proposal] = {}

    def _require_owner(self, who: bytes) -> None:
        if who not in self.owner_set.owners:
            raise NotOwner(f"{who.hex()} is not an owner")

    def _maybe_execute(self, p: Proposal, execute: Optional[Callable[[bytes], object]]) -> None:
        if not p.executed and len(p.confirmations) >= self.owner_set.threshold:
            if execute is not None:
                execute(p.action)
            p.executed = True

    def propose(self, owner: bytes, action: bytes, execute=None) -> Proposal:
        self._require_owner(owner)
        p = Proposal(len(self.proposals), action, {owner})
        self._maybe_execute(p, execute)
        self.proposals[p.id] = p
        return p

    def confirm(self, proposal_id: int, owner: bytes, execute=None) -> Proposal:
        self._require_owner(owner)
        p = self.proposals.get(proposal_id)
        if p is None:
            raise UnknownProposal(f"no proposal {proposal_id}")
        if p.executed:
            raise AlreadyExecuted(f"proposal {proposal_id} already executed")
        before = set(p.confirmations)
        p.confirmations.add(owner)
        try:
            self._maybe_execute(p, execute)
        except Exception:
            p.confirmations = before
            raise
        return p

    @property
    def next_id(self) -> int:
        return len(self.proposals)
