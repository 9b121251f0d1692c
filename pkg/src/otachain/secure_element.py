"""Software model of an ATECC608a-style crypto co-processor.

Sixteen slots hold private keys, reference digests or certificates. Private
keys never leave the element; locked slots can neither be read nor changed.
Entropy is injectable so key generation is reproducible in tests.
"""

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Tuple, Union

from cryptography.hazmat.primitives.asymmetric import ec

from .errors import ElementError
from .keys import encode_public, load_public, private_from_secret, scalar_from_bytes, sign_digest

SLOT_COUNT = 16
FILE_MARKER = "# SIMULATION ONLY - private keys stored in clear, not for real devices"

EMPTY = "empty"
PRIVATE_KEY = "private-key"
DIGEST = "stored-digest"
CERTIFICATE = "certificate"


class BadSlot(ElementError):
    pass


class SlotLocked(ElementError):
    pass


class WrongSlotKind(ElementError):
    pass


class OutOfBounds(ElementError):
    pass


class InvalidPeerKey(ElementError):
    pass


class WindowMismatch(ElementError):
    pass


@dataclass(frozen=True)
class Attestation:
    slot: int
    data_digest: bytes
    matched: bool


class _Slot:
    __slots__ = ("kind", "value", "window", "locked")

    def __init__(self):
        self.kind = EMPTY
        self.value = None  # int scalar | bytes
        self.window: Optional[Tuple[int, int]] = None
        self.locked = False


def seeded_entropy(seed: int) -> Callable[[int], bytes]:
    """Deterministic entropy stream (SHA-256 in counter mode)."""
    counter = [0]

    def draw(n: int) -> bytes:
        out = b""
        while len(out) < n:
            out += hashlib.sha256(f"{seed}:{counter[0]}".encode()).digest()
            counter[0] += 1
        return out[:n]

    return draw


def sha256(data: Union[bytes, Iterable[bytes]]) -> bytes:
    h = hashlib.sha256()
    if isinstance(data, (bytes, bytearray, memoryview)):
        h.update(data)
    else:
        for part in data:
            h.update(part)
    return h.digest()


class SecureElement:
    def __init__(self, entropy: Callable[[int], bytes] = None):
        self._entropy = entropy or os.urandom
        self._slots = [_Slot() for _ in range(SLOT_COUNT)]

    def _slot(self, index: int) -> _Slot:
        if not isinstance(index, int) or not 0 <= index < SLOT_COUNT:
            raise BadSlot(f"slot {index} outside 0..{SLOT_COUNT - 1}")
        return self._slots[index]

    def _writable(self, index: int) -> _Slot:
        s = self._slot(index)
        if s.locked:
            raise SlotLocked(f"slot {index} is locked")
        return s

    def _key(self, index: int) -> ec.EllipticCurvePrivateKey:
        s = self._slot(index)
        if s.kind != PRIVATE_KEY:
            raise WrongSlotKind(f"slot {index} holds {s.kind}, not a private key")
        return private_from_secret(s.value)

    # -- keys --------------------------------------------------------------

    def generate_key(self, slot: int) -> bytes:
        s = self._writable(slot)
        s.kind, s.value, s.window = PRIVATE_KEY, scalar_from_bytes(self._entropy(32)), None
        return self.public_key(slot)

    def public_key(self, slot: int) -> bytes:
        return encode_public(self._key(slot).public_key())

    def sign(self, slot: int, digest: bytes) -> bytes:
        return sign_digest(self._key(slot), digest)

    def key_agree(self, slot: int, peer_public: bytes) -> bytes:
        key = self._key(slot)
        try:
            peer = load_public(peer_public)
        except (ValueError, TypeError) as e:
            raise InvalidPeerKey(str(e)) from e
        return key.exchange(ec.ECDH(), peer)

    # -- digests, certificates ---------------------------------------------

    @staticmethod
    def sha256(data) -> bytes:
        return sha256(data)

    def store_digest(self, slot: int, digest: bytes, then_lock: bool = False,
                     window: Tuple[int, int] = None) -> None:
        if len(digest) != 32:
            raise ValueError("digest must be 32 bytes")
        s = self._writable(slot)
        s.kind, s.value, s.window = DIGEST, bytes(digest), window
        s.locked = bool(then_lock)

    def store_certificate(self, slot: int, cert: bytes, then_lock: bool = False) -> None:
        s = self._writable(slot)
        s.kind, s.value, s.window = CERTIFICATE, bytes(cert), None
        s.locked = bool(then_lock)

    def lock(self, slot: int) -> None:
        self._slot(slot).locked = True

    def is_locked(self, slot: int) -> bool:
        return self._slot(slot).locked

    def slot_kind(self, slot: int) -> str:
        return self._slot(slot).kind

    def slot_window(self, slot: int) -> Optional[Tuple[int, int]]:
        return self._slot(slot).window

    def read_slot(self, slot: int) -> bytes:
        s = self._slot(slot)
        if s.kind == PRIVATE_KEY:
            raise WrongSlotKind(f"slot {slot}: private keys are not readable")
        if s.locked:
            raise SlotLocked(f"slot {slot} is locked")
        if s.kind == EMPTY:
            raise WrongSlotKind(f"slot {slot} is empty")
        return s.value

    def check_boot_sector(self, slot: int, flash, sector_start: int, sector_len: int) -> Attestation:
        s = self._slot(slot)
        if s.kind != DIGEST:
            raise WrongSlotKind(f"slot {slot} holds {s.kind}, not a digest")
        if sector_start < 0 or sector_len < 0 or sector_start + sector_len > len(flash):
            raise OutOfBounds(f"window [{sector_start}, {sector_start + sector_len}) "
                              f"outside flash of {len(flash)} bytes")
        if s.window is not None and s.window != (sector_start, sector_len):
            raise WindowMismatch(f"slot {slot} covers {s.window}, "
                                 f"not {(sector_start, sector_len)}")
        d = sha256(memoryview(flash)[sector_start:sector_start + sector_len])
        return Attestation(slot, d, d == s.value)

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        slots = []
        for s in self._slots:
            value = s.value
            if s.kind == PRIVATE_KEY:
                value = format(value, "064x")
            elif value is not None:
                value = value.hex()
            slots.append({"kind": s.kind, "value": value,
                          "window": list(s.window) if s.window else None,
                          "locked": s.locked})
        return {"slots": slots}

    @classmethod
    def from_dict(cls, d: dict, entropy=None) -> "SecureElement":
        el = cls(entropy)
        if len(d["slots"]) != SLOT_COUNT:
            raise ValueError(f"expected {SLOT_COUNT} slots")
        for s, raw in zip(el._slots, d["slots"]):
            s.kind = raw["kind"]
            if s.kind == PRIVATE_KEY:
                s.value = int(raw["value"], 16)
            elif raw["value"] is not None:
                s.value = bytes.fromhex(raw["value"])
            s.window = tuple(raw["window"]) if raw["window"] else None
            s.locked = raw["locked"]
        return el

    def save(self, path) -> None:
        Path(path).write_text(FILE_MARKER + "\n" + json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path, entropy=None) -> "SecureElement":
        text = Path(path).read_text()
        header, _, body = text.partition("\n")
        if header != FILE_MARKER:
            raise ValueError("missing simulation marker")
        return cls.from_dict(json.loads(body), entropy)
