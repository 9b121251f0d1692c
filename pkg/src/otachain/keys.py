"""Elliptic-curve keys, deterministic signatures and addresses.

One curve (NIST P-256) is used everywhere: ledger transactions, owner keys
and the secure element. Signatures use RFC 6979 deterministic nonces and are
serialized as 64 raw bytes (r || s).
"""

from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    Prehashed,
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .encoding import sha256

CURVE = ec.SECP256R1()
CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
ADDRESS_LEN = 20
SIGNATURE_LEN = 64
PUBLIC_KEY_LEN = 65

_ALG = ec.ECDSA(Prehashed(hashes.SHA256()), deterministic_signing=True)


def address_of(public_key: bytes) -> bytes:
    """Last 20 bytes of SHA-256 over the uncompressed public point."""
    return sha256(public_key)[-ADDRESS_LEN:]


def load_public(public_key: bytes) -> ec.EllipticCurvePublicKey:
    # raises ValueError for points not on the curve
    return ec.EllipticCurvePublicKey.from_encoded_point(CURVE, bytes(public_key))


def encode_public(key: ec.EllipticCurvePublicKey) -> bytes:
    return key.public_bytes(Encoding.X962, PublicFormat.UncompressedPoint)


def private_from_secret(secret: int) -> ec.EllipticCurvePrivateKey:
    if not 0 < secret < CURVE_ORDER:
        raise ValueError("secret scalar out of range")
    return ec.derive_private_key(secret, CURVE)


def scalar_from_bytes(raw: bytes) -> int:
    """Map 32 bytes of key material to a valid P-256 scalar."""
    s = int.from_bytes(raw, "big") % CURVE_ORDER
    if s == 0:
        raise ValueError("degenerate key material")
    return s


def sign_digest(key: ec.EllipticCurvePrivateKey, digest: bytes) -> bytes:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    r, s = decode_dss_signature(key.sign(digest, _ALG))
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify_signature(public_key: bytes, digest: bytes, signature: bytes) -> bool:
    if len(signature) != SIGNATURE_LEN or len(digest) != 32:
        return False
    r = int.from_bytes(signature[:32], "big")
    s = int.from_bytes(signature[32:], "big")
    if not (0 < r < CURVE_ORDER and 0 < s < CURVE_ORDER):
        return False
    try:
        pub = load_public(public_key)
        pub.verify(encode_dss_signature(r, s), digest, _ALG)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class KeyPair:
    private: ec.EllipticCurvePrivateKey = field(repr=False)
    public: bytes
    address: bytes

    @classmethod
    def from_secret(cls, secret: int) -> "KeyPair":
        priv = private_from_secret(secret)
        pub = encode_public(priv.public_key())
        return cls(priv, pub, address_of(pub))

    def sign(self, digest: bytes) -> bytes:
        return sign_digest(self.private, digest)
