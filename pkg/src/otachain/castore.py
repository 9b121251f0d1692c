"""Content-addressed firmware store.

Content is split into ``chunk_size`` leaves and folded bottom-up into
interior nodes of at most 64 children. A node is ``kind || payload`` with
kind 0x00 (leaf, raw bytes) or 0x01 (interior, concatenated 32-byte child
digests); its digest is the SHA-256 of that encoding and the root digest
is the ContentId. Single-leaf content is addressed by the leaf itself.
"""

import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

from .encoding import sha256
from .errors import StoreError

LEAF = 0x00
INTERIOR = 0x01
FANOUT = 64
DEFAULT_CHUNK_SIZE = 256 * 1024
DIGEST_LEN = 32


class NotFound(StoreError):
    pass


class Tampered(StoreError):
    def __init__(self, node: bytes, msg: str = "digest mismatch"):
        super().__init__(f"node {node.hex()}: {msg}")
        self.node = node


def leaf_node(chunk: bytes) -> bytes:
    return bytes([LEAF]) + chunk


def interior_node(children: Sequence[bytes]) -> bytes:
    return bytes([INTERIOR]) + b"".join(children)


def build_dag(content: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE) -> Tuple[bytes, List[Tuple[bytes, bytes]]]:
    """Return (root digest, [(digest, node bytes), ...]) without storing anything."""
    if chunk_size <= 0:
        raise ValueError("chunk_size must be positive")
    nodes = []
    level = []
    chunks = [content[i:i + chunk_size] for i in range(0, len(content), chunk_size)] or [b""]
    for c in chunks:
        n = leaf_node(c)
        d = sha256(n)
        nodes.append((d, n))
        level.append(d)
    while len(level) > 1:
        parents = []
        for i in range(0, len(level), FANOUT):
            n = interior_node(level[i:i + FANOUT])
            d = sha256(n)
            nodes.append((d, n))
            parents.append(d)
        level = parents
    return level[0], nodes


class MemoryBackend:
    def __init__(self):
        self._nodes = {}

    def read(self, digest: bytes) -> Optional[bytes]:
        return self._nodes.get(digest)

    def write(self, digest: bytes, node: bytes) -> None:
        self._nodes[digest] = bytes(node)

    def __contains__(self, digest) -> bool:
        return digest in self._nodes

    def keys(self) -> Iterator[bytes]:
        return iter(list(self._nodes))


class DirectoryBackend:
    """One file per node, named by lowercase hex digest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: bytes) -> Path:
        return self.root / digest.hex()

    def read(self, digest: bytes) -> Optional[bytes]:
        try:
            return self._path(digest).read_bytes()
        except FileNotFoundError:
            return None

    def write(self, digest: bytes, node: bytes) -> None:
        # atomic per node: visible only once fully written
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(node)
        os.replace(tmp, self._path(digest))

    def __contains__(self, digest) -> bool:
        return self._path(digest).exists()

    def keys(self) -> Iterator[bytes]:
        for p in sorted(self.root.iterdir()):
            if not p.name.startswith("."):
                yield bytes.fromhex(p.name)


class ContentStore:
    def __init__(self, root=None, chunk_size: int = DEFAULT_CHUNK_SIZE, peers: Iterable["ContentStore"] = ()):
        self.chunk_size = chunk_size
        self.backend = DirectoryBackend(root) if root is not None else MemoryBackend()
        self.peers = list(peers)
        self._write_lock = threading.Lock()

    def put(self, content: bytes) -> bytes:
        root, nodes = build_dag(bytes(content), self.chunk_size)
        with self._write_lock:
            for d, n in nodes:
                if d not in self.backend:
                    self.backend.write(d, n)
        return root

    def has(self, cid: bytes) -> bool:
        return cid in self.backend

    def _node(self, digest: bytes) -> bytes:
        """Fetch a node locally or from a peer; verify before returning."""
        raw = self.backend.read(digest)
        if raw is None:
            for peer in self.peers:
                raw = peer.backend.read(digest)
                if raw is not None:
                    break
        if raw is None:
            raise NotFound(f"node {digest.hex()} not found")
        if sha256(raw) != digest:
            raise Tampered(digest)
        if not raw or raw[0] not in (LEAF, INTERIOR):
            raise Tampered(digest, "unknown node kind")
        if raw[0] == INTERIOR:
            body = len(raw) - 1
            if body == 0 or body % DIGEST_LEN or body > FANOUT * DIGEST_LEN:
                raise Tampered(digest, "malformed interior node")
        return raw

    @staticmethod
    def _children(node: bytes) -> List[bytes]:
        body = node[1:]
        return [body[i:i + DIGEST_LEN] for i in range(0, len(body), DIGEST_LEN)]

    def iter_leaves(self, cid: bytes) -> Iterator[bytes]:
        stack = [cid]
        while stack:
            d = stack.pop()
            node = self._node(d)
            if node[0] == LEAF:
                yield node[1:]
            else:
                stack.extend(reversed(self._children(node)))

    def get(self, cid: bytes) -> bytes:
        return b"".join(self.iter_leaves(cid))

    def verify(self, cid: bytes) -> int:
        """Walk the whole DAG verifying every node; return the content size."""
        return sum(len(c) for c in self.iter_leaves(cid))

    def height(self, cid: bytes) -> int:
        h, d = 1, cid
        while True:
            node = self._node(d)
            if node[0] == LEAF:
                return h
            d = self._children(node)[0]
            h += 1

    def size(self, cid: bytes) -> int:
        """Content length, reading only the rightmost spine."""
        leaves_before = 0
        h = self.height(cid)
        d = cid
        while True:
            node = self._node(d)
            if node[0] == LEAF:
                return leaves_before * self.chunk_size + len(node) - 1
            h -= 1
            kids = self._children(node)
            leaves_before += (len(kids) - 1) * FANOUT ** (h - 1)
            d = kids[-1]

    def get_range(self, cid: bytes, start: int, end: int) -> bytes:
        """Bytes ``[start, end)`` fetching only the covering leaves.

        Leaf positions are computed from ``chunk_size``, so the content must
        have been stored with this store's chunk size.
        """
        if not 0 <= start <= end:
            raise ValueError("bad range")
        if start == end:
            return b""
        cs = self.chunk_size
        first, last = start // cs, (end - 1) // cs
        out = []

        def walk(d, h, leaf_base):
            node = self._node(d)
            if node[0] == LEAF:
                if h != 1:
                    raise Tampered(d, "leaf at interior depth")
                out.append((leaf_base, node[1:]))
                return
            span = FANOUT ** (h - 2)
            for i, child in enumerate(self._children(node)):
                lo = leaf_base + i * span
                hi = lo + span - 1
                if hi >= first and lo <= last:
                    walk(child, h - 1, lo)

        walk(cid, self.height(cid), 0)
        data = b"".join(chunk for _, chunk in out)
        if any(len(chunk) != cs for _, chunk in out[:-1]):
            raise ValueError("content was not stored with this chunk size")
        offset = first * cs
        piece = data[start - offset:end - offset]
        if len(piece) != end - start:
            raise ValueError(f"range [{start},{end}) exceeds content")
        return piece

    def node_count(self, cid: bytes) -> Tuple[int, int]:
        """(leaves, interior nodes) reachable from ``cid``."""
        leaves = interior = 0
        stack = [cid]
        while stack:
            node = self._node(stack.pop())
            if node[0] == LEAF:
                leaves += 1
            else:
                interior += 1
                stack.extend(self._children(node))
        return leaves, interior

    def dag_bytes(self, cid: bytes) -> int:
        total = 0
        stack = [cid]
        while stack:
            node = self._node(stack.pop())
            total += len(node)
            if node[0] == INTERIOR:
                stack.extend(self._children(node))
        return total


# -- fetch latency model -----------------------------------------------------

@dataclass(frozen=True)
class PeerEndpoint:
    name: str
    one_way_latency: float  # ms
    bandwidth: float  # bytes/s
    holds: FrozenSet[bytes] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.one_way_latency < 0:
            raise ValueError("latency must be >= 0")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0")

    def holding(self, *cids: bytes) -> "PeerEndpoint":
        return PeerEndpoint(self.name, self.one_way_latency, self.bandwidth,
                            self.holds | frozenset(cids))


@dataclass(frozen=True)
class FetchTiming:
    content: bytes
    content_ms: float
    direct_ms: float
    peer: str


def direct_time_ms(size: int, origin: PeerEndpoint) -> float:
    return 2 * origin.one_way_latency + size / origin.bandwidth * 1000


def content_time_ms(levels: int, dag_bytes: int, peer: PeerEndpoint) -> float:
    # one round trip per DAG level (children are unknown until the parent
    # arrives); within a level requests are pipelined, so transfer is
    # bandwidth-bound after the first round trip
    return levels * 2 * peer.one_way_latency + dag_bytes / peer.bandwidth * 1000


def fetch_timed(store: ContentStore, cid: bytes, peers: Sequence[PeerEndpoint],
                origin: PeerEndpoint) -> FetchTiming:
    if cid not in origin.holds:
        raise NotFound(f"origin {origin.name} does not hold {cid.hex()}")
    holders = [p for p in peers if cid in p.holds]
    if not holders:
        raise NotFound(f"no peer holds {cid.hex()}")
    best = min(holders, key=lambda p: (p.one_way_latency, -p.bandwidth, p.name))
    content = store.get(cid)
    ca = content_time_ms(store.height(cid), store.dag_bytes(cid), best)
    return FetchTiming(content, ca, direct_time_ms(len(content), origin), best.name)


def load_latency_config(path) -> Tuple[List[PeerEndpoint], List[PeerEndpoint]]:
    """Parse ``name latency_ms bandwidth_Bps [origin|peer]`` lines.

    Returns (origins, peers). Blank lines and ``#`` comments are ignored.
    """
    origins, peers = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ValueError(f"{path}:{lineno}: expected 'name latency_ms bandwidth_Bps [role]'")
        role = parts[3] if len(parts) == 4 else "origin"
        ep = PeerEndpoint(parts[0], float(parts[1]), float(parts[2]))
        if role == "origin":
            origins.append(ep)
        elif role == "peer":
            peers.append(ep)
        else:
            raise ValueError(f"{path}:{lineno}: unknown role {role!r}")
    return origins, peers
