"""Desk-scale versions of the registry timing and download latency experiments.

Timings run on the simulated clock. The node's RPC cost is a small synthetic
model: every client call pays one round trip, and calls that execute contract
code against state (getters, receipt and code lookups) also pay an execution
cost. Block waits come from the real ledger scheduler.
"""

import csv
import io
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

from .castore import ContentStore, PeerEndpoint, fetch_timed
from .encoding import sha256
from .errors import BenchError
from .ledger import ChainConfig, Ledger
from .multisig import OwnerSet, derive_owner
from .registry import (
    FirmwareRecord,
    RegistryContract,
    confirm_action,
    deploy_action,
    propose_action,
    publish_action,
    signed,
)


class ReportError(BenchError):
    pass


@dataclass(frozen=True)
class RpcModel:
    round_trip: float = 0.4  # s, synthetic
    call_execution: float = 0.3  # s, synthetic

    @property
    def read_cost(self) -> float:
        return self.round_trip + self.call_execution


@dataclass(frozen=True)
class TimingReport:
    deploy_delay: float
    call_submit_delay: float
    confirm_delay: float
    getter_delay: float
    getter_wall_ms: float
    block_interval: float

    def ordering_holds(self) -> bool:
        return (self.deploy_delay >= self.confirm_delay > self.getter_delay
                > self.call_submit_delay)


class _Client:
    """A client driving a ledger on the simulated clock."""

    def __init__(self, ledger: Ledger, rpc: RpcModel):
        self.ledger = ledger
        self.rpc = rpc
        self.t = ledger.now

    def submit(self, tx) -> float:
        start = self.t
        self.ledger.submit_transaction(tx)
        self._arrival = self.t + self.rpc.round_trip / 2
        self.t += self.rpc.round_trip
        return self.t - start

    def wait_confirmed(self, tx_id) -> None:
        led = self.ledger
        led.advance_block(led.next_block_time(self._arrival))
        while led.receipt(tx_id) is None:
            led.advance_block(led.now + led.config.block_interval)
        self.t = max(self.t, led.now) + self.rpc.read_cost  # receipt lookup

    def read(self) -> float:
        self.t += self.rpc.read_cost
        return self.rpc.read_cost

    def align_to_block(self) -> None:
        """Move to just after a block is produced, so waits span a full interval."""
        led = self.ledger
        led.advance_block(led.next_block_time(self.t))
        self.t = led.now


def run_ledger_timing(config: ChainConfig, rpc: RpcModel = RpcModel(), seed: int = 7) -> TimingReport:
    root = sha256(f"bench-root:{seed}".encode())
    owners = [derive_owner(root, i) for i in range(3)]
    ledger = Ledger(RegistryContract(), config)
    c = _Client(ledger, rpc)

    # deploy: submit at a block boundary, wait for confirmation, then check the code
    t0 = c.t
    tx = signed(ledger, owners[0], deploy_action(OwnerSet.from_root(root, 3, 2)))
    c.submit(tx)
    c.wait_confirmed(tx.tx_id)
    c.read()
    deploy = c.t - t0

    c.align_to_block()
    record = FirmwareRecord("bench", 1, sha256(b"cid"), sha256(b"fw"), "model")
    t1 = c.t
    tx = signed(ledger, owners[0], propose_action(publish_action(record)))
    submit = c.submit(tx)
    c.wait_confirmed(tx.tx_id)
    confirm = c.t - t1
    tx = signed(ledger, owners[1], confirm_action(0))
    c.submit(tx)
    c.wait_confirmed(tx.tx_id)

    w0 = time.perf_counter()
    got = ledger.query(("get_latest", "bench"))
    wall_ms = (time.perf_counter() - w0) * 1000
    if got != record:
        raise BenchError("published record not visible to the getter")
    getter = c.read()
    return TimingReport(deploy, submit, confirm, getter, wall_ms, config.block_interval)


# -- latency comparison ------------------------------------------------------

@dataclass(frozen=True)
class LatencyScenario:
    origin: PeerEndpoint
    peers: tuple
    payload_size: int

    def __post_init__(self):
        if not self.peers:
            raise ValueError("a scenario needs at least one peer")
        if self.payload_size < 1:
            raise ValueError("payload must be at least 1 byte")

    @property
    def name(self) -> str:
        return self.origin.name


@dataclass(frozen=True)
class LatencyRow:
    scenario: str
    payload_bytes: int
    direct_ms: float
    content_ms: float


# Synthetic endpoints: a caller in San Francisco, origins at increasing
# distance, one content peer held constant nearby. Not measured values.
DEFAULT_ORIGINS = (
    PeerEndpoint("san-francisco", 2.0, 12.5e6),
    PeerEndpoint("los-angeles", 9.0, 12.5e6),
    PeerEndpoint("new-york", 45.0, 12.5e6),
    PeerEndpoint("frankfurt", 75.0, 12.5e6),
)
DEFAULT_PEERS = (PeerEndpoint("nearby-peer", 20.0, 12.5e6),)
DEFAULT_PAYLOAD = 1024 * 1024


def payload(size: int, seed: int = 5) -> bytes:
    return random.Random(seed).randbytes(size)


def default_scenarios(payload_size: int = DEFAULT_PAYLOAD, origins=DEFAULT_ORIGINS,
                      peers=DEFAULT_PEERS) -> List[LatencyScenario]:
    return [LatencyScenario(o, tuple(peers), payload_size) for o in origins]


def _run_one(scn: LatencyScenario, chunk_size: int) -> LatencyRow:
    store = ContentStore(chunk_size=chunk_size)
    cid = store.put(payload(scn.payload_size))
    t = fetch_timed(store, cid, [p.holding(cid) for p in scn.peers], scn.origin.holding(cid))
    return LatencyRow(scn.name, scn.payload_size, t.direct_ms, t.content_ms)


def run_latency_bench(scenarios: Sequence[LatencyScenario], chunk_size: int = 256 * 1024,
                      workers: int = 4) -> List[LatencyRow]:
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda s: _run_one(s, chunk_size), scenarios))


def crossover_indices(rows: Sequence[LatencyRow]) -> List[int]:
    """Indices where the faster path flips from direct to content-addressed."""
    faster = [r.content_ms < r.direct_ms for r in rows]
    return [i for i in range(1, len(rows)) if faster[i] and not faster[i - 1]]


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "payload_bytes", "direct_ms", "content_ms"])
    for r in rows:
        w.writerow([r.scenario, r.payload_bytes, f"{r.direct_ms:.3f}", f"{r.content_ms:.3f}"])
    return buf.getvalue()


def _dat_text(rows) -> str:
    lines = ["# index scenario direct_ms content_ms"]
    for i, r in enumerate(rows):
        lines.append(f"{i} {r.scenario} {r.direct_ms:.3f} {r.content_ms:.3f}")
    return "\n".join(lines) + "\n"


def emit_report(rows: Sequence[LatencyRow], out_dir, stem: str = "latency") -> List[Path]:
    if not rows:
        raise ReportError("refusing to write an empty report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path, dat_path = out / f"{stem}.csv", out / f"{stem}.dat"
        csv_path.write_text(_csv_text(rows))
        dat_path.write_text(_dat_text(rows))
    except OSError as e:
        raise ReportError(str(e)) from e
    return [csv_path, dat_path]
