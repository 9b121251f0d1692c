"""Fleet harness for the three update topologies.

edge-cloud          every device polls the registry and downloads from the
                    cloud store itself
gateway-cloud       the cloud decides: it walks the fleet and triggers each
                    device's update cycle (push)
edge-gateway-cloud  a gateway polls once, fetches and verifies the image into
                    its own store; devices download from the gateway

Devices always verify the image against the registry digest, whichever store
served it.
"""

import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List

from .castore import ContentStore
from .device_agent import DeviceState, provision, run_update
from .encoding import sha256
from .errors import OtaError
from .ledger import ChainConfig, Ledger
from .multisig import OwnerSet, derive_owner
from .registry import FirmwareRecord, RegistryClient, RegistryContract, deploy, submit_publish

TOPOLOGIES = ("edge-cloud", "gateway-cloud", "edge-gateway-cloud")


class CountingStore:
    """Wraps a store and counts full downloads served."""

    def __init__(self, inner: ContentStore):
        self.inner = inner
        self.downloads = 0
        self.bytes_served = 0
        self._lock = threading.Lock()

    def get(self, cid):
        data = self.inner.get(cid)
        with self._lock:
            self.downloads += 1
            self.bytes_served += len(data)
        return data

    def __getattr__(self, name):
        return getattr(self.inner, name)


class CountingRegistry:
    def __init__(self, inner):
        self.inner = inner
        self.queries = 0
        self._lock = threading.Lock()

    def _count(self):
        with self._lock:
            self.queries += 1

    def get_latest(self, product_id):
        self._count()
        return self.inner.get_latest(product_id)

    def get_version(self, product_id, version):
        self._count()
        return self.inner.get_version(product_id, version)


@dataclass
class FleetReport:
    topology: str
    devices: int
    updated: int
    failed: int
    origin_downloads: int
    origin_bytes: int
    registry_queries: int
    versions: Dict[int, int] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["versions"] = {str(k): v for k, v in sorted(self.versions.items())}
        return d


def _update_all(devices, registry, store, workers) -> List[str]:
    errors = []

    def one(dev):
        try:
            run_update(dev, registry, store)
        except OtaError as e:
            errors.append(f"{e.family}: {e.name}: {e}")

    with ThreadPoolExecutor(max_workers=workers) as ex:
        list(ex.map(one, devices))
    return errors


def simulate_fleet(n_devices: int, topology: str = "edge-cloud", firmware_size: int = 16 * 1024,
                   partition_size: int = 32 * 1024, seed: int = 1, workers: int = 8) -> FleetReport:
    if topology not in TOPOLOGIES:
        raise ValueError(f"topology must be one of {TOPOLOGIES}")
    rng = random.Random(seed)
    root = sha256(f"fleet:{seed}".encode())
    owners = [derive_owner(root, i) for i in range(3)]
    ledger = Ledger(RegistryContract(), ChainConfig(block_interval=15))
    deploy(ledger, owners[0], OwnerSet.from_root(root))
    ledger.advance_block(15)

    cloud = ContentStore(chunk_size=4096)
    factory = rng.randbytes(firmware_size)
    firmware = rng.randbytes(firmware_size)
    cid = cloud.put(firmware)
    rec = FirmwareRecord("sensor", 1, cid, sha256(firmware), "esp-stm32")
    submit_publish(ledger, rec, owners[:2])
    ledger.advance_block(30)

    devices: List[DeviceState] = [
        provision("sensor", "esp-stm32", factory, partition_size, 0, rng_seed=seed * 1000 + i)
        for i in range(n_devices)
    ]
    registry = CountingRegistry(RegistryClient(ledger))
    origin = CountingStore(cloud)

    if topology == "edge-cloud":
        errors = _update_all(devices, registry, origin, workers)
    elif topology == "gateway-cloud":
        # the cloud pushes: it iterates the fleet itself, one device at a time
        errors = _update_all(devices, registry, origin, 1)
    else:
        latest = registry.get_latest("sensor")
        gateway = ContentStore(chunk_size=cloud.chunk_size)
        data = origin.get(latest.content_id)
        if sha256(data) != latest.firmware_digest:
            raise OtaError("gateway fetched an image that fails the registry digest")
        gateway.put(data)
        errors = _update_all(devices, registry, gateway, workers)

    versions: Dict[int, int] = {}
    for d in devices:
        versions[d.installed_version] = versions.get(d.installed_version, 0) + 1
    updated = sum(1 for d in devices if d.installed_version == rec.version)
    return FleetReport(topology, n_devices, updated, n_devices - updated, origin.downloads,
                       origin.bytes_served, registry.queries, versions, errors)
