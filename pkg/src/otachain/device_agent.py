"""Edge-device update agent.

The host flash holds two equally sized partitions, A and B. Updates are
written to the inactive partition, re-hashed in place, registered with the
secure element, and only then made active by a single atomic commit of the
boot control record. A power loss at any step before that commit leaves the
previous image active and bootable.

Fault injection counts every persistent side effect as one step: each
programmed byte, each sector erase, each secure-element slot write and each
boot control commit. ``FaultInjector(crash_at=k)`` lets exactly ``k`` steps
complete and then raises ``PowerLoss``.
"""

import base64
import hashlib
import json
import logging
import random
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .castore import NotFound as StoreNotFound
from .castore import Tampered
from .errors import AgentError, OtaError
from .registry import FirmwareRecord
from .registry import NotFound as RegistryNotFound
from .secure_element import Attestation, SecureElement, seeded_entropy, sha256

log = logging.getLogger(__name__)

SECTOR_SIZE = 1024
ERASED = 0xFF
PARTITIONS = ("A", "B")

DEVICE_KEY_SLOT = 0
CERT_SLOT = 1
FULL_SLOT = {"A": 2, "B": 6}
SECTOR_SLOTS = {"A": (3, 4, 5), "B": (7, 8, 9)}


class RegistryUnavailable(AgentError):
    pass


class DownloadFailed(AgentError):
    pass


class DigestMismatch(AgentError):
    pass


class InsufficientSpace(AgentError):
    pass


class WriteFailure(AgentError):
    pass


class BadPlan(AgentError):
    pass


class PowerLoss(Exception):
    """Injected crash. Not an OtaError: it models the device losing power."""


class FaultInjector:
    def __init__(self, crash_at: Optional[int] = None):
        self.crash_at = crash_at
        self.steps = 0

    def allow(self, n: int) -> int:
        """Consume up to ``n`` steps; return how many may complete."""
        if self.crash_at is None:
            self.steps += n
            return n
        k = max(0, min(n, self.crash_at - self.steps))
        self.steps += k
        return k

    def step(self) -> None:
        if self.allow(1) < 1:
            raise PowerLoss(f"power lost at step {self.steps}")


class Flash:
    """NOR-style flash: erase sets a sector to 0xFF, programming clears bits."""

    def __init__(self, size: int, data: bytes = None):
        if size % SECTOR_SIZE:
            raise ValueError("flash size must be a multiple of the sector size")
        self.data = bytearray(data) if data is not None else bytearray([ERASED]) * size
        if len(self.data) != size:
            raise ValueError("flash image size mismatch")

    def __len__(self):
        return len(self.data)

    def erase_sector(self, addr: int, faults: FaultInjector) -> None:
        if addr % SECTOR_SIZE or not 0 <= addr < len(self.data):
            raise ValueError(f"bad sector address {addr:#x}")
        faults.step()
        self.data[addr:addr + SECTOR_SIZE] = bytes([ERASED]) * SECTOR_SIZE

    def program(self, addr: int, payload: bytes, faults: FaultInjector) -> None:
        n = len(payload)
        if addr < 0 or addr + n > len(self.data):
            raise ValueError("program outside flash")
        k = faults.allow(n)
        if k:
            old = int.from_bytes(self.data[addr:addr + k], "big")
            new = int.from_bytes(payload[:k], "big")
            self.data[addr:addr + k] = (old & new).to_bytes(k, "big")
        if k < n:
            raise PowerLoss(f"power lost after {k} of {n} bytes at {addr:#x}")

    def read(self, addr: int, n: int) -> bytes:
        return bytes(self.data[addr:addr + n])


@dataclass(frozen=True)
class PartitionInfo:
    valid: bool = False
    version: int = 0
    length: int = 0
    digest: bytes = bytes(32)
    checks: int = 0  # number of sector windows registered with the element


@dataclass(frozen=True)
class BootControl:
    active: str = "A"
    a: PartitionInfo = PartitionInfo()
    b: PartitionInfo = PartitionInfo()
    boot_count: int = 0

    def info(self, p: str) -> PartitionInfo:
        return self.a if p == "A" else self.b

    def with_info(self, p: str, info: PartitionInfo) -> "BootControl":
        return replace(self, a=info) if p == "A" else replace(self, b=info)


def other(p: str) -> str:
    return "B" if p == "A" else "A"


@dataclass
class DeviceState:
    product_id: str
    target_model: str
    partition_size: int
    flash: Flash
    boot: BootControl
    element: SecureElement
    rng_seed: int = 0

    @property
    def active(self) -> str:
        return self.boot.active

    @property
    def installed_version(self) -> int:
        return self.boot.info(self.active).version

    @property
    def boot_valid(self) -> dict:
        return {p: self.boot.info(p).valid for p in PARTITIONS}

    def offset(self, p: str) -> int:
        return 0 if p == "A" else self.partition_size

    def image(self, p: str = None) -> bytes:
        p = p or self.active
        return self.flash.read(self.offset(p), self.boot.info(p).length)

    def commit(self, boot: BootControl, faults: FaultInjector = None) -> None:
        # a single step: the boot control record is replaced atomically
        if faults is not None:
            faults.step()
        self.boot = boot


@dataclass(frozen=True)
class UpdatePlan:
    record: FirmwareRecord
    mode: str = "full"
    start: Optional[int] = None
    end: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("full", "partial"):
            raise BadPlan(f"unknown mode {self.mode!r}")
        if self.mode == "partial":
            if self.start is None or self.end is None or not 0 <= self.start < self.end:
                raise BadPlan("partial plans need 0 <= start < end")


def partial_plan(plan: UpdatePlan, state: DeviceState, start: int, end: int) -> UpdatePlan:
    if end > state.partition_size:
        raise BadPlan(f"range end {end:#x} beyond partition size {state.partition_size:#x}")
    return replace(plan, mode="partial", start=start, end=end)


@dataclass(frozen=True)
class BootDecision:
    action: str  # boot | rollback | recovery
    partition: Optional[str]
    version: Optional[int]
    attestation: Optional[Attestation] = None


# -- provisioning, persistence ---------------------------------------------

def provision(product_id: str, target_model: str, factory_image: bytes,
              partition_size: int, version: int = 0, rng_seed: int = 0,
              entropy=None) -> DeviceState:
    if partition_size % SECTOR_SIZE:
        raise ValueError("partition size must be sector aligned")
    if not 0 < len(factory_image) <= partition_size:
        raise InsufficientSpace("factory image does not fit")
    element = SecureElement(entropy or seeded_entropy(rng_seed))
    element.generate_key(DEVICE_KEY_SLOT)
    state = DeviceState(product_id, target_model, partition_size,
                        Flash(2 * partition_size), BootControl(), element, rng_seed)
    state.flash.program(0, factory_image, FaultInjector())
    checks = _register_digests(state, "A", factory_image, version, FaultInjector())
    info = PartitionInfo(True, version, len(factory_image), sha256(factory_image), checks)
    state.commit(state.boot.with_info("A", info))
    return state


def _flash_blob(data: bytes) -> str:
    return base64.b64encode(zlib.compress(bytes(data), 6)).decode()


def _info_dict(i: PartitionInfo) -> dict:
    return {"valid": i.valid, "version": i.version, "length": i.length,
            "digest": i.digest.hex(), "checks": i.checks}


def _info_from(d: dict) -> PartitionInfo:
    return PartitionInfo(d["valid"], d["version"], d["length"], bytes.fromhex(d["digest"]), d["checks"])


def state_to_dict(state: DeviceState) -> dict:
    b = state.boot
    return {
        "product_id": state.product_id,
        "target_model": state.target_model,
        "partition_size": state.partition_size,
        "rng_seed": state.rng_seed,
        "boot": {"active": b.active, "A": _info_dict(b.a), "B": _info_dict(b.b),
                 "boot_count": b.boot_count},
        "element": state.element.to_dict(),
        "flash": _flash_blob(state.flash.data),
    }


def state_from_dict(d: dict) -> DeviceState:
    flash = zlib.decompress(base64.b64decode(d["flash"]))
    b = d["boot"]
    boot = BootControl(b["active"], _info_from(b["A"]), _info_from(b["B"]), b["boot_count"])
    return DeviceState(d["product_id"], d["target_model"], d["partition_size"],
                       Flash(len(flash), flash), boot, SecureElement.from_dict(d["element"]),
                       d["rng_seed"])


def save_device(state: DeviceState, path) -> None:
    from .secure_element import FILE_MARKER
    Path(path).write_text(FILE_MARKER + "\n" + json.dumps(state_to_dict(state)) + "\n")


def load_device(path) -> DeviceState:
    _, _, body = Path(path).read_text().partition("\n")
    return state_from_dict(json.loads(body))


# -- update pipeline ---------------------------------------------------------

def check_for_update(state: DeviceState, registry) -> Optional[UpdatePlan]:
    try:
        rec = registry.get_latest(state.product_id)
    except RegistryNotFound:
        return None
    except (ConnectionError, TimeoutError, OSError) as e:
        raise RegistryUnavailable(str(e)) from e
    if rec.version <= state.installed_version:
        return None
    if rec.target_model != state.target_model:
        log.warning("IncompatibleModel: %s v%d targets %r, device is %r",
                    rec.product_id, rec.version, rec.target_model, state.target_model)
        return None
    return UpdatePlan(rec)


def _fetch(store, fn, *args):
    try:
        return fn(*args)
    except Tampered as e:
        raise DigestMismatch(f"store served tampered content: {e}") from e
    except (StoreNotFound, ValueError) as e:
        raise DownloadFailed(str(e)) from e
    except (ConnectionError, TimeoutError, OSError) as e:
        raise DownloadFailed(str(e)) from e


def download_and_verify(plan: UpdatePlan, store, state: DeviceState = None) -> bytes:
    """Fetch the planned image into the staging buffer and check its digest.

    Partial plans fetch only the leaves covering ``[start, end)`` and overlay
    them on a copy of the active image; the assembled image must hash to the
    record's digest.
    """
    rec = plan.record
    if plan.mode == "full":
        data = _fetch(store, store.get, rec.content_id)
    else:
        if state is None:
            raise BadPlan("partial download needs the device state")
        base = state.image()
        size = _fetch(store, store.size, rec.content_id)
        if size != len(base):
            raise BadPlan(f"partial update needs equal image sizes ({size} != {len(base)})")
        if plan.end > size:
            raise BadPlan("range beyond image")
        patch = _fetch(store, store.get_range, rec.content_id, plan.start, plan.end)
        data = base[:plan.start] + patch + base[plan.end:]
    if sha256(data) != rec.firmware_digest:
        raise DigestMismatch(f"{rec.product_id} v{rec.version}: content digest "
                             f"{sha256(data).hex()} != registry {rec.firmware_digest.hex()}")
    return data


def _windows(state: DeviceState, p: str, length: int, version: int):
    sectors = (length + SECTOR_SIZE - 1) // SECTOR_SIZE
    seed = hashlib.sha256(f"{state.rng_seed}:{p}:{version}:{length}".encode()).digest()
    picks = sorted(random.Random(seed).sample(range(sectors), min(len(SECTOR_SLOTS[p]), sectors)))
    base = state.offset(p)
    return [(base + s * SECTOR_SIZE, min(SECTOR_SIZE, length - s * SECTOR_SIZE)) for s in picks]


def _register_digests(state, p, image, version, faults) -> int:
    el = state.element
    faults.step()
    el.store_digest(FULL_SLOT[p], sha256(image), window=(state.offset(p), len(image)))
    windows = _windows(state, p, len(image), version)
    for slot, (start, n) in zip(SECTOR_SLOTS[p], windows):
        faults.step()
        el.store_digest(slot, sha256(state.flash.data[start:start + n]), window=(start, n))
    return len(windows)


def install_atomic(state: DeviceState, firmware: bytes, plan: UpdatePlan,
                   faults: FaultInjector = None) -> DeviceState:
    """Install ``firmware`` into the inactive partition and switch to it.

    Mutates ``state`` in place (it models persistent hardware) and returns it.
    """
    faults = faults or FaultInjector()
    rec = plan.record
    if sha256(firmware) != rec.firmware_digest:
        raise DigestMismatch("firmware was not verified against the record")
    if len(firmware) > state.partition_size:
        raise InsufficientSpace(f"{len(firmware)} bytes > partition {state.partition_size}")
    src, dst = state.active, other(state.active)
    base = state.offset(dst)
    old = state.image(src)
    if plan.mode == "partial":
        if plan.end > len(firmware) or len(firmware) != len(old):
            raise BadPlan("partial range does not fit the images")

    state.commit(state.boot.with_info(dst, PartitionInfo()), faults)
    for addr in range(base, base + len(firmware), SECTOR_SIZE):
        state.flash.erase_sector(addr, faults)
    if plan.mode == "full":
        state.flash.program(base, firmware, faults)
    else:
        state.flash.program(base, old[:plan.start], faults)
        state.flash.program(base + plan.start, firmware[plan.start:plan.end], faults)
        state.flash.program(base + plan.end, old[plan.end:], faults)

    written = state.flash.read(base, len(firmware))
    if sha256(written) != rec.firmware_digest:
        raise WriteFailure(f"partition {dst} re-hash does not match v{rec.version}")

    checks = _register_digests(state, dst, firmware, rec.version, faults)
    info = PartitionInfo(True, rec.version, len(firmware), rec.firmware_digest, checks)
    state.commit(replace(state.boot.with_info(dst, info), active=dst), faults)
    return state


def _sector_check(state: DeviceState, p: str, rng: random.Random) -> Optional[Attestation]:
    info = state.boot.info(p)
    if not info.valid or info.checks == 0:
        return None
    slot = rng.choice(SECTOR_SLOTS[p][:info.checks])
    window = state.element.slot_window(slot)
    if window is None:
        return None
    try:
        return state.element.check_boot_sector(slot, state.flash.data, *window)
    except OtaError:
        return None


def secure_boot(state: DeviceState) -> BootDecision:
    """Check one randomly chosen registered sector of the active partition.

    On mismatch, fall back to the other partition if it is flagged valid and
    passes its own check; otherwise halt in recovery.
    """
    seed = hashlib.sha256(f"boot:{state.rng_seed}:{state.boot.boot_count}".encode()).digest()
    rng = random.Random(seed)
    boot = replace(state.boot, boot_count=state.boot.boot_count + 1)
    p = boot.active
    att = _sector_check(state, p, rng)
    if att is not None and att.matched:
        state.commit(boot)
        return BootDecision("boot", p, boot.info(p).version, att)
    q = other(p)
    att_q = _sector_check(state, q, rng)
    if att_q is not None and att_q.matched:
        bad = replace(boot.info(p), valid=False)
        state.commit(replace(boot.with_info(p, bad), active=q))
        log.warning("secure boot: partition %s failed, rolled back to %s", p, q)
        return BootDecision("rollback", q, boot.info(q).version, att_q)
    state.commit(boot)
    log.error("secure boot: no valid partition, halting in recovery")
    return BootDecision("recovery", None, None, att)


restart = secure_boot


def attest_active(state: DeviceState) -> Attestation:
    p = state.active
    start, n = state.offset(p), state.boot.info(p).length
    return state.element.check_boot_sector(FULL_SLOT[p], state.flash.data, start, n)


def rollback(state: DeviceState, target_version: int, registry, store,
             faults: FaultInjector = None) -> DeviceState:
    rec = registry.get_version(state.product_id, target_version)
    plan = UpdatePlan(rec)
    return install_atomic(state, download_and_verify(plan, store), plan, faults)


@dataclass
class UpdateReport:
    status: str  # updated | up-to-date
    old_version: int
    new_version: int
    old_digest: bytes
    new_digest: bytes

    def to_json(self) -> dict:
        return {"status": self.status, "old_version": self.old_version,
                "new_version": self.new_version, "old_digest": self.old_digest.hex(),
                "new_digest": self.new_digest.hex()}


def run_update(state: DeviceState, registry, store, faults: FaultInjector = None) -> UpdateReport:
    """One poll cycle: check, download and verify, install."""
    old_v, old_d = state.installed_version, state.boot.info(state.active).digest
    plan = check_for_update(state, registry)
    if plan is None:
        return UpdateReport("up-to-date", old_v, old_v, old_d, old_d)
    firmware = download_and_verify(plan, store, state)
    install_atomic(state, firmware, plan, faults)
    return UpdateReport("updated", old_v, state.installed_version, old_d,
                        state.boot.info(state.active).digest)
