"""Host flasher and simulated target for the STM32-style UART bootloader.

Wire protocol (all host writes are followed by a 1-byte read of the reply)::

    init     host 0x7F                       target ACK
    get-id   host 0x02 0xFD                  target ACK, 0x01, PID_hi, PID_lo, ACK
    write    host 0x31 0xCE                  target ACK (NACK if write protected)
             host A3 A2 A1 A0 xor(A3..A0)    target ACK
             host N-1, D0..D(N-1), xor(N-1, D0..D(N-1))   target ACK

ACK is 0x79, NACK is 0x1F. The simulated target parses one host burst at a
time (a burst ends when the line goes idle, i.e. when the host turns around
to read), so a burst whose byte count disagrees with its own length field is
rejected as a framing error.
"""

import logging
from dataclasses import dataclass
from functools import reduce
from pathlib import Path
from typing import List, Optional, Tuple

from .encoding import sha256
from .errors import BootloaderError

log = logging.getLogger(__name__)

INIT = 0x7F
ACK = 0x79
NACK = 0x1F
CMD_GET_ID = 0x02
CMD_WRITE_MEMORY = 0x31
FLASH_BASE = 0x08000000
MAX_FRAME = 256


class NoResponse(BootloaderError):
    pass


class Nack(BootloaderError):
    pass


class WriteProtected(Nack):
    pass


class BadChecksum(Nack):
    pass


class OutOfRange(BootloaderError):
    pass


class IdMismatch(BootloaderError):
    pass


class FlashAborted(BootloaderError):
    def __init__(self, report: "FlashReport", cause: BootloaderError):
        super().__init__(f"frame {report.failed_frame} failed: {cause.name}: {cause}")
        self.report = report
        self.cause = cause


def xor_checksum(data: bytes) -> int:
    return reduce(lambda a, b: a ^ b, data, 0)


def command_bytes(cmd: int) -> bytes:
    return bytes([cmd, cmd ^ 0xFF])


def address_frame(addr: int) -> bytes:
    a = addr.to_bytes(4, "big")
    return a + bytes([xor_checksum(a)])


def data_frame(data: bytes) -> bytes:
    if not 1 <= len(data) <= MAX_FRAME:
        raise ValueError(f"data frame must carry 1..{MAX_FRAME} bytes")
    body = bytes([len(data) - 1]) + data
    return body + bytes([xor_checksum(body)])


# -- simulated target --------------------------------------------------------

@dataclass(frozen=True)
class TargetProfile:
    name: str
    product_code: int
    flash_size: int
    write_protected: bool = False


PROFILES = {
    "stm32f103": TargetProfile("stm32f103", 0x0410, 128 * 1024),
    "stm32f103-protected": TargetProfile("stm32f103-protected", 0x0410, 128 * 1024, True),
    "stm32f401": TargetProfile("stm32f401", 0x0423, 256 * 1024),
}


class SimulatedTarget:
    def __init__(self, profile: TargetProfile = PROFILES["stm32f103"], base: int = FLASH_BASE):
        self.profile = profile
        self.base = base
        self.flash = bytearray([0xFF]) * profile.flash_size
        self.write_protected = profile.write_protected
        self.product_code = profile.product_code
        self.mode = "waiting-init"
        self._stage = "command"
        self._addr = None

    def _nack(self) -> bytes:
        self._stage, self._addr = "command", None
        return bytes([NACK])

    def receive(self, burst: bytes) -> bytes:
        """Process one host burst; return the reply bytes (possibly empty)."""
        if self.mode == "waiting-init":
            if burst == bytes([INIT]):
                self.mode = "ready"
                return bytes([ACK])
            return b""
        if self._stage == "command":
            if len(burst) != 2 or burst[1] != burst[0] ^ 0xFF:
                return self._nack()
            cmd = burst[0]
            if cmd == CMD_GET_ID:
                return bytes([ACK, 0x01]) + self.product_code.to_bytes(2, "big") + bytes([ACK])
            if cmd == CMD_WRITE_MEMORY:
                if self.write_protected:
                    return self._nack()
                self._stage = "address"
                return bytes([ACK])
            return self._nack()
        if self._stage == "address":
            if len(burst) != 5 or xor_checksum(burst[:4]) != burst[4]:
                return self._nack()
            addr = int.from_bytes(burst[:4], "big")
            if not self.base <= addr < self.base + len(self.flash):
                return self._nack()
            self._stage, self._addr = "data", addr
            return bytes([ACK])
        # data stage
        if len(burst) < 3 or len(burst) != burst[0] + 3 or xor_checksum(burst[:-1]) != burst[-1]:
            return self._nack()
        data = burst[1:-1]
        off = self._addr - self.base
        if off + len(data) > len(self.flash):
            return self._nack()
        self.flash[off:off + len(data)] = data
        self._stage, self._addr = "command", None
        return bytes([ACK])

    def dump(self, start: int, length: int) -> bytes:
        off = start - self.base
        return bytes(self.flash[off:off + length])


# -- links -------------------------------------------------------------------

class SimLink:
    """Duplex byte stream to a SimulatedTarget; optionally records a trace.

    The trace is a list of ``(direction, bytes)`` with direction ``">"`` for
    host-to-target and ``"<"`` for target-to-host.
    """

    def __init__(self, target: SimulatedTarget, record: bool = False):
        self.target = target
        self._out = bytearray()
        self._in = bytearray()
        self.trace: Optional[List[Tuple[str, bytes]]] = [] if record else None

    def write(self, data: bytes) -> None:
        self._out += data

    def _turnaround(self) -> None:
        if self._out:
            burst = bytes(self._out)
            self._out.clear()
            reply = self.target.receive(self._mangle(burst))
            if self.trace is not None:
                self.trace.append((">", burst))
                if reply:
                    self.trace.append(("<", reply))
            self._in += reply

    def _mangle(self, burst: bytes) -> bytes:
        return burst

    def read(self, n: int, timeout: float = 1.0) -> bytes:
        self._turnaround()
        out = bytes(self._in[:n])
        del self._in[:n]
        return out

    def dump(self, start: int, length: int) -> bytes:
        return self.target.dump(start, length)


class FaultyLink(SimLink):
    """SimLink that XORs ``mask`` into byte ``offset`` of host burst ``index``."""

    def __init__(self, target, corrupt: dict, record: bool = False):
        super().__init__(target, record)
        self.corrupt = dict(corrupt)
        self._bursts = 0

    def _mangle(self, burst: bytes) -> bytes:
        i = self._bursts
        self._bursts += 1
        if i in self.corrupt:
            offset, mask = self.corrupt[i]
            b = bytearray(burst)
            b[offset] ^= mask
            return bytes(b)
        return burst


class SerialLink:
    """pyserial-backed link to real hardware (8E1, as the ROM bootloader expects)."""

    def __init__(self, port: str, baudrate: int = 115200, timeout: float = 1.0):
        try:
            import serial
        except ImportError as e:  # pragma: no cover - optional dependency
            raise BootloaderError("pyserial is required for --port") from e
        self._port = serial.Serial(port, baudrate, parity=serial.PARITY_EVEN, timeout=timeout)

    def write(self, data: bytes) -> None:
        self._port.write(data)

    def read(self, n: int, timeout: float = 1.0) -> bytes:
        self._port.timeout = timeout
        return self._port.read(n)

    def dump(self, start, length):
        return None


# -- host side ---------------------------------------------------------------

def _read_ack(link, what: str, nack_exc=Nack) -> None:
    r = link.read(1)
    if not r:
        raise NoResponse(f"no reply to {what}")
    if r[0] == NACK:
        raise nack_exc(f"{what} was NACKed")
    if r[0] != ACK:
        raise BootloaderError(f"unexpected byte {r[0]:#04x} after {what}")


def probe(link) -> None:
    link.write(bytes([INIT]))
    _read_ack(link, "init 0x7F")


def get_id(link) -> int:
    link.write(command_bytes(CMD_GET_ID))
    _read_ack(link, "Get-ID")
    n = link.read(1)
    if not n:
        raise NoResponse("Get-ID length missing")
    pid = link.read(n[0] + 1)
    if len(pid) != n[0] + 1:
        raise NoResponse("Get-ID payload truncated")
    _read_ack(link, "Get-ID payload")
    return int.from_bytes(pid, "big")


def write_frame(link, addr: int, data: bytes) -> None:
    link.write(command_bytes(CMD_WRITE_MEMORY))
    _read_ack(link, "Write-Memory", WriteProtected)
    link.write(address_frame(addr))
    try:
        _read_ack(link, f"address {addr:#010x}")
    except Nack as e:
        raise OutOfRange(str(e)) from e
    link.write(data_frame(data))
    _read_ack(link, f"data frame at {addr:#010x}", BadChecksum)


def frames(start: int, data: bytes):
    for i in range(0, len(data), MAX_FRAME):
        yield start + i, data[i:i + MAX_FRAME]


def write_range(link, start: int, data: bytes, flash_end: int = None) -> int:
    """Write ``data`` at ``start`` in frames of at most 256 bytes; return frame count."""
    if flash_end is not None and start + len(data) > flash_end:
        raise OutOfRange(f"[{start:#x}, {start + len(data):#x}) beyond {flash_end:#x}")
    n = 0
    for addr, chunk in frames(start, data):
        write_frame(link, addr, chunk)
        n += 1
    return n


@dataclass
class FlashReport:
    product_code: int
    frames_total: int
    frames_applied: int = 0
    failed_frame: Optional[int] = None
    image_digest: bytes = b""
    readback_digest: Optional[bytes] = None

    @property
    def verified(self) -> bool:
        return self.readback_digest is not None and self.readback_digest == self.image_digest


def flash_firmware(link, image: bytes, base: int = FLASH_BASE,
                   expected_id: Optional[int] = None) -> FlashReport:
    probe(link)
    pid = get_id(link)
    if expected_id is not None and pid != expected_id:
        raise IdMismatch(f"target reports {pid:#06x}, expected {expected_id:#06x}")
    chunks = list(frames(base, image))
    report = FlashReport(pid, len(chunks), image_digest=sha256(image))
    for i, (addr, chunk) in enumerate(chunks):
        try:
            write_frame(link, addr, chunk)
        except BootloaderError as e:
            report.failed_frame = i
            raise FlashAborted(report, e) from e
        report.frames_applied += 1
    dumped = link.dump(base, len(image))
    if dumped is not None:
        report.readback_digest = sha256(dumped)
        if not report.verified:
            raise BootloaderError("readback digest differs from image digest")
    return report


# -- golden traces -----------------------------------------------------------

def save_trace(trace, path) -> None:
    lines = [f"{d} {b.hex(' ')}" for d, b in trace]
    Path(path).write_text("\n".join(lines) + "\n")


def load_trace(path) -> List[Tuple[str, bytes]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        d, _, hexes = line.partition(" ")
        out.append((d, bytes.fromhex(hexes)))
    return out


def replay(trace, target: SimulatedTarget) -> List[bytes]:
    """Feed the host bursts of ``trace`` to ``target``; return its replies."""
    return [target.receive(b) for d, b in trace if d == ">"]
