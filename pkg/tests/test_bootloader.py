import random
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from otachain.bootloader import (ACK, CMD_GET_ID, CMD_WRITE_MEMORY, FLASH_BASE, INIT, MAX_FRAME,
                                 NACK, PROFILES, FaultyLink, FlashAborted, IdMismatch, Nack,
                                 OutOfRange, SimLink, SimulatedTarget, WriteProtected,
                                 address_frame, command_bytes, data_frame, flash_firmware, frames,
                                 get_id, load_trace, probe, replay, save_trace, write_range,
                                 xor_checksum)

GOLDEN = Path(__file__).parent / "fixtures" / "golden_write_4frames.hex"


def ready_target(profile="stm32f103"):
    t = SimulatedTarget(PROFILES[profile])
    assert t.receive(bytes([INIT])) == bytes([ACK])
    return t


def test_frame_builders():
    assert command_bytes(0x31) == b"\x31\xce"
    assert address_frame(0x08000000) == b"\x08\x00\x00\x00\x08"
    assert data_frame(b"\x01\x02") == b"\x01\x01\x02\x02"
    assert xor_checksum(b"") == 0
    with pytest.raises(ValueError):
        data_frame(b"")
    with pytest.raises(ValueError):
        data_frame(bytes(MAX_FRAME + 1))


def test_target_ignores_everything_before_init():
    t = SimulatedTarget()
    for burst in (command_bytes(CMD_GET_ID), b"\x00", b"\x7f\x7f"):
        assert t.receive(burst) == b""
    assert t.receive(bytes([INIT])) == bytes([ACK])
    assert t.receive(bytes([INIT])) == bytes([NACK])


@pytest.mark.parametrize("cmd", range(256))
def test_complement_rule(cmd):
    t = ready_target()
    for second in range(256):
        reply = t.receive(bytes([cmd, second]))
        if second != cmd ^ 0xFF:
            assert reply == bytes([NACK])
        elif cmd == CMD_GET_ID:
            assert reply[0] == ACK
        elif cmd == CMD_WRITE_MEMORY:
            assert reply == bytes([ACK])
            assert t.receive(b"\x00") == bytes([NACK])  # back to command stage
        else:
            assert reply == bytes([NACK])


def test_get_id():
    link = SimLink(SimulatedTarget(PROFILES["stm32f401"]))
    probe(link)
    assert get_id(link) == 0x0423


def test_write_protected_surfaces():
    link = SimLink(SimulatedTarget(PROFILES["stm32f103-protected"]))
    with pytest.raises(FlashAborted) as exc:
        flash_firmware(link, b"\x00" * 10)
    assert isinstance(exc.value.cause, WriteProtected)
    assert exc.value.report.frames_applied == 0
    assert link.dump(FLASH_BASE, 10) == b"\xff" * 10


def test_id_mismatch():
    with pytest.raises(IdMismatch):
        flash_firmware(SimLink(SimulatedTarget()), b"x", expected_id=0x0423)


def test_address_outside_flash():
    t = SimulatedTarget()
    link = SimLink(t)
    probe(link)
    with pytest.raises(OutOfRange):
        write_range(link, FLASH_BASE + t.profile.flash_size, b"x")
    with pytest.raises(OutOfRange):
        write_range(link, FLASH_BASE, b"xx", flash_end=FLASH_BASE + 1)


def test_frames_bounded():
    chunks = list(frames(FLASH_BASE, bytes(1000)))
    assert [len(c) for _, c in chunks] == [256, 256, 256, 232]
    assert [a - FLASH_BASE for a, _ in chunks] == [0, 256, 512, 768]


@given(st.binary(min_size=1, max_size=4096))
def test_flash_then_dump_reproduces_image(image):
    link = SimLink(SimulatedTarget())
    report = flash_firmware(link, image)
    assert report.verified
    assert link.dump(FLASH_BASE, len(image)) == image


def test_corrupted_data_frame_nacked_and_reported():
    # bursts: init, get-id, then per frame: cmd, addr, data
    link = FaultyLink(SimulatedTarget(), {2 + 3 * 1 + 2: (5, 0x40)})
    with pytest.raises(FlashAborted) as exc:
        flash_firmware(link, bytes(600))
    assert exc.value.report.failed_frame == 1
    assert isinstance(exc.value.cause, Nack)


def test_golden_trace_fixture_is_current(tmp_path):
    link = SimLink(SimulatedTarget(), record=True)
    flash_firmware(link, random.Random(4).randbytes(1024))
    assert [t for t in load_trace(GOLDEN)] == link.trace
    save_trace(link.trace, tmp_path / "t.hex")
    assert load_trace(tmp_path / "t.hex") == link.trace


def test_golden_trace_replays():
    trace = load_trace(GOLDEN)
    replies = [b for d, b in trace if d == "<"]
    got = [r for r in replay(trace, SimulatedTarget()) if r]
    assert got == replies
    assert sum(1 for d, b in trace if d == ">" and len(b) == MAX_FRAME + 2) == 4
