"""Record the golden bootloader trace used by the corruption tests.

Probe, Get-ID and four 256-byte Write-Memory frames of a fixed 1 KiB image.
"""

import argparse
import random

from otachain import bootloader

DEFAULT_OUT = "tests/fixtures/golden_write_4frames.hex"


def golden_image() -> bytes:
    return random.Random(4).randbytes(1024)


def record(path=DEFAULT_OUT):
    link = bootloader.SimLink(bootloader.SimulatedTarget(), record=True)
    report = bootloader.flash_firmware(link, golden_image())
    lines = ["# probe, get-id, 4 write frames of a 1 KiB image (random.Random(4))"]
    lines += [f"{d} {b.hex(' ')}" for d, b in link.trace]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return report


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-o", "--out", default=DEFAULT_OUT)
    rep = record(ap.parse_args().out)
    print(f"{rep.frames_applied} frames, digest {rep.image_digest.hex()}")
