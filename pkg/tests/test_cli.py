import json
import subprocess
import sys

import pytest

from otachain.cli import WorkspaceConfig, main
from otachain.errors import (AgentError, BenchError, BootloaderError, ElementError, LedgerError,
                             MultisigError, RegistryError, StoreError, WorkspaceError)
from otachain.multisig import derive_owner

from conftest import rand_bytes

ROOT_HEX = "ab" * 32


@pytest.fixture
def ws(tmp_path):
    w = tmp_path / "ws"
    assert main(["init", "--workspace", str(w), "--root", ROOT_HEX, "--block-interval", "10"]) == 0
    return w


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_exit_codes_are_distinct():
    codes = [e.exit_code for e in (LedgerError, MultisigError, RegistryError, StoreError,
                                   ElementError, AgentError, BootloaderError, BenchError,
                                   WorkspaceError)]
    assert len(set(codes)) == len(codes) and 0 not in codes


def test_config_roundtrip_and_errors():
    cfg = WorkspaceConfig(block_interval=3.5, threshold=1)
    assert WorkspaceConfig.parse(cfg.dump()) == cfg
    with pytest.raises(WorkspaceError):
        WorkspaceConfig.parse("colour=blue\n")
    with pytest.raises(WorkspaceError):
        WorkspaceConfig.parse("block_interval=0\n")


def test_keygen(capsys):
    code, out, _ = run(capsys, "keygen", "--root", ROOT_HEX, "--index", 2)
    assert code == 0
    assert out.strip() == derive_owner(bytes.fromhex(ROOT_HEX), 2).address.hex()


def test_missing_workspace(capsys, tmp_path):
    code, _, err = run(capsys, "chain", "inspect", "--workspace", tmp_path)
    assert code == WorkspaceError.exit_code
    assert err.startswith("workspace: ")


def test_publish_and_update_flow(ws, tmp_path, capsys):
    fw, factory = tmp_path / "fw.bin", tmp_path / "factory.bin"
    fw.write_bytes(rand_bytes(5000, 1))
    factory.write_bytes(rand_bytes(4000, 2))
    code, out, _ = run(capsys, "publish", fw, "--workspace", ws, "--product", "cam", "--version", 1,
                       "--model", "m1", "--root", ROOT_HEX, "--signer", 0, "--signer", 2)
    assert code == 0 and "proposal 0" in out
    cid = out.split()[1]

    # not visible before a block is produced
    code, _, err = run(capsys, "chain", "query", "--workspace", ws, "--product", "cam")
    assert code == RegistryError.exit_code and "NotFound" in err
    assert run(capsys, "chain", "advance", "--workspace", ws)[0] == 0
    code, out, _ = run(capsys, "chain", "query", "--workspace", ws, "--product", "cam",
                       "--output", "json")
    assert json.loads(out)["content_id"] == cid

    code, out, _ = run(capsys, "chain", "inspect", "--workspace", ws, "--output", "json")
    blocks = json.loads(out)
    assert [b["height"] for b in blocks] == [0, 1, 2] and blocks[2]["transactions"] == 2
    assert run(capsys, "chain", "verify", "--workspace", ws)[1].strip() == "ok"

    out_file = tmp_path / "back.bin"
    assert run(capsys, "store", "get", cid, "-o", out_file, "--workspace", ws)[0] == 0
    assert out_file.read_bytes() == fw.read_bytes()
    assert run(capsys, "store", "verify", cid, "--workspace", ws)[1].strip() == "ok 5000 bytes"

    assert run(capsys, "agent", "provision", "--workspace", ws, "--device", "d.json",
               "--product", "cam", "--model", "m1", "--factory", factory,
               "--partition-size", 8192)[0] == 0
    code, out, _ = run(capsys, "agent", "run", "--workspace", ws, "--device", "d.json", "--once",
                       "--output", "json")
    report = json.loads(out)
    assert code == 0 and report["status"] == "updated" and report["new_version"] == 1
    code, out, _ = run(capsys, "agent", "run", "--workspace", ws, "--device", "d.json", "--once")
    assert "up to date" in out

    # a stale version is refused by the dry run and never queued
    code, _, err = run(capsys, "publish", fw, "--workspace", ws, "--product", "cam",
                       "--version", 1, "--model", "m1", "--root", ROOT_HEX, "--signer", 0,
                       "--signer", 1)
    assert code == RegistryError.exit_code and "VersionNotMonotonic" in err


def test_propose_then_confirm(ws, tmp_path, capsys):
    fw = tmp_path / "fw.bin"
    fw.write_bytes(b"firmware")
    assert run(capsys, "propose", fw, "--workspace", ws, "--product", "p", "--version", 3,
               "--model", "m", "--root", ROOT_HEX)[0] == 0
    run(capsys, "chain", "advance", "--workspace", ws)
    assert run(capsys, "chain", "query", "--workspace", ws, "--product", "p")[0] != 0
    assert run(capsys, "confirm", "--workspace", ws, "--proposal", 0, "--root", ROOT_HEX,
               "--signer", 1)[0] == 0
    run(capsys, "chain", "advance", "--workspace", ws, "--count", 1)
    code, out, _ = run(capsys, "chain", "query", "--workspace", ws, "--product", "p",
                       "--history")
    assert code == 0 and json.loads(out)["version"] == 3


def test_wrong_root_refused(ws, tmp_path, capsys):
    fw = tmp_path / "fw.bin"
    fw.write_bytes(b"x")
    code, _, err = run(capsys, "publish", fw, "--workspace", ws, "--product", "p", "--version", 1,
                       "--model", "m", "--root", "cd" * 32)
    assert code == WorkspaceError.exit_code


def test_advance_too_early(ws, capsys):
    code, _, err = run(capsys, "chain", "advance", "--workspace", ws, "--interval", 1)
    assert code == LedgerError.exit_code and "TooEarly" in err


def test_chain_verify_detects_tampering(ws, capsys):
    chain = ws / "chain.bin"
    raw = bytearray(chain.read_bytes())
    raw[-3] ^= 1
    chain.write_bytes(bytes(raw))
    code, _, err = run(capsys, "chain", "verify", "--workspace", ws)
    assert code == LedgerError.exit_code and "ChainCorrupt" in err


def test_flash_sim(tmp_path, capsys):
    img = tmp_path / "img.bin"
    img.write_bytes(rand_bytes(700))
    trace = tmp_path / "t.hex"
    code, out, _ = run(capsys, "flash", "--image", img, "--sim", "stm32f103", "--trace", trace,
                       "--workspace", tmp_path)
    assert code == 0 and "3 frames" in out and "verified" in out
    assert trace.read_text().startswith("> 7f")
    code, _, err = run(capsys, "flash", "--image", img, "--sim", "stm32f103-protected")
    assert code == BootloaderError.exit_code and "WriteProtected" in err


def test_fleet_and_bench(tmp_path, capsys):
    code, out, _ = run(capsys, "fleet", "simulate", "--devices", 3, "--topology", "gateway-cloud",
                       "--output", "json")
    assert code == 0 and json.loads(out)["updated"] == 3
    code, out, _ = run(capsys, "bench", "timing", "--block-interval", 15, "--output", "json")
    assert json.loads(out)["ordering_holds"] is True
    code, out, _ = run(capsys, "bench", "latency", "--config", "configs/latency_endpoints.conf",
                       "-o", tmp_path / "res", "--payload", 65536)
    assert code == 0
    assert (tmp_path / "res" / "latency.csv").read_text().startswith(
        "scenario,payload_bytes,direct_ms,content_ms")


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "otachain.cli", "keygen", "--root", ROOT_HEX,
                           "--index", "0"], capture_output=True, text=True)
    assert proc.returncode == 0 and len(proc.stdout.strip()) == 40
