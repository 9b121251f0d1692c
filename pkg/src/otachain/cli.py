"""Command line entry point.

Every command takes ``--workspace <dir>`` holding ``workspace.conf`` (plain
``key=value``), the chain file, the pending transaction pool, the node store
and device state files. Errors print as ``<family>: <Error>: <message>`` and
exit with the family's code (see ``otachain.errors``).
"""

import argparse
import json
import logging
import struct
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

from . import bench, bootloader, device_agent, fleet
from .castore import ContentStore, load_latency_config
from .encoding import sha256
from .errors import OtaError, WorkspaceError
from .ledger import ChainConfig, Ledger, Transaction
from .multisig import OwnerSet, derive_owner, root_commitment
from .registry import (
    FirmwareRecord,
    RegistryClient,
    RegistryContract,
    confirm_action,
    deploy_action,
    predicted_proposal_id,
    propose_action,
    publish_action,
    signed,
)

CONFIG_NAME = "workspace.conf"


@dataclass
class WorkspaceConfig:
    chain_file: str = "chain.bin"
    pending_file: str = "pending.bin"
    store_dir: str = "store"
    device_dir: str = "devices"
    owner_root_commitment: str = ""
    owners: int = 3
    threshold: int = 2
    block_interval: float = 15.0
    confirmations_required: int = 1
    chunk_size: int = 256 * 1024

    def chain_config(self) -> ChainConfig:
        return ChainConfig(self.block_interval, self.confirmations_required)

    def dump(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def parse(cls, text: str) -> "WorkspaceConfig":
        cfg = cls()
        types = {k: type(v) for k, v in asdict(cfg).items()}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise WorkspaceError(f"{CONFIG_NAME}:{lineno}: unknown setting {key!r}")
            try:
                setattr(cfg, key, types[key](value))
            except ValueError as e:
                raise WorkspaceError(f"{CONFIG_NAME}:{lineno}: {e}") from e
        try:
            cfg.chain_config()
        except ValueError as e:
            raise WorkspaceError(str(e)) from e
        return cfg


class Workspace:
    def __init__(self, root, config: WorkspaceConfig):
        self.root = Path(root)
        self.config = config
        self._ledger: Optional[Ledger] = None

    @classmethod
    def load(cls, root) -> "Workspace":
        path = Path(root) / CONFIG_NAME
        if not path.exists():
            raise WorkspaceError(f"no {CONFIG_NAME} in {root} (run `otachain init`)")
        return cls(root, WorkspaceConfig.parse(path.read_text()))

    def path(self, name: str) -> Path:
        return self.root / name

    @property
    def store(self) -> ContentStore:
        return ContentStore(self.path(self.config.store_dir), self.config.chunk_size)

    @property
    def ledger(self) -> Ledger:
        if self._ledger is None:
            led = Ledger.open(self.path(self.config.chain_file), RegistryContract(),
                              self.config.chain_config())
            for tx in self._read_pending():
                led.submit_transaction(tx)
            self._ledger = led
        return self._ledger

    def _read_pending(self) -> List[Transaction]:
        p = self.path(self.config.pending_file)
        if not p.exists():
            return []
        data, out, pos = p.read_bytes(), [], 0
        while pos < len(data):
            (n,) = struct.unpack_from(">I", data, pos)
            out.append(Transaction.decode(data[pos + 4:pos + 4 + n]))
            pos += 4 + n
        return out

    def save_pending(self) -> None:
        blob = b"".join(struct.pack(">I", len(e)) + e
                        for e in (tx.encode() for tx in self.ledger.pending))
        self.path(self.config.pending_file).write_bytes(blob)

    def owner(self, root_hex: str, index: int):
        seed = _hex_bytes(root_hex, 32, "--root")
        if root_commitment(seed).hex() != self.config.owner_root_commitment:
            raise WorkspaceError("--root does not match the workspace owner commitment")
        return derive_owner(seed, index)


def _hex_bytes(text: str, n: int, what: str) -> bytes:
    try:
        b = bytes.fromhex(text.removeprefix("0x"))
    except ValueError as e:
        raise WorkspaceError(f"{what}: not hex") from e
    if len(b) != n:
        raise WorkspaceError(f"{what}: expected {n} bytes, got {len(b)}")
    return b


def _emit(args, data, text: str) -> None:
    if getattr(args, "output", "text") == "json":
        print(json.dumps(data, sort_keys=True))
    else:
        print(text)


# -- commands ----------------------------------------------------------------

def cmd_init(args) -> int:
    root = Path(args.workspace)
    root.mkdir(parents=True, exist_ok=True)
    if (root / CONFIG_NAME).exists():
        raise WorkspaceError(f"{root} is already initialised")
    seed = _hex_bytes(args.root, 32, "--root")
    cfg = WorkspaceConfig(owner_root_commitment=root_commitment(seed).hex(), owners=args.owners,
                          threshold=args.threshold, block_interval=args.block_interval,
                          confirmations_required=args.confirmations, chunk_size=args.chunk_size)
    cfg.chain_config()
    ws = Workspace(root, cfg)
    owner_set = OwnerSet.from_root(seed, args.owners, args.threshold)
    led = ws.ledger
    led.submit_transaction(signed(led, derive_owner(seed, 0), deploy_action(owner_set)))
    for _ in range(cfg.confirmations_required):
        led.advance_block(led.now + cfg.block_interval)
    (root / CONFIG_NAME).write_text(cfg.dump())
    ws.save_pending()
    print(f"workspace {root}: {args.threshold}-of-{args.owners} owners, height {led.height}")
    for addr in owner_set.owners:
        print(f"owner {addr.hex()}")
    return 0


def cmd_keygen(args) -> int:
    key = derive_owner(_hex_bytes(args.root, 32, "--root"), args.index)
    _emit(args, {"index": args.index, "address": key.address.hex(), "public_key": key.public.hex()},
          key.address.hex())
    return 0


def _record_from_args(args, store) -> FirmwareRecord:
    data = Path(args.file).read_bytes()
    cid = store.put(data)
    return FirmwareRecord(args.product, args.version, cid, sha256(data), args.model)


def _submit_checked(ws: Workspace, txs: List[Transaction]) -> None:
    """Dry-run against the tip state; refuse to queue anything that would revert."""
    led = ws.ledger
    for r in led.preview(txs)[len(led.pending):]:
        if not r.ok:
            raise r.error
    for tx in txs:
        led.submit_transaction(tx)
    ws.save_pending()


def cmd_publish(args) -> int:
    ws = Workspace.load(args.workspace)
    signers = [ws.owner(args.root, i) for i in (args.signer or [0])]
    rec = _record_from_args(args, ws.store)
    led = ws.ledger
    pid = predicted_proposal_id(led)
    txs = [signed(led, signers[0], propose_action(publish_action(rec)))]
    offsets = {}
    for key in signers[1:]:
        off = offsets.get(key.address, 1 if key.address == signers[0].address else 0)
        txs.append(signed(led, key, confirm_action(pid), nonce_offset=off))
        offsets[key.address] = off + 1
    _submit_checked(ws, txs)
    _emit(args, {"content_id": rec.content_id.hex(), "proposal_id": pid,
                 "transactions": [t.tx_id.hex() for t in txs], "record": rec.to_json()},
          f"content_id {rec.content_id.hex()}\nproposal {pid}\n"
          + "\n".join(f"tx {t.tx_id.hex()}" for t in txs))
    return 0


def cmd_confirm(args) -> int:
    ws = Workspace.load(args.workspace)
    key = ws.owner(args.root, args.signer)
    tx = signed(ws.ledger, key, confirm_action(args.proposal))
    _submit_checked(ws, [tx])
    _emit(args, {"transaction": tx.tx_id.hex(), "encoded": tx.encode().hex()},
          f"tx {tx.tx_id.hex()}")
    return 0


def cmd_store(args) -> int:
    ws = Workspace.load(args.workspace)
    store = ws.store
    if args.store_cmd == "put":
        cid = store.put(Path(args.file).read_bytes())
        print(cid.hex())
    elif args.store_cmd == "get":
        data = store.get(_hex_bytes(args.cid, 32, "cid"))
        Path(args.output_file).write_bytes(data)
        print(f"{len(data)} bytes -> {args.output_file}")
    else:
        size = store.verify(_hex_bytes(args.cid, 32, "cid"))
        print(f"ok {size} bytes")
    return 0


def cmd_chain(args) -> int:
    ws = Workspace.load(args.workspace)
    led = ws.ledger
    if args.chain_cmd == "advance":
        interval = args.interval if args.interval is not None else ws.config.block_interval
        heights = []
        for _ in range(args.count):
            block = led.advance_block(led.now + interval)
            heights.append(block.height)
            for r in led.block_receipts(block.height):
                if not r.ok:
                    print(f"tx {r.tx_id.hex()} reverted: {r.error.family}: {r.error.name}: {r.error}")
        ws.save_pending()
        _emit(args, {"heights": heights, "height": led.height}, f"height {led.height}")
    elif args.chain_cmd == "inspect":
        rows = [{"height": b.height, "digest": b.digest.hex(), "transactions": len(b.transactions),
                 "timestamp": b.timestamp} for b in led.blocks]
        _emit(args, rows, "\n".join(f"{r['height']} {r['digest']} {r['transactions']}" for r in rows))
    elif args.chain_cmd == "verify":
        check = led.verify_chain()
        _emit(args, {"ok": check.ok, "failed_height": check.failed_height},
              "ok" if check else f"FAILED at height {check.failed_height}: {check.reason}")
        return 0 if check else 10
    else:
        client = RegistryClient(led)
        if args.history:
            recs = client.history(args.product)
            _emit(args, [r.to_json() for r in recs],
                  "\n".join(json.dumps(r.to_json(), sort_keys=True) for r in recs))
        else:
            rec = (client.get_version(args.product, args.version) if args.version is not None
                   else client.get_latest(args.product))
            _emit(args, rec.to_json(), json.dumps(rec.to_json(), sort_keys=True, indent=1))
    return 0


def _device_path(ws: Workspace, name: str) -> Path:
    p = Path(name)
    return p if p.parent != Path(".") or p.exists() else ws.path(ws.config.device_dir) / name


def cmd_agent(args) -> int:
    ws = Workspace.load(args.workspace)
    path = _device_path(ws, args.device)
    if args.agent_cmd == "provision":
        path.parent.mkdir(parents=True, exist_ok=True)
        state = device_agent.provision(args.product, args.model, Path(args.factory).read_bytes(),
                                       args.partition_size, args.factory_version, args.seed)
        device_agent.save_device(state, path)
        print(f"provisioned {path}")
        return 0
    state = device_agent.load_device(path)
    client = RegistryClient(ws.ledger)
    if args.agent_cmd == "status":
        decision = device_agent.secure_boot(state)
        device_agent.save_device(state, path)
        info = state.boot.info(state.active)
        _emit(args, {"active": state.active, "version": state.installed_version,
                     "digest": info.digest.hex(), "boot": decision.action},
              f"{decision.action} partition {state.active} v{state.installed_version} "
              f"{info.digest.hex()}")
        return 0
    if args.agent_cmd == "rollback":
        old = state.installed_version
        device_agent.rollback(state, args.to, client, ws.store)
        device_agent.save_device(state, path)
        print(f"rolled back v{old} -> v{state.installed_version}")
        return 0
    cycles = 1 if args.once or args.interval is None else args.max_cycles
    for i in range(cycles):
        report = device_agent.run_update(state, client, ws.store)
        device_agent.save_device(state, path)
        if report.status == "up-to-date":
            _emit(args, report.to_json(), f"up to date (v{report.old_version})")
        else:
            _emit(args, report.to_json(),
                  f"updated v{report.old_version} -> v{report.new_version}\n"
                  f"old {report.old_digest.hex()}\nnew {report.new_digest.hex()}")
        if i + 1 < cycles:
            time.sleep(args.interval)
    return 0


def cmd_fleet(args) -> int:
    rep = fleet.simulate_fleet(args.devices, args.topology, seed=args.seed)
    _emit(args, rep.to_json(),
          f"{rep.topology}: {rep.updated}/{rep.devices} updated, origin downloads "
          f"{rep.origin_downloads}, registry queries {rep.registry_queries}")
    return 0 if rep.failed == 0 else 15


def cmd_flash(args) -> int:
    image = Path(args.image).read_bytes()
    base = int(args.base, 0)
    if args.port:
        link = bootloader.SerialLink(args.port, args.baud)
        expected = int(args.expect_id, 0) if args.expect_id else None
    else:
        profile = bootloader.PROFILES.get(args.sim)
        if profile is None:
            raise WorkspaceError(f"unknown profile {args.sim!r}; known: {sorted(bootloader.PROFILES)}")
        link = bootloader.SimLink(bootloader.SimulatedTarget(profile), record=bool(args.trace))
        expected = int(args.expect_id, 0) if args.expect_id else profile.product_code
    try:
        report = bootloader.flash_firmware(link, image, base, expected)
    finally:
        if args.trace and getattr(link, "trace", None) is not None:
            bootloader.save_trace(link.trace, args.trace)
    verified = "verified" if report.verified else "not read back"
    _emit(args, {"product_code": report.product_code, "frames": report.frames_applied,
                 "digest": report.image_digest.hex(), "verified": report.verified},
          f"flashed {len(image)} bytes in {report.frames_applied} frames to "
          f"{report.product_code:#06x} ({verified})")
    return 0


def cmd_bench(args) -> int:
    if args.bench_cmd == "timing":
        cfg = ChainConfig(args.block_interval, args.confirmations)
        rep = bench.run_ledger_timing(cfg)
        data = asdict(rep)
        data["ordering_holds"] = rep.ordering_holds()
        _emit(args, data, "\n".join(f"{k} {v:.3f}" if isinstance(v, float) else f"{k} {v}"
                                    for k, v in data.items()))
        return 0
    if args.config:
        origins, peers = load_latency_config(args.config)
        scenarios = bench.default_scenarios(args.payload, origins, peers)
    else:
        scenarios = bench.default_scenarios(args.payload)
    rows = bench.run_latency_bench(scenarios)
    paths = bench.emit_report(rows, args.out)
    cross = bench.crossover_indices(rows)
    for r in rows:
        print(f"{r.scenario:16s} direct {r.direct_ms:9.3f} ms  content {r.content_ms:9.3f} ms")
    print(f"crossover index: {cross}")
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otachain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", default=".")
    common.add_argument("--output", choices=("text", "json"), default="text")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("init", parents=[common], help="create a workspace and deploy the owner set")
    s.add_argument("--root", required=True, help="32-byte owner root seed (hex)")
    s.add_argument("--owners", type=int, default=3)
    s.add_argument("--threshold", type=int, default=2)
    s.add_argument("--block-interval", type=float, default=15.0)
    s.add_argument("--confirmations", type=int, default=1)
    s.add_argument("--chunk-size", type=int, default=256 * 1024)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("keygen", parents=[common], help="derive an owner address")
    s.add_argument("--root", required=True)
    s.add_argument("--index", type=int, required=True)
    s.set_defaults(func=cmd_keygen)

    for name, helptext in (("publish", "store firmware and propose (and confirm) its record"),
                           ("propose", "store firmware and propose its record")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("file")
        s.add_argument("--product", required=True)
        s.add_argument("--version", type=int, required=True)
        s.add_argument("--model", required=True)
        s.add_argument("--root", required=True)
        if name == "publish":
            s.add_argument("--signer", type=int, action="append",
                           help="owner index; first proposes, the rest confirm")
        else:
            s.add_argument("--signer", type=int, action="append", default=None)
        s.set_defaults(func=cmd_publish)

    s = sub.add_parser("confirm", parents=[common], help="confirm a pending proposal")
    s.add_argument("--proposal", type=int, required=True)
    s.add_argument("--root", required=True)
    s.add_argument("--signer", type=int, required=True)
    s.set_defaults(func=cmd_confirm)

    st = sub.add_parser("store", help="content store").add_subparsers(dest="store_cmd", required=True)
    s = st.add_parser("put", parents=[common])
    s.add_argument("file")
    s = st.add_parser("get", parents=[common])
    s.add_argument("cid")
    s.add_argument("-o", dest="output_file", required=True)
    s = st.add_parser("verify", parents=[common])
    s.add_argument("cid")
    for a in st.choices.values():
        a.set_defaults(func=cmd_store)

    ch = sub.add_parser("chain", help="ledger").add_subparsers(dest="chain_cmd", required=True)
    s = ch.add_parser("advance", parents=[common])
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--interval", type=float)
    ch.add_parser("inspect", parents=[common])
    ch.add_parser("verify", parents=[common])
    s = ch.add_parser("query", parents=[common], help="keyless registry getter")
    s.add_argument("--product", required=True)
    s.add_argument("--version", type=int)
    s.add_argument("--history", action="store_true")
    for a in ch.choices.values():
        a.set_defaults(func=cmd_chain)

    ag = sub.add_parser("agent", help="device agent").add_subparsers(dest="agent_cmd", required=True)
    s = ag.add_parser("provision", parents=[common])
    s.add_argument("--device", required=True)
    s.add_argument("--product", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--factory", required=True, help="factory image file")
    s.add_argument("--factory-version", type=int, default=0)
    s.add_argument("--partition-size", type=int, default=1024 * 1024)
    s.add_argument("--seed", type=int, default=0)
    s = ag.add_parser("run", parents=[common])
    s.add_argument("--device", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--once", action="store_true")
    g.add_argument("--interval", type=float)
    s.add_argument("--max-cycles", type=int, default=1)
    s = ag.add_parser("rollback", parents=[common])
    s.add_argument("--device", required=True)
    s.add_argument("--to", type=int, required=True)
    s = ag.add_parser("status", parents=[common])
    s.add_argument("--device", required=True)
    for a in ag.choices.values():
        a.set_defaults(func=cmd_agent)

    fl = sub.add_parser("fleet", help="fleet simulation").add_subparsers(dest="fleet_cmd", required=True)
    s = fl.add_parser("simulate", parents=[common])
    s.add_argument("--devices", type=int, default=10)
    s.add_argument("--topology", choices=fleet.TOPOLOGIES, default="edge-cloud")
    s.add_argument("--seed", type=int, default=1)
    s.set_defaults(func=cmd_fleet)

    s = sub.add_parser("flash", parents=[common], help="flash an image over the UART bootloader")
    s.add_argument("--image", required=True)
    s.add_argument("--base", default=hex(bootloader.FLASH_BASE))
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--port")
    g.add_argument("--sim", help=f"simulated target profile: {', '.join(sorted(bootloader.PROFILES))}")
    s.add_argument("--baud", type=int, default=115200)
    s.add_argument("--expect-id")
    s.add_argument("--trace", help="write the wire trace as a hex dump")
    s.set_defaults(func=cmd_flash)

    be = sub.add_parser("bench", help="experiments").add_subparsers(dest="bench_cmd", required=True)
    s = be.add_parser("latency", parents=[common])
    s.add_argument("--config")
    s.add_argument("-o", dest="out", required=True)
    s.add_argument("--payload", type=int, default=bench.DEFAULT_PAYLOAD)
    s = be.add_parser("timing", parents=[common])
    s.add_argument("--block-interval", type=float, default=15.0)
    s.add_argument("--confirmations", type=int, default=1)
    for a in be.choices.values():
        a.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OtaError as e:
        print(f"{e.family}: {e.name}: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"otachain: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
