import pytest
from hypothesis import given
from hypothesis import strategies as st

from otachain.keys import KeyPair
from otachain.ledger import (BadNonce, BadSignature, Block, ChainConfig, ChainCorrupt,
                             ContractError, Ledger, TooEarly, Transaction, UnknownCall,
                             ZERO_DIGEST, make_transaction, read_chain_file,
                             verify_encoded_chain)


class Boom(ContractError):
    pass


class Counter:
    """Minimal contract: action b"inc" adds one, b"fail" increments then reverts."""

    def initial_state(self):
        return {"n": 0}

    def apply(self, state, tx, height):
        state["n"] += 1
        if tx.action == b"fail":
            raise Boom("requested failure")
        return [("n", state["n"])]

    def query(self, state, call):
        if call != ("n",):
            raise UnknownCall(str(call))
        return state["n"]


ALICE = KeyPair.from_secret(1111)
BOB = KeyPair.from_secret(2222)


def ledger(**kw):
    return Ledger(Counter(), ChainConfig(**kw) if kw else ChainConfig(block_interval=10))


def test_genesis():
    led = ledger()
    assert led.height == 0
    assert led.tip.parent_digest == ZERO_DIGEST
    assert led.tip.transactions == ()
    assert led.verify_chain()


@pytest.mark.parametrize("kw", [dict(block_interval=0), dict(block_interval=-1),
                                dict(block_interval=1, confirmations_required=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ChainConfig(**kw)


def test_signature_and_nonce_checks():
    led = ledger()
    tx = make_transaction(ALICE, 0, b"inc")
    forged = Transaction(tx.sender, tx.nonce, b"fail", tx.public_key, tx.signature)
    with pytest.raises(BadSignature):
        led.submit_transaction(forged)
    impostor = Transaction(BOB.address, 0, b"inc", ALICE.public, tx.signature)
    with pytest.raises(BadSignature):
        led.submit_transaction(impostor)
    with pytest.raises(BadNonce):
        led.submit_transaction(make_transaction(ALICE, 1, b"inc"))
    led.submit_transaction(tx)
    with pytest.raises(BadNonce):
        led.submit_transaction(tx)  # replay
    assert led.next_nonce(ALICE.address) == 1


def test_block_interval_enforced():
    led = ledger()
    with pytest.raises(TooEarly):
        led.advance_block(9.999)
    led.advance_block(10)
    assert led.tip.timestamp == 10.0
    with pytest.raises(TooEarly):
        led.advance_block(15)


def test_pending_isolation():
    led = ledger()
    led.submit_transaction(make_transaction(ALICE, 0, b"inc"))
    assert led.query(("n",)) == 0
    assert led.receipt(led.pending[0].tx_id) is None
    led.advance_block(10)
    assert led.query(("n",)) == 1


def test_confirmation_depth():
    led = ledger(block_interval=10, confirmations_required=3)
    txid = led.submit_transaction(make_transaction(ALICE, 0, b"inc"))
    led.advance_block(10)
    assert led.query(("n",)) == 0 and led.receipt(txid) is None
    led.advance_block(20)
    assert led.confirmations(txid) == 2 and led.receipt(txid) is None
    led.advance_block(30)
    assert led.query(("n",)) == 1
    assert led.receipt(txid).height == 1


def test_reverted_tx_leaves_no_trace():
    led = ledger()
    ok = led.submit_transaction(make_transaction(ALICE, 0, b"inc"))
    bad = led.submit_transaction(make_transaction(ALICE, 1, b"fail"))
    led.advance_block(10)
    assert led.receipt(ok).ok
    r = led.receipt(bad)
    assert not r.ok and isinstance(r.error, Boom)
    assert led.query(("n",)) == 1
    # the reverted tx is still included and consumes its nonce
    assert len(led.tip.transactions) == 2
    assert led.next_nonce(ALICE.address) == 2


def test_preview_does_not_mutate():
    led = ledger()
    led.submit_transaction(make_transaction(ALICE, 0, b"inc"))
    receipts = led.preview([make_transaction(BOB, 0, b"fail")])
    assert [r.ok for r in receipts] == [True, False]
    assert led.query(("n",)) == 0 and len(led.pending) == 1


def test_unknown_query():
    with pytest.raises(UnknownCall):
        ledger().query(("nope",))


def test_block_encoding_roundtrip():
    led = ledger()
    led.submit_transaction(make_transaction(ALICE, 0, b"inc"))
    block = led.advance_block(10)
    assert Block.decode(block.encode()) == block
    assert block.recompute_digest() == block.digest


def _schedule(led, steps):
    nonces = {}
    t = 0.0
    for who, action, gap in steps:
        key = (ALICE, BOB)[who]
        led.submit_transaction(make_transaction(key, nonces.get(who, 0), action))
        nonces[who] = nonces.get(who, 0) + 1
        if gap:
            t += 10 * gap
            led.advance_block(t)
    led.advance_block(t + 10)


steps_st = st.lists(st.tuples(st.integers(0, 1), st.sampled_from([b"inc", b"fail"]),
                              st.integers(0, 2)), max_size=12)


@given(steps_st)
def test_replay_determinism(steps):
    a, b = ledger(), ledger()
    _schedule(a, steps)
    _schedule(b, steps)
    assert [x.digest for x in a.blocks] == [x.digest for x in b.blocks]


def test_persistence_roundtrip(tmp_path):
    path = tmp_path / "chain.bin"
    led = Ledger(Counter(), ChainConfig(10), path=path)
    _schedule(led, [(0, b"inc", 1), (1, b"fail", 1), (0, b"inc", 2)])
    again = Ledger.open(path, Counter(), ChainConfig(10))
    assert again.encoded_blocks() == led.encoded_blocks()
    assert again.query(("n",)) == led.query(("n",)) == 2
    assert again.next_nonce(ALICE.address) == 2
    assert len(read_chain_file(path)) == led.height + 1


def test_corrupt_file_refused(tmp_path):
    path = tmp_path / "chain.bin"
    led = Ledger(Counter(), ChainConfig(10), path=path)
    _schedule(led, [(0, b"inc", 1)])
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChainCorrupt):
        Ledger.open(path, Counter(), ChainConfig(10))


@pytest.fixture(scope="module")
def long_chain():
    led = ledger()
    t, nonce = 0, 0
    for h in range(1, 8):
        for _ in range(h % 3):
            led.submit_transaction(make_transaction(ALICE, nonce, b"inc"))
            nonce += 1
        t += 10
        led.advance_block(t)
    return led.encoded_blocks()


@given(st.data())
def test_any_single_byte_mutation_detected(long_chain, data):
    height = data.draw(st.integers(0, len(long_chain) - 1))
    blob = bytearray(long_chain[height])
    pos = data.draw(st.integers(0, len(blob) - 1))
    blob[pos] ^= data.draw(st.integers(1, 255))
    mutated = list(long_chain)
    mutated[height] = bytes(blob)
    check = verify_encoded_chain(mutated)
    assert not check
    assert check.failed_height == height
