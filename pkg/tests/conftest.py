import random

import pytest
from hypothesis import settings

from otachain.castore import ContentStore
from otachain.encoding import sha256
from otachain.ledger import ChainConfig, Ledger
from otachain.multisig import OwnerSet, derive_owner
from otachain.registry import (FirmwareRecord, RegistryClient, RegistryContract, deploy,
                               submit_publish)

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")

ROOT = bytes(range(32))


@pytest.fixture
def owners():
    return [derive_owner(ROOT, i) for i in range(3)]


@pytest.fixture
def chain(owners):
    """A ledger with the registry deployed under a 2-of-3 owner set."""
    led = Ledger(RegistryContract(), ChainConfig(block_interval=15))
    deploy(led, owners[0], OwnerSet.from_root(ROOT, 3, 2))
    led.advance_block(15)
    return led


@pytest.fixture
def store():
    return ContentStore(chunk_size=4096)


class Publisher:
    def __init__(self, ledger, store, owners):
        self.ledger, self.store, self.owners = ledger, store, owners

    def __call__(self, image, version, product="cam", model="m1", advance=True):
        cid = self.store.put(image)
        rec = FirmwareRecord(product, version, cid, sha256(image), model)
        submit_publish(self.ledger, rec, self.owners[:2])
        if advance:
            self.ledger.advance_block(self.ledger.now + self.ledger.config.block_interval)
        return rec

    @property
    def client(self):
        return RegistryClient(self.ledger)


@pytest.fixture
def publish(chain, store, owners):
    return Publisher(chain, store, owners)


def rand_bytes(n, seed=0):
    return random.Random(seed).randbytes(n)
