import pytest

from otachain.fleet import TOPOLOGIES, simulate_fleet


@pytest.mark.parametrize("topology", TOPOLOGIES)
def test_every_topology_updates_the_fleet(topology):
    rep = simulate_fleet(6, topology, firmware_size=4096, partition_size=8192)
    assert rep.updated == 6 and rep.failed == 0 and not rep.errors
    assert rep.versions == {1: 6}


def test_gateway_shields_the_origin():
    edge = simulate_fleet(5, "edge-cloud", firmware_size=4096, partition_size=8192)
    hybrid = simulate_fleet(5, "edge-gateway-cloud", firmware_size=4096, partition_size=8192)
    assert edge.origin_downloads == 5
    assert hybrid.origin_downloads == 1


def test_unknown_topology():
    with pytest.raises(ValueError):
        simulate_fleet(1, "mesh")
