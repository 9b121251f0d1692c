"""Update a simulated fleet under each topology and compare origin load."""

import argparse
import json

from otachain.fleet import TOPOLOGIES, simulate_fleet

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--devices", type=int, default=20)
ap.add_argument("--seed", type=int, default=1)
args = ap.parse_args()

for topo in TOPOLOGIES:
    rep = simulate_fleet(args.devices, topo, seed=args.seed)
    print(json.dumps(rep.to_json(), sort_keys=True))
