#!/usr/bin/env python3
"""Generate the bundled 14-bus MV benchmark network file.

Topology is CIGRE-MV-flavored and radial: an HV slack behind a 110/20 kV
transformer, a 20 kV trunk (node1..node11 plus a short spur to node21), a
long second-feeder stub (node12), and PV units spread along the feeder.
node21 carries pv09, the generator served by the external converter client.
Line IDs line1/line2/line12 carry the lengths that the length-modification
scenario rewrites.

Values are repo data tuned so that the whole property suite holds; line
reactance dominates resistance, which keeps the inverse-J4 voltage
sensitivity within a couple percent of the true perturbation response.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cellgrid.netfile import write_network
from cellgrid.netmodel import Branch, Bus, Generator, Load, Network

# 20 kV overhead line, X-dominant variant (ohm/km, S/km)
LINE_R, LINE_X, LINE_B = 0.082, 0.81, 3.0e-6


def line(lid, a, b, km):
    return Branch(lid, a, b, LINE_R, LINE_X, LINE_B, km, 1.0)


def build() -> Network:
    buses = (
        Bus("node0", "slack", 110.0, 1.03),
        Bus("node1", "pq", 20.0),
        Bus("node2", "pq", 20.0),
        Bus("node3", "pq", 20.0),
        Bus("node4", "pq", 20.0),
        Bus("node5", "pq", 20.0),
        Bus("node6", "pq", 20.0),
        Bus("node7", "pq", 20.0),
        Bus("node8", "pq", 20.0),
        Bus("node9", "pq", 20.0),
        Bus("node10", "pq", 20.0),
        Bus("node11", "pq", 20.0),
        Bus("node12", "pq", 20.0),
        Bus("node21", "pq", 20.0),
    )
    branches = (
        # 110/20 kV, 40 MVA, uk 10%, referred to the 20 kV side
        Branch("trafo1", "node0", "node1", 0.1, 1.0, 0.0, 1.0, 1.0),
        line("line1", "node1", "node2", 2.8),
        line("line2", "node2", "node3", 4.4),
        line("line3", "node3", "node4", 0.61),
        line("line4", "node4", "node5", 0.56),
        line("line5", "node5", "node6", 1.54),
        line("line6", "node6", "node7", 0.24),
        line("line7", "node8", "node9", 0.32),
        line("line8", "node9", "node10", 0.77),
        line("line9", "node10", "node11", 0.33),
        line("line10", "node9", "node21", 0.5),
        line("line11", "node1", "node12", 4.9),
        line("line12", "node3", "node8", 1.3),
    )
    loads = (
        Load("load01", "node1", 0.30, 0.10),
        Load("load03", "node3", 0.50, 0.17),
        Load("load04", "node4", 0.44, 0.15),
        Load("load05", "node5", 0.72, 0.25),
        Load("load06", "node6", 0.55, 0.19),
        Load("load08", "node8", 0.58, 0.20),
        Load("load09", "node9", 0.57, 0.19),
        Load("load10", "node10", 0.54, 0.18),
        Load("load11", "node11", 0.33, 0.11),
        Load("load12", "node12", 0.39, 0.13),
        Load("load21", "node21", 0.20, 0.065),
    )
    gens = (
        Generator("pv01", "node1", 0.30, 0.0, -0.25, 0.25, True, False),
        Generator("pv02", "node2", 0.50, 0.0, -0.40, 0.40, True, False),
        Generator("pv03", "node3", 0.40, 0.0, -0.30, 0.30, True, False),
        Generator("pv05", "node5", 0.50, 0.0, -0.35, 0.35, True, False),
        Generator("pv07", "node7", 0.30, 0.0, -0.25, 0.25, True, False),
        Generator("pv10", "node10", 0.50, 0.0, -0.35, 0.35, True, False),
        Generator("pv12", "node12", 0.35, 0.0, -0.30, 0.30, True, False),
        # replaced by the converter client during co-simulation
        Generator("pv09", "node21", 0.20, 0.0, -0.12, 0.12, False, True),
    )
    return Network(buses, branches, loads, gens, base_mva=10.0,
                   base_frequency_hz=50.0, name="cigre-mv-14")


if __name__ == "__main__":
    out = os.path.join(os.path.dirname(__file__), "..", "src", "cellgrid", "data",
                       "cigre_mv_14.net")
    net = build()
    write_network(net, out)
    print(f"wrote {os.path.normpath(out)}")
