"""Air-ground teaming simulator.

A deterministic discrete-time simulator for a small team of UAVs and UGVs
that share a compact semantic-topological map over an intermittent,
gossip-style radio link.  The UAV builds the map from nadir imagery and
physically ferries messages between ground robots; each UGV runs a
plan/validate/execute loop against its own merged copy of the map.
"""

__version__ = "0.1.0"
