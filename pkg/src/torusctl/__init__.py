"""Controllability analysis for control-affine systems on flat tori.

Bracket rank scans, chain-recurrence graphs, drift flows and a
steering synthesizer, plus the non-controllable torus example.
"""

from .fields import VectorField, bracket_rank, hormander_scan, lie_bracket
from .flow import ControlLaw, DisturbanceLaw, Trajectory, flow_map, integrate_controlled
from .manifold import displacement, distance, wrap
from .recurrence import build_chain_graph, chain_path, is_chain_transitive
from .synthesis import global_steer, local_chow_steer
from .systems import builtin, gated_torus

__version__ = "0.1.0"

__all__ = [
    "VectorField",
    "bracket_rank",
    "hormander_scan",
    "lie_bracket",
    "ControlLaw",
    "DisturbanceLaw",
    "Trajectory",
    "flow_map",
    "integrate_controlled",
    "displacement",
    "distance",
    "wrap",
    "build_chain_graph",
    "chain_path",
    "is_chain_transitive",
    "global_steer",
    "local_chow_steer",
    "builtin",
    "gated_torus",
]
