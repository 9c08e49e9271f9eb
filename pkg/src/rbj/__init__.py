"""Resilient block Jacobi optimization over lossy broadcast networks.

Distributed minimization of locally coupled separable convex costs where
agents cache the last received neighbor payloads and keep updating through
packet loss, plus a deterministic network simulator, centralized oracles,
and a partition-based grid state-estimation testbed.
"""

from .cost import QuadraticCost, RobustCost, SeparableCost, finite_diff_oracle
from .graph import PartitionedGraph, build_graph, neighbors
from .grid import Feeder, MeasurementSet, build_area_cost, measure, rectangularize, synth_feeder
from .netsim import LossModel, RunTrace, run, staleness
from .oracle import CentralizedSolution, RateFit, fit_rate, solve_newton, solve_wls
from .protocol import (
    AgentState,
    BroadcastMessage,
    ProtocolError,
    SingularUpdateError,
    act_receive,
    act_transmit,
    act_update,
    init_agent,
    rwls_handshake,
    sync_round,
)

__all__ = [
    "PartitionedGraph",
    "build_graph",
    "neighbors",
    "SeparableCost",
    "QuadraticCost",
    "RobustCost",
    "finite_diff_oracle",
    "AgentState",
    "BroadcastMessage",
    "ProtocolError",
    "SingularUpdateError",
    "init_agent",
    "act_transmit",
    "act_receive",
    "act_update",
    "sync_round",
    "rwls_handshake",
    "LossModel",
    "RunTrace",
    "run",
    "staleness",
    "Feeder",
    "MeasurementSet",
    "synth_feeder",
    "measure",
    "rectangularize",
    "build_area_cost",
    "CentralizedSolution",
    "RateFit",
    "solve_wls",
    "solve_newton",
    "fit_rate",
]

__version__ = "0.1.0"
