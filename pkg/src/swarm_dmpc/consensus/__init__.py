"""Distributed ADMM consensus: graph, messages, and the cycle engine."""
from .engine import (AdmmConfig, AdmmResiduals, AgentNode, ConsensusEngine, CycleResult,
                     CycleTimings, EdgeState, NodeInfeasible, dual_update, edge_update,
                     node_update, shift_vector)
from .graph import InteractionGraph
from .messages import (EDGE_RESULT, TRAJECTORY_SHARE, LocalityError, Message, QueueTransport,
                       RecordingTransport, decode_stream, encode)

__all__ = [
    "AdmmConfig", "AdmmResiduals", "AgentNode", "ConsensusEngine", "CycleResult", "CycleTimings",
    "EdgeState", "NodeInfeasible", "dual_update", "edge_update", "node_update", "shift_vector",
    "InteractionGraph", "Message", "QueueTransport", "RecordingTransport", "LocalityError",
    "encode", "decode_stream", "TRAJECTORY_SHARE", "EDGE_RESULT",
]
