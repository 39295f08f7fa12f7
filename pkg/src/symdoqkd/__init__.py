"""Simulator and protocol stack for an entanglement-based symmetric DO-QKD network."""

from symdoqkd.source import (
    ChannelPlan,
    ItuChannel,
    PairEmission,
    SourceParams,
    build_default_plan,
    channel_frequency_thz,
    conjugate_channel,
    generate_pair_emissions,
)
from symdoqkd.optics import ArmKind, DetectorParams, PathParams, detect, transport_pair
from symdoqkd.coincidence import CoincidenceConfig, car, delay_variance, find_coincidences
from symdoqkd.protocol import (
    FrameConfig,
    SecurityPolicy,
    SessionReport,
    assign_bases,
    run_pair_session,
)
from symdoqkd.network import Topology, build_topology, establish_end_to_end, xor_relay

__version__ = "0.1.0"

__all__ = [
    "ArmKind",
    "ChannelPlan",
    "CoincidenceConfig",
    "DetectorParams",
    "FrameConfig",
    "ItuChannel",
    "PairEmission",
    "PathParams",
    "SecurityPolicy",
    "SessionReport",
    "SourceParams",
    "Topology",
    "assign_bases",
    "build_default_plan",
    "build_topology",
    "car",
    "channel_frequency_thz",
    "conjugate_channel",
    "delay_variance",
    "detect",
    "establish_end_to_end",
    "find_coincidences",
    "generate_pair_emissions",
    "run_pair_session",
    "transport_pair",
    "xor_relay",
]
