"""Two-strand Unitychain: threshold-signed strands that converge at epoch
blocks and diverge again after a reshuffle, plus a deterministic simulator
and metrics over its event logs."""

from .chain import CycleBlock, EpochBlock, EpochGenesisBlock, OriginBlock, ProtocolParams
from .engine import NodeEngine, StrandPhase
from .metrics import build_report, compute_downtime
from .scenario import ScenarioConfig, parse_scenario
from .simnet import run_simulation
from .topology import Strand

__all__ = [
    "CycleBlock",
    "EpochBlock",
    "EpochGenesisBlock",
    "NodeEngine",
    "OriginBlock",
    "ProtocolParams",
    "ScenarioConfig",
    "Strand",
    "StrandPhase",
    "build_report",
    "compute_downtime",
    "parse_scenario",
    "run_simulation",
]
