"""Seedable Monte-Carlo simulator of smart balancing by balance responsible parties.

Agents estimate the control block's FRR demand from near-real-time imbalance
data and deviate from schedule when single imbalance pricing makes it
profitable; a single busbar model turns their actions into frequency
deviations and FRR activation.
"""
from .agent import AgentParams, AgentState, DemandEstimate
from .busbar import BusbarParams, GridModel, GridState
from .montecarlo import EnsembleConfig, RunResult, RunSpec, SimConfig, run_ensemble, run_simulation
from .nrt import NrtBulletin, NrtScenario
from .pricing import PriceCurve, PriceModel

__all__ = [
    "AgentParams", "AgentState", "DemandEstimate", "BusbarParams", "GridModel", "GridState",
    "EnsembleConfig", "RunResult", "RunSpec", "SimConfig", "run_ensemble", "run_simulation",
    "NrtBulletin", "NrtScenario", "PriceCurve", "PriceModel",
]
__version__ = "0.1.0"
