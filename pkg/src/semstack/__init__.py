"""semstack: a deterministic simulator of a semantically layered network stack.

Layers are split where the meaning of the carried symbols changes: the
physical layer moves embodied symbols, the network layer moves generic
symbols (TDUs), and the computation layer moves application data (ADUs).
"""

from .core import (PLANCK_TIME, SPEED_OF_LIGHT, ClockSpec, EntityId, IdAllocator, Label,
                   LabelConstraint, Region, SpaceTimePoint, clock_bits, light_cone_reachable,
                   light_cone_slack, resolve)
from .embodiment import (Codec, EmbodimentSpec, SymbolBlock, bec_distort, bsc_distort, decay,
                         decode, encode, translate)
from .errors import (BufferOverflowError, ContractViolation, DistortionError,
                     EnergyExhaustedError, FramingError, InvariantViolation, NoRouteError,
                     ProtocolError, ScenarioError, SemstackError, UnreachableLinkError,
                     ValidationError)
from .physical import (Channel, LossModel, Node, PathLimits, PathOffer, Topology,
                       effective_capacity, estimate_etx, estimate_ett, negotiate_paths)
from .network import (DeficitRoundRobin, FlowSpec, flow_select_path, fragment,
                      multiplex_allocate, reassemble)
from .computation import AppProfile, Contract, Encoding, adapt_encoding, package_adus
from .sim import rng_for

__version__ = "0.1.0"


def __getattr__(name):
    # the engine pulls in every layer; load it on first use
    if name in ("Simulation", "run", "load_scenario", "load_scenario_file", "export_metrics"):
        from . import sim
        return getattr(sim, name)
    raise AttributeError(name)
