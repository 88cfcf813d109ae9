"""Switching-policy synthesis for stochastic systems against omega-regular
objectives, via interval-valued finite abstractions and partition refinement."""

from .abstraction import NoiseModel, Partition, SystemModel, load_system
from .automata import ProductModel, RabinAutomaton, load_dra, parse_dra, product, product_imc
from .components import (
    ComponentResult,
    find_extended_greatest_accepting,
    find_extended_permanent_accepting,
    find_greatest_permanent_winning,
)
from .geometry import BoxUnion, Rect
from .models import (
    BMDP,
    IMC,
    IntervalResult,
    MarkovChain,
    MemorylessPolicy,
    complement_result,
    enumerate_corner_mcs,
    induce_imc,
    validate_bmdp,
)
from .reachability import ReachSolution, maximize_reach, mc_reachability, o_extreme_row
from .simulate import SimulationOutcome, simulate_closed_loop
from .synth_continuous import ContinuousSynthesisConfig, synthesize_continuous
from .synth_finite import FiniteSynthesisConfig, SynthesisResult, synthesize_finite

__version__ = "0.1.0"
