"""Reverse-anneal search-range simulator for an engineered 16-qubit Ising gadget."""

__version__ = "0.1.0"

from .ising import (  # noqa: F401
    ChimeraLayout,
    Enumeration,
    GadgetError,
    GadgetSpec,
    IsingProblem,
    OutcomeClass,
    Role,
    build_gadget,
    classify,
    config_from_bits,
    config_to_bits,
    enumerate_states,
    gauge_config,
    gauge_transform,
    hamming,
    pick_dead_qubits,
    tile,
    validate_gadget,
)
