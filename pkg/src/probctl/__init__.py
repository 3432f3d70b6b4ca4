"""Probability control of stochastic transport actuators on buffer networks.

Simulation of cyclic (or general) production networks whose transport is
performed by quantized stochastic actuators, together with the KYP-style
dissipativity checks and exact one-step Lyapunov drift evaluation used to
certify them.
"""

from probctl.errors import (
    CommandRangeError,
    ConsistencyError,
    EnumerationError,
    NumericError,
    ParameterError,
    ProbCtlError,
    ScenarioError,
    StateError,
    TopologyError,
)

__version__ = "0.1.0"

__all__ = [
    "CommandRangeError",
    "ConsistencyError",
    "EnumerationError",
    "NumericError",
    "ParameterError",
    "ProbCtlError",
    "ScenarioError",
    "StateError",
    "TopologyError",
]
