"""Robust Volt-VAR dispatch toolkit for radial distribution feeders.

Computes schedules for slow voltage-control devices (switched capacitor
banks, voltage regulators) such that fast reactive-power controls (DG and
SVC setpoints) can keep voltages secure for every load/generation
realization inside a box uncertainty set.  The robust schedule is found by
column-and-constraint generation over mixed-integer second-order-cone
programs.
"""

from voltvar.netmodel import Network, Scenario, parse_network, validate_radial

__all__ = [
    "Network",
    "Scenario",
    "parse_network",
    "validate_radial",
]

__version__ = "0.1.0"
