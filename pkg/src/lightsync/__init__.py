"""Constant-size PoW light-client protocol library with a deterministic
simulation harness and analytic security-bounds calculators."""

from . import bounds, chain, incentive, mmr, protocol, simnet

__version__ = "0.1.0"

__all__ = ["bounds", "chain", "incentive", "mmr", "protocol", "simnet", "__version__"]
