"""Domain-expert ensembles for single-image reflection removal.

Per-domain restoration experts are combined at inference time by a
reflection type-aware weighting module, either by fusing expert outputs
or by interpolating expert parameters.
"""

__version__ = "0.1.0"
