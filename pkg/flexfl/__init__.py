"""
FLEXFL - Flexible-Aggregation Federated Learning over OFDMA
===========================================================

Seedable simulator and optimization library: fading channels, per-round
client/subchannel/modulation selection, flexible-aggregation training,
and convergence-bound verification.
"""

__version__ = "1.0.0"
__author__ = "flexfl developers"
