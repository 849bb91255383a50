"""Flow-to-packet hybrid traffic classification.

A flow-level gradient-boosted teacher, trained on a small DPI-labeled sample,
labels a larger corpus whose packet headers then train a CART student. The
student compiles into a rule table a router can apply per packet.
"""

from .traffic import AppType, CoSLabel, Flow, Packet, assemble_flows, cos_of_app

__version__ = "0.1.0"

__all__ = ["AppType", "CoSLabel", "Flow", "Packet", "assemble_flows", "cos_of_app", "__version__"]
