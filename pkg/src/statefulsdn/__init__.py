"""Stateful SDN data plane: OpenState-style pipeline, traffic-management
rule compilers, a reactive-controller baseline and a deterministic
discrete-event simulator to compare them."""

__version__ = "0.1.0"
