"""Scale-invariant physics training: tape, networks, simulators, harness."""

__version__ = "0.1.0"
