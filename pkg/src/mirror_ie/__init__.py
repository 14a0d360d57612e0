"""Multi-slot tuple extraction as cyclic graph decoding over a linearized
instruction + schema + text token stream."""

__version__ = "0.1.0"
