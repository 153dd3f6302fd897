"""Bit-constrained DMA receivers for multi-user MIMO-OFDM uplink."""

__version__ = "0.1.0"
