"""Blockchain-coordinated attestation across heterogeneous TEE schemes, in simulation."""

__version__ = "0.1.0"
