"""Peer-to-peer distributed training with serverless gradient offload, simulated on one machine."""

__version__ = "0.1.0"
