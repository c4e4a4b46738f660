"""Desk-scale simulation of the EagleCam / deployer dual-node flight software."""

__version__ = "0.1.0"
