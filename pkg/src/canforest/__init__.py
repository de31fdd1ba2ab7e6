"""Adversarial-robustness toolkit for federated-forest CAN intrusion detection."""

from canforest.types import CanFrame, CanLog, TrafficClass

__version__ = "0.1.0"

__all__ = ["CanFrame", "CanLog", "TrafficClass", "__version__"]
