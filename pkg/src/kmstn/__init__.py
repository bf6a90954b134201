"""Trusted-node key relay over simulated QKD links with ML-KEM hybrid hops."""
from .errors import KmstnError
from .model import (AckContainer, AckStatus, EncryptedEnvelope, ExtKeyContainer, KeyBlock,
                    KeyContainer, VoidRequest)

__version__ = "0.1.0"

__all__ = ["AckContainer", "AckStatus", "EncryptedEnvelope", "ExtKeyContainer", "KeyBlock",
           "KeyContainer", "KmstnError", "VoidRequest", "__version__"]
