"""HTTP services: the simulated QKD pair and the KMSTN."""
from .kmstn_app import create_kmstn_app
from .qkd_app import create_qkd_app

__all__ = ["create_kmstn_app", "create_qkd_app"]
