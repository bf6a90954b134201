"""FastAPI front of a KMSTN: the 014-style SAE API plus the peer relay endpoints.

The caller's SAE id travels in the ``X-SAE-ID`` header; on an mTLS mesh the
transport already restricts callers to certificate holders of the local CA.
"""
from __future__ import annotations

from typing import Optional

from fastapi import FastAPI, Header

from ..errors import Unauthorized
from ..http import SAE_HEADER
from ..model import EncryptedEnvelope
from ..node import KmstnNode
from .common import container_out, install_error_handlers, lifespan
from .schemas import (AcceptedOut, EnvelopeIn, KeyContainerOut, KeyIdsRequest, KeyRequest,
                      StatusOut)


def _caller(value: Optional[str]) -> str:
    if not value:
        raise Unauthorized(f"missing {SAE_HEADER} header")
    return value


def _envelope(body: EnvelopeIn) -> EncryptedEnvelope:
    return EncryptedEnvelope.from_wire(body.model_dump(exclude_none=True))


def create_kmstn_app(node: KmstnNode) -> FastAPI:
    app = FastAPI(title=f"KMSTN {node.kmstn_id}", lifespan=lifespan)
    app.state.node = node
    install_error_handlers(app)

    @app.post("/api/v1/keys/{slave_SAE_ID}/enc_keys", response_model=KeyContainerOut)
    def enc_keys(slave_SAE_ID: str, body: KeyRequest,
                 x_sae_id: Optional[str] = Header(None, alias=SAE_HEADER)):
        return container_out(node.handle_get_key(
            _caller(x_sae_id), slave_SAE_ID, body.number, body.size,
            body.additional_slave_SAE_IDs, body.extension_mandatory, body.extension_optional))

    @app.post("/api/v1/keys/{master_SAE_ID}/dec_keys", response_model=KeyContainerOut)
    def dec_keys(master_SAE_ID: str, body: KeyIdsRequest,
                 x_sae_id: Optional[str] = Header(None, alias=SAE_HEADER)):
        return container_out(node.handle_get_key_with_ids(
            _caller(x_sae_id), master_SAE_ID, [k.key_ID for k in body.key_IDs]))

    @app.get("/api/v1/keys/{slave_SAE_ID}/status", response_model=StatusOut)
    def status(slave_SAE_ID: str, x_sae_id: Optional[str] = Header(None, alias=SAE_HEADER)):
        return node.status(x_sae_id, slave_SAE_ID)

    @app.post("/api/v1/ext_keys", response_model=AcceptedOut)
    def ext_keys(body: EnvelopeIn):
        return node.handle_ext_keys(_envelope(body))

    @app.post("/api/v1/ack_containers", response_model=AcceptedOut)
    def ack_containers(body: EnvelopeIn):
        return node.handle_ack_containers(_envelope(body))

    @app.post("/api/v1/void_keys", response_model=AcceptedOut)
    def void_keys(body: EnvelopeIn):
        return node.handle_void_keys(_envelope(body))

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "kmstn_id": node.kmstn_id}

    return app
