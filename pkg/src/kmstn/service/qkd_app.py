"""FastAPI front of a simulated QKD pair.

One server hosts both KMEs of the pair; the SAE id in the path selects the
face, as it does on the real equipment's REST interface.
"""
from __future__ import annotations

from fastapi import FastAPI

from ..simqkd import QkdPair
from .common import container_out, install_error_handlers, lifespan
from .schemas import KeyContainerOut, KeyIdsRequest, KeyRequest, StatusOut


def create_qkd_app(pair: QkdPair) -> FastAPI:
    app = FastAPI(title=f"simulated QKD pair {pair.pair_id}", lifespan=lifespan)
    app.state.pair = pair
    install_error_handlers(app)

    @app.post("/api/v1/keys/{slave_SAE_ID}/enc_keys", response_model=KeyContainerOut)
    def enc_keys(slave_SAE_ID: str, body: KeyRequest):
        return container_out(pair.enc_keys(slave_SAE_ID, body.number, body.size))

    @app.get("/api/v1/keys/{slave_SAE_ID}/enc_keys", response_model=KeyContainerOut)
    def enc_keys_get(slave_SAE_ID: str, number: int = 1, size: int = None):
        return container_out(pair.enc_keys(slave_SAE_ID, number, size))

    @app.post("/api/v1/keys/{master_SAE_ID}/dec_keys", response_model=KeyContainerOut)
    def dec_keys(master_SAE_ID: str, body: KeyIdsRequest):
        return container_out(pair.dec_keys(master_SAE_ID, [k.key_ID for k in body.key_IDs]))

    @app.get("/api/v1/keys/{slave_SAE_ID}/status", response_model=StatusOut)
    def status(slave_SAE_ID: str):
        return pair.status(slave_SAE_ID)

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "pair_id": pair.pair_id}

    return app
