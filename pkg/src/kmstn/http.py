"""HTTP client side of the ETSI 014-style API, shared by KMSTNs and SAEs."""
from __future__ import annotations

import ssl
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import httpx

from . import errors
from .errors import KmstnError, Unauthorized, Unreachable
from .model import KeyContainer

SAE_HEADER = "X-SAE-ID"


@dataclass(frozen=True)
class TlsFiles:
    cert: str
    key: str
    ca: str


def make_http_client(tls: Optional[TlsFiles] = None, timeout: float = 10.0,
                     max_connections: int = 256) -> httpx.Client:
    limits = httpx.Limits(max_connections=max_connections,
                          max_keepalive_connections=max_connections)
    if tls is None:
        return httpx.Client(timeout=timeout, limits=limits)
    ctx = ssl.create_default_context(ssl.Purpose.SERVER_AUTH, cafile=tls.ca)
    ctx.load_cert_chain(tls.cert, tls.key)
    return httpx.Client(timeout=timeout, limits=limits, verify=ctx)


def _is_tls_failure(exc: BaseException) -> bool:
    seen = set()
    while exc is not None and id(exc) not in seen:
        seen.add(id(exc))
        if isinstance(exc, ssl.SSLError):
            return True
        text = str(exc).lower()
        if "ssl" in text or "certificate" in text or "tlsv1" in text:
            return True
        exc = exc.__cause__ or exc.__context__
    return False


def raise_for_response(resp: httpx.Response) -> None:
    if resp.is_success:
        return
    try:
        body = resp.json()
    except ValueError:
        body = {}
    if not isinstance(body, dict) or "error" not in body:
        err = KmstnError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        err.http_status = resp.status_code
        raise err
    raise errors.from_body(resp.status_code, body)


def request(http: httpx.Client, method: str, url: str, **kwargs) -> httpx.Response:
    """Send a request, mapping transport failures onto library errors."""
    try:
        resp = http.request(method, url, **kwargs)
    except httpx.TransportError as exc:
        if _is_tls_failure(exc):
            raise Unauthorized(f"TLS handshake with {url} failed: {exc}") from None
        raise Unreachable(f"{method} {url} failed: {exc}") from None
    raise_for_response(resp)
    return resp


class Etsi014Client:
    """``/api/v1/keys/{sae}/{enc_keys,dec_keys,status}`` against one KME or KMSTN."""

    def __init__(self, base_url: str, http: httpx.Client, sae_id: Optional[str] = None):
        self.base_url = base_url.rstrip("/")
        self.http = http
        self.sae_id = sae_id

    def _headers(self):
        return {SAE_HEADER: self.sae_id} if self.sae_id else {}

    def enc_keys(self, slave_sae_id: str, number: int = 1, size: Optional[int] = None,
                 additional_slave_sae_ids: Sequence[str] = (),
                 extension_mandatory: Iterable[Mapping] = (),
                 extension_optional: Iterable[Mapping] = ()) -> KeyContainer:
        body = {"number": number}
        if size is not None:
            body["size"] = size
        if additional_slave_sae_ids:
            body["additional_slave_SAE_IDs"] = list(additional_slave_sae_ids)
        if extension_mandatory:
            body["extension_mandatory"] = [dict(e) for e in extension_mandatory]
        if extension_optional:
            body["extension_optional"] = [dict(e) for e in extension_optional]
        resp = request(self.http, "POST", f"{self.base_url}/api/v1/keys/{slave_sae_id}/enc_keys",
                       json=body, headers=self._headers())
        return KeyContainer.from_wire(resp.json())

    def dec_keys(self, master_sae_id: str, key_ids: Sequence[str]) -> KeyContainer:
        body = {"key_IDs": [{"key_ID": k} for k in key_ids]}
        resp = request(self.http, "POST", f"{self.base_url}/api/v1/keys/{master_sae_id}/dec_keys",
                       json=body, headers=self._headers())
        return KeyContainer.from_wire(resp.json())

    def status(self, slave_sae_id: str) -> dict:
        resp = request(self.http, "GET", f"{self.base_url}/api/v1/keys/{slave_sae_id}/status",
                       headers=self._headers())
        return resp.json()
