"""Request and response bodies of the HTTP services."""
from __future__ import annotations

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class KeyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    number: int = Field(1, ge=1)
    size: Optional[int] = Field(None, gt=0)
    additional_slave_SAE_IDs: List[str] = Field(default_factory=list)
    extension_mandatory: List[Dict[str, Any]] = Field(default_factory=list)
    extension_optional: List[Dict[str, Any]] = Field(default_factory=list)


class KeyIdEntry(BaseModel):
    key_ID: str
    key_ID_extension: Optional[Dict[str, Any]] = None


class KeyIdsRequest(BaseModel):
    key_IDs: List[KeyIdEntry] = Field(min_length=1)


class KeyEntry(BaseModel):
    key_ID: str
    key: str


class KeyContainerOut(BaseModel):
    keys: List[KeyEntry]


class EnvelopeIn(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iv: str
    ciphertext: str
    session: str
    sae: Optional[str] = None


class StatusOut(BaseModel):
    model_config = ConfigDict(extra="allow")

    slave_SAE_ID: str
    master_SAE_ID: Optional[str] = None
    source_KME_ID: Optional[str] = None
    target_KME_ID: Optional[str] = None
    key_size: Optional[int] = None
    stored_key_count: Optional[int] = None
    max_key_count: Optional[int] = None
    max_key_per_request: Optional[int] = None
    max_key_size: Optional[int] = None
    min_key_size: Optional[int] = None
    max_SAE_ID_count: Optional[int] = None
    kmstn_id: Optional[str] = None
    reachable: Optional[bool] = None
    route: Optional[List[str]] = None


class AcceptedOut(BaseModel):
    model_config = ConfigDict(extra="allow")

    accepted: bool = True


class ErrorOut(BaseModel):
    error: str
    message: str
    details: Dict[str, Any] = Field(default_factory=dict)
