from __future__ import annotations

import logging
from contextlib import asynccontextmanager

import anyio.to_thread
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..errors import Depleted, InvariantError, KmstnError
from ..model import KeyContainer
from .schemas import KeyContainerOut

log = logging.getLogger(__name__)

# sync endpoints run in a worker pool; the default of 40 would cap concurrency
WORKER_THREADS = 256


@asynccontextmanager
async def lifespan(app: FastAPI):
    anyio.to_thread.current_default_thread_limiter().total_tokens = WORKER_THREADS
    yield


def install_error_handlers(app: FastAPI) -> None:
    @app.exception_handler(KmstnError)
    async def _kmstn_error(request: Request, exc: KmstnError):
        # an empty buffer is routine under load; real server faults stay at warning
        if exc.http_status >= 500 and not isinstance(exc, Depleted):
            log.warning("%s %s -> %s: %s", request.method, request.url.path, exc.code, exc.message)
        else:
            log.info("%s %s -> %s: %s", request.method, request.url.path, exc.code, exc.message)
        return JSONResponse(status_code=exc.http_status, content=exc.to_body())

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        err = InvariantError("request body failed validation",
                             {"errors": [{"loc": [str(p) for p in e.get("loc", ())],
                                          "msg": e.get("msg", "")} for e in exc.errors()]})
        return JSONResponse(status_code=err.http_status, content=err.to_body())


def container_out(container: KeyContainer) -> KeyContainerOut:
    return KeyContainerOut.model_validate(container.to_wire())
