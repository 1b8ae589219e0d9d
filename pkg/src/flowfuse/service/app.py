"""FastAPI wrapper around the pipeline operations.

Every endpoint binds one request model to one ``run_*`` function. Failed
validations return 422 (pydantic), domain errors return 400 with a typed
body; check endpoints always return 200 and report pass/fail in the
payload, leaving exit-code policy to the client.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..errors import ConfigError, DataError, FlowFuseError
from .schemas import (
    ErrorResponse,
    EvaluateRequest,
    EvaluateResponse,
    FuseRequest,
    GradcheckRequest,
    GradcheckResponse,
    HealthResponse,
    InferRequest,
    InferResponse,
    PhantomsRequest,
    PhantomsResponse,
    RoundtripRequest,
    RoundtripResponse,
    TrainRequest,
    TrainResponse,
)


def create_app() -> FastAPI:
    app = FastAPI(title="flowfuse", version=__version__)

    @app.exception_handler(FlowFuseError)
    async def domain_error(request: Request, exc: FlowFuseError):
        if isinstance(exc, ConfigError):
            kind = "config"
        elif isinstance(exc, DataError):
            kind = "data"
        else:
            kind = "check"
        payload = ErrorResponse(kind=kind, message=str(exc))
        return JSONResponse(status_code=400, content=payload.model_dump())

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest):
        return pipeline.run_train(req)

    @app.post("/infer", response_model=InferResponse)
    def infer(req: InferRequest):
        return pipeline.run_infer(req)

    @app.post("/fuse", response_model=InferResponse)
    def fuse(req: FuseRequest):
        return pipeline.run_fuse(req)

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest):
        return pipeline.run_evaluate(req)

    @app.post("/roundtrip-check", response_model=RoundtripResponse)
    def roundtrip_check(req: RoundtripRequest):
        return pipeline.run_roundtrip_check(req)

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest):
        return pipeline.run_gradcheck(req)

    @app.post("/phantoms", response_model=PhantomsResponse)
    def phantoms(req: PhantomsRequest):
        return pipeline.run_make_phantoms(req)

    return app
