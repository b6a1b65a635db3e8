"""
Eraser Proxy
Debiasing reverse proxy: forwards inputs to the deployed model (the oracle), runs the
local patch models, subtracts their log-probabilities and returns both raw and fair
predictions. Also hosts the reference model server that exposes an MlpModel through
the oracle wire protocol.
"""

import logging
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import uvicorn
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

import nnet
from config import ProxyConfig
from errors import (ConfigError, EraserError, InvalidInputError, ModelLoadError, ProtocolError, ShapeError,
                    UpstreamUnavailableError)
from oracle_client import LocalOracle, OracleHandle, make_oracle
from prob_core import erase_multi_rows

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

VERSION = "1.0.0"

STATUS_BY_ERROR = {
    InvalidInputError: 400,
    ShapeError: 422,
    ProtocolError: 502,
    UpstreamUnavailableError: 502,
}


# Pydantic models
class PredictRequest(BaseModel):
    inputs: List[List[float]] = Field(..., min_length=1, description="Batch of feature vectors")


class PredictResponse(BaseModel):
    raw: List[List[float]]
    fair: List[List[float]]
    argmax_raw: List[int]
    argmax_fair: List[int]


class ModelPredictResponse(BaseModel):
    probs: List[List[float]]


class HealthResponse(BaseModel):
    status: str
    k: int
    patches: List[str]
    counters: Dict[str, int] = Field(default_factory=dict)


# --- Shared State ---
@dataclass
class ProxyState:
    """Oracle and patch models are read-only after startup; only counters change"""

    oracle: OracleHandle
    patches: Dict[str, nnet.MlpModel]
    max_in_flight: int = 64
    counters: Dict[str, int] = field(default_factory=lambda: {
        "requests": 0, "rows": 0, "rejected": 0, "upstream_errors": 0,
    })
    in_flight: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def k(self) -> int:
        return self.oracle.k

    @property
    def input_dim(self) -> int:
        return next(iter(self.patches.values())).input_dim

    def bump(self, key: str, amount: int = 1) -> None:
        with self.lock:
            self.counters[key] += amount

    def snapshot(self) -> Dict[str, int]:
        with self.lock:
            return dict(self.counters, in_flight=self.in_flight)


def _patch_name(model: nnet.MlpModel, path: str) -> str:
    return model.metadata.get("bias_attr") or Path(path).stem


def load_patches(paths: List[str]) -> Dict[str, nnet.MlpModel]:
    patches: Dict[str, nnet.MlpModel] = {}
    for path in paths:
        model = nnet.load_file(path)
        name = _patch_name(model, path)
        if name in patches:
            raise ConfigError(f"Two patches share the name '{name}'", path=path)
        patches[name] = model
    ks = {m.num_classes for m in patches.values()}
    dims = {m.input_dim for m in patches.values()}
    if len(ks) > 1 or len(dims) > 1:
        raise ModelLoadError("Patch models disagree on class count or input dimension", k=sorted(ks), dims=sorted(dims))
    return patches


def build_state(config: ProxyConfig, oracle: Optional[OracleHandle] = None) -> ProxyState:
    """
    Load patches, connect the oracle and run the startup health check.

    Raises:
        ConfigError: no upstream, no patches, or the upstream fails its health check
    """
    problems = config.validate()
    if oracle is not None:
        problems = [p for p in problems if not p.startswith("No upstream")]
    if problems:
        raise ConfigError("Proxy configuration errors: " + "; ".join(problems), problems=problems)

    patches = load_patches(config.patches)
    k = next(iter(patches.values())).num_classes
    if oracle is None:
        oracle = make_oracle(config.upstream_url or config.upstream_model, k=k, timeout_ms=config.timeout_ms,
                             normalize_policy=config.normalize_policy)
    if oracle.k != k:
        raise ConfigError(f"Oracle has {oracle.k} classes but patches have {k}")
    if isinstance(oracle, LocalOracle) and oracle.input_dim != next(iter(patches.values())).input_dim:
        raise ConfigError("Upstream model and patches disagree on input dimension")
    if not oracle.health_check():
        raise ConfigError(f"Upstream {oracle.oracle_id} failed the startup health check")
    logger.info(f"✓ Proxy ready: oracle {oracle.oracle_id}, patches {list(patches)}")
    return ProxyState(oracle=oracle, patches=patches, max_in_flight=config.max_in_flight)


def erase_batch(state: ProxyState, X: np.ndarray):
    """Raw oracle probabilities and fair probabilities with every patch rule subtracted."""
    raw = state.oracle.query_array(X)
    rules = [nnet.predict_proba(patch, X) for patch in state.patches.values()]
    return raw, erase_multi_rows(raw, rules)


# --- Error Handlers ---
def _error_response(status: int, doc: Dict) -> JSONResponse:
    return JSONResponse(status_code=status, content=doc)


async def _validation_handler(request: Request, exc: RequestValidationError) -> JSONResponse:
    errors = [
        {"field": ".".join(str(part) for part in err["loc"] if part != "body"), "message": err["msg"]}
        for err in exc.errors()
    ]
    doc = {
        "error": "INVALID_REQUEST",
        "message": f"Malformed request body at {errors[0]['field'] if errors else 'body'}",
        "details": {"errors": errors},
    }
    return _error_response(400, doc)


async def _eraser_error_handler(request: Request, exc: EraserError) -> JSONResponse:
    status = next((code for kind, code in STATUS_BY_ERROR.items() if isinstance(exc, kind)), 500)
    if status >= 500:
        logger.error(f"{request.url.path} failed: {exc.message}")
    return _error_response(status, exc.to_dict())


def _as_batch(inputs: List[List[float]], width: int) -> np.ndarray:
    lengths = {len(row) for row in inputs}
    if lengths != {width}:
        raise ShapeError(f"Every input needs {width} features, got lengths {sorted(lengths)}",
                         expected=width, got=sorted(lengths))
    return np.asarray(inputs, dtype=np.float64)


def _install_handlers(app: FastAPI) -> None:
    app.add_exception_handler(RequestValidationError, _validation_handler)
    app.add_exception_handler(EraserError, _eraser_error_handler)


# --- Proxy App ---
def create_proxy_app(config: Optional[ProxyConfig] = None, oracle: Optional[OracleHandle] = None,
                     state: Optional[ProxyState] = None) -> FastAPI:
    """Build the proxy; without an explicit state the lifespan loads it from config/env."""

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        """Handle application startup and shutdown"""
        if getattr(app.state, "proxy", None) is None:
            app.state.proxy = build_state(config or ProxyConfig.from_sources(), oracle)
        logger.info("✓ Eraser proxy started")
        yield
        logger.info(f"✓ Eraser proxy stopped ({app.state.proxy.snapshot()})")

    app = FastAPI(
        title="Eraser Proxy",
        description="Inference-time bias removal for a black-box classifier",
        version=VERSION,
        lifespan=lifespan,
    )
    app.state.proxy = state
    _install_handlers(app)

    @app.middleware("http")
    async def limit_in_flight(request: Request, call_next):
        """Reject predictions beyond max_in_flight instead of queueing them"""
        proxy: Optional[ProxyState] = app.state.proxy
        if proxy is None or request.url.path != "/v1/predict":
            return await call_next(request)
        with proxy.lock:
            admitted = proxy.in_flight < proxy.max_in_flight
            if admitted:
                proxy.in_flight += 1
            else:
                proxy.counters["rejected"] += 1
        if not admitted:
            logger.warning(f"Rejecting request: {proxy.max_in_flight} requests already in flight")
            return _error_response(429, {
                "error": "TOO_MANY_REQUESTS",
                "message": f"More than {proxy.max_in_flight} requests in flight",
                "details": {"max_in_flight": proxy.max_in_flight},
            })
        try:
            return await call_next(request)
        finally:
            with proxy.lock:
                proxy.in_flight -= 1

    @app.get("/health", response_model=HealthResponse)
    def health_check():
        """Health check endpoint"""
        proxy: ProxyState = app.state.proxy
        return HealthResponse(status="ok", k=proxy.k, patches=list(proxy.patches), counters=proxy.snapshot())

    @app.post("/v1/predict", response_model=PredictResponse)
    def predict(body: PredictRequest):
        proxy: ProxyState = app.state.proxy
        proxy.bump("requests")
        X = _as_batch(body.inputs, proxy.input_dim)
        try:
            raw, fair = erase_batch(proxy, X)
        except (ProtocolError, UpstreamUnavailableError):
            proxy.bump("upstream_errors")
            raise
        proxy.bump("rows", X.shape[0])
        return PredictResponse(
            raw=raw.tolist(),
            fair=fair.tolist(),
            argmax_raw=np.argmax(raw, axis=1).tolist(),
            argmax_fair=np.argmax(fair, axis=1).tolist(),
        )

    return app


# --- Reference Model Server ---
def create_model_app(model: nnet.MlpModel) -> FastAPI:
    """Serve a local model through the oracle protocol: POST /v1/predict {"inputs"} -> {"probs"}."""
    app = FastAPI(title="Eraser Model Server", version=VERSION)
    _install_handlers(app)

    @app.get("/health")
    def model_health():
        return {"status": "ok", "k": model.num_classes, "input_dim": model.input_dim}

    @app.post("/v1/predict", response_model=ModelPredictResponse)
    def model_predict(body: PredictRequest):
        X = _as_batch(body.inputs, model.input_dim)
        return ModelPredictResponse(probs=nnet.predict_proba(model, X).tolist())

    return app


def serve(config: ProxyConfig, oracle: Optional[OracleHandle] = None) -> None:
    """Run the proxy until interrupted; shutdown drains in-flight requests up to the timeout."""
    proxy_app = create_proxy_app(config, oracle)
    logger.info(f"Starting eraser proxy on {config.host}:{config.port}")
    uvicorn.run(proxy_app, host=config.host, port=config.port,
                timeout_graceful_shutdown=config.shutdown_timeout_s, log_level="info")


app = create_proxy_app()
