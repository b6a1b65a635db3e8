"""
Oracle Client
Black-box access to the deployed model: an in-process adapter around an MlpModel,
an HTTP adapter speaking the /v1/predict JSON protocol, and an optional response
cache. Everything downstream sees only probability vectors.
"""

import hashlib
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import httpx
import numpy as np
import requests

import nnet
from errors import ConfigError, ProtocolError, ShapeError, UpstreamUnavailableError
from prob_core import ProbVector, from_scores

logger = logging.getLogger(__name__)

NORMALIZE_POLICIES = ("strict", "renormalize")
STRICT_SUM_TOLERANCE = 1e-6
PREDICT_PATH = "/v1/predict"
HEALTH_PATH = "/health"


@dataclass
class OracleResponse:
    probs: List[ProbVector]
    latency_ms: float


# --- Response Normalization ---
def normalize_response(rows: Any, k: int, policy: str = "strict") -> List[ProbVector]:
    """
    Turn raw oracle rows into ProbVectors.

    A single score for a binary task expands to [1 - s, s]. Under 'strict' a row whose
    sum is more than 1e-6 from 1 is a protocol violation; 'renormalize' divides by the sum.
    """
    if policy not in NORMALIZE_POLICIES:
        raise ConfigError(f"normalize_policy must be one of {NORMALIZE_POLICIES}, got '{policy}'")
    if not isinstance(rows, list):
        raise ProtocolError("Oracle response 'probs' must be a list of rows")
    out = []
    for i, row in enumerate(rows):
        if not isinstance(row, list):
            raise ProtocolError(f"Row {i} is a scalar; the oracle must return full probability vectors", row=i)
        try:
            arr = np.asarray(row, dtype=np.float64)
        except (TypeError, ValueError):
            raise ProtocolError(f"Row {i} holds non-numeric values", row=i)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ProtocolError(f"Row {i} is not a vector of finite non-negative scores", row=i)
        if arr.shape[0] == 1 and k == 2:
            if not 0.0 <= arr[0] <= 1.0:
                raise ProtocolError(f"Row {i} single score {arr[0]} is outside [0, 1]", row=i)
            out.append(from_scores(arr, k))
            continue
        if arr.shape[0] != k:
            raise ProtocolError(f"Row {i} has {arr.shape[0]} entries, expected {k}", row=i)
        total = float(arr.sum())
        if policy == "strict" and abs(total - 1.0) > STRICT_SUM_TOLERANCE:
            raise ProtocolError(f"Row {i} sums to {total!r} under strict policy", row=i, sum=total)
        if total <= 0:
            raise ProtocolError(f"Row {i} sums to zero", row=i)
        out.append(ProbVector(arr / total))
    return out


# --- Oracle Handles ---
class OracleHandle(ABC):
    """Opaque probability source for the deployed model"""

    def __init__(self, k: int, normalize_policy: str = "strict"):
        if k < 2:
            raise ConfigError(f"Oracle class count must be >= 2, got {k}")
        if normalize_policy not in NORMALIZE_POLICIES:
            raise ConfigError(f"normalize_policy must be one of {NORMALIZE_POLICIES}, got '{normalize_policy}'")
        self.k = k
        self.normalize_policy = normalize_policy

    @property
    @abstractmethod
    def oracle_id(self) -> str:
        ...

    @abstractmethod
    def query_batch(self, features: Sequence[Sequence[float]]) -> List[ProbVector]:
        """Order-preserving: one ProbVector per input row."""

    def query_array(self, features) -> np.ndarray:
        probs = self.query_batch(features)
        return np.vstack([p.probs for p in probs]) if probs else np.zeros((0, self.k))

    def query(self, features) -> OracleResponse:
        start = time.perf_counter()
        probs = self.query_batch(features)
        return OracleResponse(probs, (time.perf_counter() - start) * 1000.0)

    def health_check(self) -> bool:
        return True


class LocalOracle(OracleHandle):
    """In-process adapter; outputs are bit-identical to nnet.forward_probs."""

    def __init__(self, model: nnet.MlpModel, normalize_policy: str = "strict"):
        super().__init__(model.num_classes, normalize_policy)
        self.model = model
        self._id = "local:" + hashlib.sha256(nnet.save(model)).hexdigest()[:16]

    @property
    def oracle_id(self) -> str:
        return self._id

    @property
    def input_dim(self) -> int:
        return self.model.input_dim

    def query_batch(self, features) -> List[ProbVector]:
        X = np.asarray(features, dtype=np.float64)
        if X.size == 0:
            return []
        if X.ndim != 2 or X.shape[1] != self.model.input_dim:
            raise ShapeError(f"Oracle expects {self.model.input_dim} features, got shape {X.shape}",
                             expected=self.model.input_dim, got=list(X.shape))
        return [nnet.forward_probs(self.model, x) for x in X]


class RemoteOracle(OracleHandle):
    """
    HTTP adapter: POST {base_url}/v1/predict {"inputs": [...]} -> {"probs": [...]}.

    Large batches are split into chunks sent with at most `max_in_flight` concurrent
    requests; results are reassembled in request order. Any object with
    `post(url, json=, timeout=)` returning a response with `status_code`, `json()` and
    `text` can serve as the session.
    """

    def __init__(self, base_url: str, k: int, timeout_ms: int = 5000, retries: int = 3,
                 normalize_policy: str = "strict", max_in_flight: int = 8, chunk_size: int = 256,
                 session: Optional[Any] = None, backoff_base_s: float = 0.1, backoff_factor: float = 2.0,
                 max_backoff_s: float = 5.0):
        super().__init__(k, normalize_policy)
        if not base_url:
            raise ConfigError("Remote oracle needs a base URL")
        if timeout_ms <= 0:
            raise ConfigError(f"timeout_ms must be positive, got {timeout_ms}")
        if retries < 0 or max_in_flight < 1 or chunk_size < 1:
            raise ConfigError("retries must be >= 0; max_in_flight and chunk_size must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.timeout_ms = timeout_ms
        self.retries = retries
        self.max_in_flight = max_in_flight
        self.chunk_size = chunk_size
        self.session = session if session is not None else requests.Session()
        self.backoff_base_s = backoff_base_s
        self.backoff_factor = backoff_factor
        self.max_backoff_s = max_backoff_s
        self._lock = threading.Lock()
        self.stats = {"requests": 0, "retries": 0}

    @property
    def oracle_id(self) -> str:
        return f"remote:{self.base_url}"

    def _count(self, key: str) -> None:
        with self._lock:
            self.stats[key] += 1

    def _wait_time(self, attempt: int, response: Any = None) -> float:
        headers = getattr(response, "headers", None) or {}
        retry_after = headers.get("Retry-After") if hasattr(headers, "get") else None
        if retry_after:
            try:
                return min(float(retry_after), self.max_backoff_s)
            except ValueError:
                pass
        return min(self.backoff_base_s * self.backoff_factor ** attempt, self.max_backoff_s)

    def _request_with_retry(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        """POST with exponential backoff; 5xx, 429 and transport errors are retried, other 4xx are not."""
        url = f"{self.base_url}{PREDICT_PATH}"
        attempts = self.retries + 1
        last_problem = "no attempt made"
        for attempt in range(attempts):
            self._count("requests")
            if attempt > 0:
                self._count("retries")
            try:
                response = self.session.post(url, json=payload, timeout=self.timeout_ms / 1000.0)
            except (requests.exceptions.RequestException, httpx.HTTPError) as e:
                last_problem = f"transport error: {e}"
                logger.warning(f"Oracle request failed (attempt {attempt + 1}/{attempts}): {e}")
                if attempt < attempts - 1:
                    time.sleep(self._wait_time(attempt))
                continue

            status = response.status_code
            if status == 429 or status >= 500:
                last_problem = f"HTTP {status}"
                logger.warning(f"Oracle returned {status} (attempt {attempt + 1}/{attempts})")
                if attempt < attempts - 1:
                    time.sleep(self._wait_time(attempt, response))
                continue
            if status >= 400:
                # client errors will not change on retry
                raise ProtocolError(f"Oracle rejected the request with HTTP {status}: {response.text[:200]}", status=status)
            try:
                return response.json()
            except ValueError:
                raise ProtocolError("Oracle response is not valid JSON")

        logger.error(f"Oracle at {self.base_url} unavailable after {attempts} attempts ({last_problem})")
        raise UpstreamUnavailableError(f"Oracle at {self.base_url} unavailable after {attempts} attempts: {last_problem}",
                                       url=self.base_url, attempts=attempts)

    def _query_chunk(self, rows: List[List[float]]) -> List[ProbVector]:
        body = self._request_with_retry({"inputs": rows})
        if not isinstance(body, dict) or "probs" not in body:
            raise ProtocolError("Oracle response lacks 'probs'; top-1 label APIs are not supported")
        probs = normalize_response(body["probs"], self.k, self.normalize_policy)
        if len(probs) != len(rows):
            raise ProtocolError(f"Oracle returned {len(probs)} rows for {len(rows)} inputs")
        return probs

    def query_batch(self, features) -> List[ProbVector]:
        rows = np.asarray(features, dtype=np.float64).tolist()
        if not rows:
            return []
        chunks = [rows[i:i + self.chunk_size] for i in range(0, len(rows), self.chunk_size)]
        if len(chunks) == 1:
            return self._query_chunk(chunks[0])
        with ThreadPoolExecutor(max_workers=min(self.max_in_flight, len(chunks))) as pool:
            parts = list(pool.map(self._query_chunk, chunks))
        return [p for part in parts for p in part]

    def health_check(self) -> bool:
        try:
            response = self.session.get(f"{self.base_url}{HEALTH_PATH}", timeout=self.timeout_ms / 1000.0)
        except (requests.exceptions.RequestException, httpx.HTTPError) as e:
            logger.warning(f"Oracle health check failed: {e}")
            return False
        return response.status_code == 200


class CachingOracle(OracleHandle):
    """Memoizes another oracle by feature-vector hash."""

    def __init__(self, inner: OracleHandle):
        super().__init__(inner.k, inner.normalize_policy)
        self.inner = inner
        self._cache: Dict[str, ProbVector] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @property
    def oracle_id(self) -> str:
        return self.inner.oracle_id

    @staticmethod
    def _key(row: np.ndarray) -> str:
        return hashlib.sha256(np.ascontiguousarray(row, dtype=np.float64).tobytes()).hexdigest()

    def query_batch(self, features) -> List[ProbVector]:
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if X.size == 0:
            return []
        keys = [self._key(row) for row in X]
        with self._lock:
            missing = {}
            for key, row in zip(keys, X):
                if key not in self._cache and key not in missing:
                    missing[key] = row
            self.hits += len(keys) - len(missing)
            self.misses += len(missing)
        if missing:
            fresh = self.inner.query_batch(np.vstack(list(missing.values())))
            with self._lock:
                self._cache.update(zip(missing.keys(), fresh))
        with self._lock:
            return [self._cache[key] for key in keys]

    def health_check(self) -> bool:
        return self.inner.health_check()


def make_oracle(target: Optional[str], k: Optional[int] = None, timeout_ms: Optional[int] = None,
                retries: int = 3, normalize_policy: str = "strict", max_in_flight: int = 8,
                cache: bool = False, session: Optional[Any] = None) -> OracleHandle:
    """
    Build an oracle from a model path or an http(s) URL.

    ORACLE_BASE_URL is used when no target is given; ORACLE_TIMEOUT_MS overrides the timeout.
    """
    target = target or os.getenv("ORACLE_BASE_URL")
    if not target:
        raise ConfigError("No oracle target configured (model path or URL)")
    env_timeout = os.getenv("ORACLE_TIMEOUT_MS")
    if env_timeout:
        try:
            timeout_ms = int(env_timeout)
        except ValueError:
            raise ConfigError(f"ORACLE_TIMEOUT_MS must be an integer, got '{env_timeout}'")

    if target.startswith(("http://", "https://")):
        if k is None:
            raise ConfigError("A remote oracle needs the class count k")
        oracle: OracleHandle = RemoteOracle(target, k, timeout_ms or 5000, retries, normalize_policy,
                                            max_in_flight, session=session)
    else:
        model = nnet.load_file(target)
        if k is not None and model.num_classes != k:
            raise ShapeError(f"Model at {target} has {model.num_classes} classes, expected {k}")
        oracle = LocalOracle(model, normalize_policy)
    logger.info(f"✓ Oracle ready: {oracle.oracle_id} (k={oracle.k})")
    return CachingOracle(oracle) if cache else oracle
