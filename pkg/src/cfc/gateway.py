"""Gateway to an OpenAI-compatible chat/embedding endpoint, plus a deterministic
mock mode for offline runs and tests.

Mock fixtures are JSONL rule files. Each line is
    {"match": "hash:<hex>" | "substr:<text>", "response": "<reply>"}
Exact hash rules are consulted before substring rules; substring rules apply in
file order. The hash key is the stable hash of the whitespace-collapsed prompt
(see mock_prompt_hash), so tests can pin individual prompts while bulk-handling
the rest with substrings.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field

import numpy as np

API_KEY_ENV = "CFC_LLM_API_KEY"
BASE_URL_ENV = "CFC_LLM_BASE_URL"

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class GatewayError(RuntimeError):
    """Raised when a request cannot be satisfied (after retries, or mock miss)."""


@dataclass(frozen=True)
class GatewayConfig:
    mode: str = "mock"                    # "mock" or "live"
    base_url: str = ""
    model_name: str = "mock-model"
    temperature: float = 0.0
    max_retries: int = 3
    request_timeout: float = 30.0
    max_concurrent: int = 4
    mock_fixture_path: str | None = None
    embed_dim: int = 64                   # mock embedding dimension

    def __post_init__(self):
        if self.mode not in ("mock", "live"):
            raise ValueError(f"mode must be 'mock' or 'live', got {self.mode!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")


@dataclass(frozen=True)
class ChatExchange:
    """One completed prompt/response pair, kept for the audit trail."""

    prompt_text: str
    response_text: str
    latency_s: float
    attempt_count: int
    model_name: str

    def to_dict(self) -> dict:
        return {
            "prompt_text": self.prompt_text,
            "response_text": self.response_text,
            "latency_s": self.latency_s,
            "attempt_count": self.attempt_count,
            "model_name": self.model_name,
        }


def mock_prompt_hash(prompt: str) -> str:
    """Stable 64-bit prompt key: sha256 of the whitespace-collapsed prompt,
    first 16 hex digits. Whitespace runs collapse so reflowed prompts match."""
    collapsed = re.sub(r"\s+", " ", prompt).strip()
    return hashlib.sha256(collapsed.encode("utf-8")).hexdigest()[:16]


def _load_fixture(path: str) -> tuple[dict[str, str], list[tuple[str, str]]]:
    by_hash: dict[str, str] = {}
    substr: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed fixture line ({exc.msg})") from exc
            match, response = rec.get("match"), rec.get("response")
            if not isinstance(match, str) or not isinstance(response, str):
                raise ValueError(f"{path}:{lineno}: fixture line needs string match and response")
            if match.startswith("hash:"):
                by_hash[match[5:]] = response
            elif match.startswith("substr:"):
                substr.append((match[7:], response))
            else:
                raise ValueError(f"{path}:{lineno}: match must start with 'hash:' or 'substr:'")
    return by_hash, substr


def _requests_transport(url: str, payload: dict, headers: dict, timeout: float):
    import requests

    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    try:
        body = resp.json()
    except ValueError:
        body = {"raw": resp.text}
    return resp.status_code, body


class LLMGateway:
    """Thread-safe client. A semaphore caps in-flight requests at
    cfg.max_concurrent; the optional exchange log is append-only JSONL."""

    def __init__(self, cfg: GatewayConfig, transport=None, sleep_fn=time.sleep,
                 log_path: str | None = None):
        self.cfg = cfg
        self._transport = transport or _requests_transport
        self._sleep = sleep_fn
        self._log_path = log_path
        self._sem = threading.Semaphore(cfg.max_concurrent)
        self._log_lock = threading.Lock()
        self._fixture_hash: dict[str, str] = {}
        self._fixture_substr: list[tuple[str, str]] = []
        if cfg.mode == "mock" and cfg.mock_fixture_path:
            self._fixture_hash, self._fixture_substr = _load_fixture(cfg.mock_fixture_path)

    # ------------------------------------------------------------- chat

    def complete(self, prompt: str) -> ChatExchange:
        if not isinstance(prompt, str) or not prompt:
            raise ValueError("prompt must be a non-empty string")
        start = time.perf_counter()
        with self._sem:
            if self.cfg.mode == "mock":
                text, attempts = self._mock_lookup(prompt), 1
            else:
                text, attempts = self._live_complete(prompt)
        exchange = ChatExchange(
            prompt_text=prompt,
            response_text=text,
            latency_s=time.perf_counter() - start,
            attempt_count=attempts,
            model_name=self.cfg.model_name,
        )
        self._append_log(exchange)
        return exchange

    def _mock_lookup(self, prompt: str) -> str:
        key = mock_prompt_hash(prompt)
        if key in self._fixture_hash:
            return self._fixture_hash[key]
        for needle, response in self._fixture_substr:
            if needle in prompt:
                return response
        raise GatewayError(
            f"mock fixture has no rule for prompt hash {key} "
            f"(prompt starts: {prompt[:60]!r})")

    def _resolve_base_url(self) -> str:
        base = os.environ.get(BASE_URL_ENV) or self.cfg.base_url
        if not base:
            raise GatewayError(f"live mode needs a base_url (config or {BASE_URL_ENV})")
        return base.rstrip("/")

    def _auth_headers(self) -> dict:
        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise GatewayError(f"live mode needs {API_KEY_ENV} set")
        return {"Authorization": f"Bearer {key}"}

    def _post_with_retries(self, url: str, payload: dict) -> tuple[dict, int]:
        headers = self._auth_headers()
        last_err = "no attempt made"
        for attempt in range(1, self.cfg.max_retries + 2):
            try:
                status, body = self._transport(url, payload, headers, self.cfg.request_timeout)
            except Exception as exc:     # transport-level failure, retryable
                last_err = f"transport error: {exc}"
            else:
                if status == 200:
                    return body, attempt
                last_err = f"HTTP {status}: {str(body)[:200]}"
                if status not in RETRYABLE_STATUS:
                    raise GatewayError(f"{url}: non-retryable {last_err}")
            if attempt <= self.cfg.max_retries:
                self._sleep(1.0 * (2 ** (attempt - 1)))
        raise GatewayError(f"{url}: giving up after {self.cfg.max_retries + 1} attempts ({last_err})")

    def _live_complete(self, prompt: str) -> tuple[str, int]:
        url = self._resolve_base_url() + "/chat/completions"
        payload = {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
        }
        body, attempts = self._post_with_retries(url, payload)
        try:
            return body["choices"][0]["message"]["content"], attempts
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"unexpected completion payload shape: {exc}") from exc

    # ------------------------------------------------------------- embeddings

    def embed(self, texts: list[str], batch_size: int = 64) -> np.ndarray:
        """Embed texts in order. Mock mode returns deterministic unit vectors
        seeded from each text's hash; live mode calls /embeddings in batches."""
        if not texts:
            raise ValueError("embed needs at least one text")
        if self.cfg.mode == "mock":
            return np.stack([self._mock_embedding(t) for t in texts])
        url = self._resolve_base_url() + "/embeddings"
        out: list[list[float]] = []
        dim = None
        for lo in range(0, len(texts), batch_size):
            chunk = texts[lo:lo + batch_size]
            with self._sem:
                body, _ = self._post_with_retries(
                    url, {"model": self.cfg.model_name, "input": chunk})
            try:
                data = sorted(body["data"], key=lambda d: d["index"])
                vecs = [d["embedding"] for d in data]
            except (KeyError, TypeError) as exc:
                raise GatewayError(f"unexpected embedding payload shape: {exc}") from exc
            if len(vecs) != len(chunk):
                raise GatewayError(f"asked for {len(chunk)} embeddings, got {len(vecs)}")
            for v in vecs:
                if dim is None:
                    dim = len(v)
                elif len(v) != dim:
                    raise GatewayError("inconsistent embedding dimensions in response")
                out.append([float(x) for x in v])
        return np.asarray(out, dtype=np.float64)

    def _mock_embedding(self, text: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        vec = rng.standard_normal(self.cfg.embed_dim)
        return vec / np.linalg.norm(vec)

    # ------------------------------------------------------------- audit log

    def _append_log(self, exchange: ChatExchange) -> None:
        if self._log_path is None:
            return
        line = json.dumps(exchange.to_dict(), ensure_ascii=False)
        with self._log_lock:
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
