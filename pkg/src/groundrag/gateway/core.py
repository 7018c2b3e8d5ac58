from __future__ import annotations

import json
import logging
import os
import re
import string
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

ROLES = ("chat", "embed", "rerank", "judge")

# Format instructions substituted into the judge templates.
JUDGE_FORMAT_INSTRUCTIONS = (
    'Respond with one line of JSON and nothing else: {"score": <integer 0-5>, "reason": "<one sentence>"}'
)

Transport = Callable[[str, dict], dict]


class GatewayError(Exception):
    retryable = False


class GatewayTimeout(GatewayError):
    retryable = True


class GatewayUnavailable(GatewayError):
    retryable = True


class GatewayHTTPError(GatewayError):
    def __init__(self, status: int, message: str = ""):
        super().__init__(f"HTTP {status}: {message}" if message else f"HTTP {status}")
        self.status = status
        self.retryable = status >= 500 or status == 429


class MalformedResponse(GatewayError):
    pass


class JudgeParseError(MalformedResponse):
    pass


class ScriptedMockError(GatewayError):
    pass


class PromptAssetError(KeyError):
    pass


# ---------------------------------------------------------------------------
# Prompt assets


class PromptAssets:
    """Plain-text prompt templates keyed by id (the file stem).

    Packaged templates load first; files in ``override_dir`` replace or add
    ids. Templates use ``str.format`` placeholders.
    """

    def __init__(self, override_dir: str | os.PathLike | None = None, extra: Mapping[str, str] | None = None):
        self._templates: dict[str, str] = {}
        pkg = resources.files("groundrag.gateway") / "prompts"
        for entry in pkg.iterdir():
            if entry.name.endswith(".txt"):
                self._templates[entry.name[:-4]] = entry.read_text(encoding="utf-8")
        if override_dir:
            for p in sorted(Path(override_dir).glob("*.txt")):
                self._templates[p.stem] = p.read_text(encoding="utf-8")
        self._templates.update(extra or {})

    def ids(self) -> list[str]:
        return sorted(self._templates)

    def get(self, prompt_id: str) -> str:
        try:
            return self._templates[prompt_id]
        except KeyError:
            raise PromptAssetError(f"no prompt asset {prompt_id!r}") from None

    def fields(self, prompt_id: str) -> set[str]:
        return {f for _, f, _, _ in string.Formatter().parse(self.get(prompt_id)) if f}

    def render(self, prompt_id: str, **values: Any) -> str:
        missing = self.fields(prompt_id) - set(values)
        if missing:
            raise PromptAssetError(f"prompt {prompt_id!r} missing values for {sorted(missing)}")
        return self.get(prompt_id).format(**values)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class RoleConfig:
    endpoint: str | None = None
    model: str = "mock"


@dataclass
class GatewayConfig:
    mode: str = "mock"
    roles: dict[str, RoleConfig] = field(default_factory=lambda: {r: RoleConfig() for r in ROLES})
    timeout: float = 30.0
    retry: int = 2
    backoff_base: float = 0.25
    backoff_factor: float = 2.0
    api_key_env: str = "GROUNDRAG_API_KEY"
    prompt_dir: str | None = None
    embed_dim: int = 64

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("gateway timeout must be > 0")
        if self.retry < 0:
            raise ValueError("gateway retry must be >= 0")
        if self.mode not in ("mock", "http"):
            raise ValueError(f"gateway mode must be 'mock' or 'http', got {self.mode!r}")

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any], env: Mapping[str, str] | None = None) -> "GatewayConfig":
        obj = dict(obj)
        role_objs = {r: obj.pop(r, {}) for r in ROLES}
        allowed = set(cls.__dataclass_fields__) - {"roles"}
        unknown = set(obj) - allowed
        if unknown:
            raise ValueError(f"unknown [gateway] keys: {sorted(unknown)}")
        roles = {}
        for r, ro in role_objs.items():
            bad = set(ro) - {"endpoint", "model"}
            if bad:
                raise ValueError(f"unknown [gateway.{r}] keys: {sorted(bad)}")
            roles[r] = RoleConfig(**ro)
        cfg = cls(roles=roles, **obj)
        cfg.apply_env(os.environ if env is None else env)
        return cfg

    def apply_env(self, env: Mapping[str, str]) -> None:
        for r in ROLES:
            url = env.get(f"GROUNDRAG_{r.upper()}_URL")
            model = env.get(f"GROUNDRAG_{r.upper()}_MODEL")
            if url:
                self.roles[r].endpoint = url
            if model:
                self.roles[r].model = model
        if env.get("GROUNDRAG_GATEWAY_MODE"):
            self.mode = env["GROUNDRAG_GATEWAY_MODE"]


# ---------------------------------------------------------------------------
# HTTP transport


class HTTPTransport:
    """POSTs one JSON request per call to the role's endpoint."""

    def __init__(
        self,
        endpoints: Mapping[str, str],
        timeout: float = 30.0,
        api_key: str | None = None,
        client: httpx.Client | None = None,
    ):
        self.endpoints = dict(endpoints)
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.Client(timeout=httpx.Timeout(timeout), headers=headers)

    def __call__(self, role: str, request: dict) -> dict:
        url = self.endpoints.get(role)
        if not url:
            raise GatewayUnavailable(f"no endpoint configured for role {role!r}")
        try:
            resp = self.client.post(url, json=request)
        except httpx.TimeoutException as exc:
            raise GatewayTimeout(f"{role}: {exc}") from exc
        except httpx.TransportError as exc:
            raise GatewayUnavailable(f"{role}: {exc}") from exc
        if resp.status_code >= 400:
            raise GatewayHTTPError(resp.status_code, resp.text[:200])
        try:
            body = resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"{role}: response is not JSON") from exc
        if not isinstance(body, dict):
            raise MalformedResponse(f"{role}: response is not a JSON object")
        return body


# ---------------------------------------------------------------------------
# Response parsing


def parse_judge_score(text: str) -> int:
    """Extract an integer 0-5 from a judge reply.

    Accepts ``{"score": n}`` JSON, ``score: n`` text, or a bare integer.
    """
    if not isinstance(text, str):
        raise JudgeParseError(f"judge reply is not text: {text!r}")
    candidate: Any = None
    stripped = text.strip()
    obj = _loads_object(stripped)
    if obj is not None and "score" in obj:
        candidate = obj["score"]
    else:
        m = re.search(r"\bscore\b\W{0,3}(-?\d+(?:\.\d+)?)", stripped, re.IGNORECASE)
        if m:
            candidate = m.group(1)
        elif re.fullmatch(r"-?\d+", stripped):
            candidate = stripped
    try:
        value = float(candidate)
    except (TypeError, ValueError):
        raise JudgeParseError(f"no score in judge reply: {text[:80]!r}") from None
    if value != int(value) or not 0 <= value <= 5:
        raise JudgeParseError(f"judge score out of range 0-5: {candidate!r}")
    return int(value)


def _loads_object(text: str) -> dict | None:
    """Parse the first JSON object in ``text`` (tolerates code fences)."""
    start = text.find("{")
    end = text.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        obj = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return None
    return obj if isinstance(obj, dict) else None


def loads_object(text: str) -> dict | None:
    return _loads_object(text)


# ---------------------------------------------------------------------------


class Gateway:
    """All model traffic (chat, embed, rerank, judge) goes through here.

    ``transports`` maps role to a callable ``(role, request) -> response``;
    a single callable serves every role. Retryable failures are retried
    ``config.retry`` times with exponential backoff.
    """

    def __init__(
        self,
        transports: Transport | Mapping[str, Transport],
        config: GatewayConfig | None = None,
        prompts: PromptAssets | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config or GatewayConfig()
        if callable(transports):
            self.transports = {r: transports for r in ROLES}
        else:
            self.transports = dict(transports)
        self.prompts = prompts or PromptAssets(self.config.prompt_dir)
        self._sleep = sleep
        self._lock = threading.Lock()
        self.calls: list[dict[str, Any]] = []

    def _call(self, role: str, request: dict) -> dict:
        transport = self.transports.get(role)
        if transport is None:
            raise GatewayUnavailable(f"no transport for role {role!r}")
        with self._lock:
            self.calls.append({"role": role, "prompt_id": request.get("metadata", {}).get("prompt_id")})
        attempt = 0
        while True:
            try:
                return transport(role, request)
            except GatewayError as exc:
                if not exc.retryable or attempt >= self.config.retry:
                    raise
                delay = self.config.backoff_base * self.config.backoff_factor**attempt
                log.warning("%s call failed (%s); retry %d in %.2fs", role, exc, attempt + 1, delay)
                self._sleep(delay)
                attempt += 1

    def calls_by_role(self) -> dict[str, int]:
        out = {r: 0 for r in ROLES}
        for c in self.calls:
            out[c["role"]] = out.get(c["role"], 0) + 1
        return out

    # -- chat ----------------------------------------------------------------

    def generate(self, prompt: str, *, prompt_id: str | None = None, role: str = "chat", **params: Any) -> str:
        request = {
            "model": self.config.roles.get(role, RoleConfig()).model,
            "messages": [{"role": "user", "content": prompt}],
            **params,
        }
        if prompt_id:
            request["metadata"] = {"prompt_id": prompt_id}
        body = self._call(role, request)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse(f"{role}: missing choices[0].message.content") from None
        if not isinstance(content, str):
            raise MalformedResponse(f"{role}: content is not a string")
        return content

    def complete(self, prompt_id: str, params: Mapping[str, Any] | None = None, **values: Any) -> str:
        """Render a prompt asset and send it to the chat role."""
        return self.generate(self.prompts.render(prompt_id, **values), prompt_id=prompt_id, **(params or {}))

    # -- embed / rerank ------------------------------------------------------

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        if not texts:
            return []
        body = self._call("embed", {"model": self.config.roles["embed"].model, "texts": texts})
        vectors = body.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise MalformedResponse(f"embed: expected {len(texts)} vectors")
        out = [np.asarray(v, dtype=np.float64) for v in vectors]
        dims = {v.size for v in out}
        if len(dims) != 1 or 0 in dims or any(v.ndim != 1 for v in out):
            raise MalformedResponse(f"embed: inconsistent or empty vector dims {sorted(dims)}")
        if not all(np.all(np.isfinite(v)) for v in out):
            raise MalformedResponse("embed: non-finite values")
        return out

    def rerank(self, query: str, passages: Sequence[str]) -> list[float]:
        passages = list(passages)
        if not passages:
            return []
        body = self._call("rerank", {"model": self.config.roles["rerank"].model, "query": query, "passages": passages})
        scores = body.get("scores")
        if not isinstance(scores, list) or len(scores) != len(passages):
            raise MalformedResponse(f"rerank: expected {len(passages)} scores")
        try:
            out = [float(s) for s in scores]
        except (TypeError, ValueError):
            raise MalformedResponse("rerank: non-numeric score") from None
        if not all(np.isfinite(out)):
            raise MalformedResponse("rerank: non-finite score")
        return out

    # -- judge ---------------------------------------------------------------

    def judge(self, question: str, answer: str, reference: str, context: str | None = None) -> int:
        values = dict(question=question, output=answer, reference=reference, format_instructions=JUDGE_FORMAT_INSTRUCTIONS)
        if context:
            prompt_id = "judge_with_context"
            values["context"] = context
        else:
            prompt_id = "judge"
        text = self.generate(self.prompts.render(prompt_id, **values), prompt_id=prompt_id, role="judge", temperature=0)
        return parse_judge_score(text)


def build_gateway(config: GatewayConfig | None = None, sleep: Callable[[float], None] = time.sleep) -> Gateway:
    """Gateway for ``config.mode``: the deterministic mock stack or HTTP endpoints."""
    cfg = config or GatewayConfig()
    if cfg.mode == "mock":
        from .mocks import mock_transports

        return Gateway(mock_transports(cfg.embed_dim), cfg, sleep=sleep)
    api_key = os.environ.get(cfg.api_key_env)
    endpoints = {r: rc.endpoint for r, rc in cfg.roles.items() if rc.endpoint}
    return Gateway(HTTPTransport(endpoints, cfg.timeout, api_key), cfg, sleep=sleep)
