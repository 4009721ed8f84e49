"""Explanation backends: a chat-completion HTTP client and an offline mock.

Requests are lists of parts. Image parts carry PNG bytes for the wire and a
``meta`` dict (image ref, activation grid) that never leaves the process; the
mock backend answers from that metadata plus known patch labels.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import BackendError
from .prompts import EXPLAINER_PROMPT, JUDGE_PATTERN_PREFIX
from .render import png_data_url

log = logging.getLogger(__name__)

Transport = Callable[[str, dict, bytes, float], bytes]


@dataclass
class BackendConfig:
    endpoint: str = ""
    model_name: str = "google/gemini-2.0-flash-001"
    api_key_env: str = "FLUXDICT_API_KEY"
    mock_mode: bool = False
    request_timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff_base: float = 1.0


@dataclass
class TextPart:
    text: str


@dataclass
class ImagePart:
    png: bytes
    meta: dict = field(default_factory=dict)


def build_request(config: BackendConfig, parts: list) -> dict:
    content = []
    for p in parts:
        if isinstance(p, TextPart):
            content.append({"type": "text", "text": p.text})
        else:
            content.append({"type": "image_url", "image_url": {"url": png_data_url(p.png)}})
    return {"model": config.model_name, "messages": [{"role": "user", "content": content}]}


class MalformedResponse(BackendError):
    """The backend answered, but not with a chat-completion document."""

    def __init__(self, message: str, raw: bytes):
        super().__init__(message)
        self.raw = raw


def parse_response(raw: bytes) -> str:
    try:
        doc = json.loads(raw)
        content = doc["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"malformed backend response: {exc}", raw) from exc
    if isinstance(content, list):
        content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
    if not isinstance(content, str):
        raise MalformedResponse("backend response content is not text", raw)
    return content


def urllib_transport(url: str, headers: dict, body: bytes, timeout: float) -> bytes:
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read()


class HttpBackend:
    def __init__(self, config: BackendConfig, transport: Transport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if not config.endpoint:
            raise BackendError("no backend endpoint configured")
        self.config = config
        self.transport = transport or urllib_transport
        self.sleep = sleep

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, parts: list) -> str:
        body = json.dumps(build_request(self.config, parts)).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                raw = self.transport(self.config.endpoint, self._headers(), body, self.config.request_timeout)
                return parse_response(raw)
            except BackendError:
                raise
            except Exception as exc:  # network errors of any flavor are retried
                last = exc
                log.warning("backend attempt %d failed: %s", attempt + 1, exc)
        raise BackendError(f"backend failed after {self.config.max_retries + 1} attempts: {last}")


def _highlighted_patch(meta: dict) -> int | None:
    grid = meta.get("grid")
    if grid is None:
        return None
    flat = np.asarray(grid, dtype=np.float64).ravel()
    if flat.size == 0 or flat.max() <= 0:
        return None
    return int(np.argmax(flat))


class MockBackend:
    """Offline backend answering from planted patch labels.

    Explainer calls return the majority label of the strongest highlighted
    patch across images. Judge calls answer "1" when the highlighted patch's
    label equals the pattern (``judge="oracle"``) or flip a seeded coin
    (``judge="coinflip"``).
    """

    def __init__(self, patch_labels: dict[str, list[str]] | None = None,
                 judge: str = "oracle", seed: int = 0):
        self.patch_labels = patch_labels or {}
        self.judge = judge
        self.rng = np.random.default_rng(seed)
        self.calls = 0

    def _label(self, meta: dict) -> str | None:
        patch = _highlighted_patch(meta)
        labels = self.patch_labels.get(meta.get("image_ref"))
        if patch is None or labels is None:
            return None
        return labels[patch]

    def complete(self, parts: list) -> str:
        self.calls += 1
        texts = [p.text for p in parts if isinstance(p, TextPart)]
        images = [p for p in parts if isinstance(p, ImagePart)]
        if texts and texts[0] == EXPLAINER_PROMPT:
            votes = Counter(lbl for lbl in (self._label(p.meta) for p in images) if lbl is not None)
            return votes.most_common(1)[0][0] if votes else "no clear pattern"
        pattern = None
        for line in (texts[0] if texts else "").splitlines():
            if line.startswith(JUDGE_PATTERN_PREFIX):
                pattern = line[len(JUDGE_PATTERN_PREFIX):]
                pattern = pattern[:-1] if pattern.endswith(".") else pattern
        if self.judge == "coinflip":
            return "1" if self.rng.random() < 0.5 else "0"
        if pattern is None or not images:
            return "0"
        return "1" if self._label(images[0].meta) == pattern else "0"


def make_backend(config: BackendConfig, transport: Transport | None = None,
                 patch_labels: dict | None = None, judge: str = "oracle", seed: int = 0,
                 sleep: Callable[[float], None] = time.sleep):
    if config.mock_mode:
        return MockBackend(patch_labels, judge=judge, seed=seed)
    return HttpBackend(config, transport=transport, sleep=sleep)


_FLOAT = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?")


def parse_score(reply: str) -> float | None:
    """First number in the judge reply, or None when there is none."""
    m = _FLOAT.search(reply or "")
    return float(m.group()) if m else None
