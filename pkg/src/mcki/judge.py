"""HTTP client for the remote judge endpoint.

The endpoint is a chat-completion-style service configured through the
JUDGE_URL and JUDGE_API_KEY environment variables. The reply must contain a
JSON object with an integer "score" and a string "reason", either as the
response body itself or inside the first choice's message content.
"""

from __future__ import annotations

import json
import logging
import os
import re
import string
import time
import uuid
from dataclasses import dataclass, field
from importlib import resources

import httpx

from .scoring import JudgeRequest, ScoringError

log = logging.getLogger(__name__)

JUDGE_URL_VAR = "JUDGE_URL"
JUDGE_API_KEY_VAR = "JUDGE_API_KEY"
PROMPT_VERSION = "judge-prompt-v1"

_JSON_OBJECT = re.compile(r"\{.*\}", re.DOTALL)


def default_prompt_template() -> str:
    return (
        resources.files("mcki.assets").joinpath("judge_prompt_v1.txt").read_text("utf-8")
    )


def render_prompt(request: JudgeRequest, template: str | None = None) -> str:
    tpl = string.Template(template if template is not None else default_prompt_template())
    return tpl.substitute(
        language=request.language.value,
        question=request.question,
        reference_answer=request.reference_answer,
        candidate_answer=request.candidate_answer,
    )


def parse_judge_reply(payload: dict) -> tuple[int, str]:
    """Extract (score, reason) from a judge reply payload.

    Accepts either a bare {"score": ..., "reason": ...} object or a chat
    completion envelope whose message content contains that object.
    """
    obj = payload
    if "score" not in obj and "choices" in obj:
        try:
            content = obj["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ScoringError("judge reply has no score and no usable choices") from None
        match = _JSON_OBJECT.search(str(content))
        if match is None:
            raise ScoringError("judge reply content contains no JSON object")
        try:
            obj = json.loads(match.group(0))
        except json.JSONDecodeError:
            raise ScoringError("judge reply content is not valid JSON") from None
    if "score" not in obj:
        raise ScoringError("judge reply is missing 'score'")
    score = obj["score"]
    if isinstance(score, bool) or not isinstance(score, int):
        raise ScoringError(f"judge score {score!r} is not an integer")
    if not 0 <= score <= 10:
        raise ScoringError(f"judge score {score} outside 0..10")
    return score, str(obj.get("reason", ""))


@dataclass
class JudgeConfig:
    url: str
    api_key: str = ""
    max_retries: int = 3
    timeout_s: float = 30.0
    max_tokens: int = 256
    prompt_template: str | None = None
    retry_backoff_s: float = 0.2

    @classmethod
    def from_env(cls, **overrides) -> "JudgeConfig":
        url = os.environ.get(JUDGE_URL_VAR, "")
        if not url:
            raise ScoringError(f"{JUDGE_URL_VAR} is not set")
        return cls(url=url, api_key=os.environ.get(JUDGE_API_KEY_VAR, ""), **overrides)


@dataclass
class JudgeClient:
    """Judge backend talking to a remote chat-completion endpoint.

    Transient transport failures are retried up to config.max_retries; a
    malformed or out-of-range reply is a ScoringError that the caller records
    as a skipped item.
    """

    config: JudgeConfig
    transport: httpx.BaseTransport | None = None
    _client: httpx.Client = field(init=False, repr=False)

    def __post_init__(self) -> None:
        headers = {}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        self._client = httpx.Client(
            timeout=self.config.timeout_s, headers=headers, transport=self.transport
        )

    def close(self) -> None:
        self._client.close()

    def score(self, request: JudgeRequest) -> tuple[int, str]:
        if not request.candidate_answer.strip():
            return 0, "empty candidate"
        prompt = render_prompt(request, self.config.prompt_template)
        body = {
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": self.config.max_tokens,
            "temperature": 0,
            "reasoning": {"enabled": False},
        }
        correlation_id = uuid.uuid4().hex
        retries = 0
        while True:
            try:
                response = self._client.post(
                    self.config.url,
                    json=body,
                    headers={"X-Request-Id": correlation_id},
                )
                if response.status_code >= 500 or response.status_code == 429:
                    raise httpx.TransportError(
                        f"retryable status {response.status_code}"
                    )
                break
            except httpx.TransportError as exc:
                retries += 1
                if retries > self.config.max_retries:
                    raise ScoringError(
                        f"judge transport failed after {self.config.max_retries} "
                        f"retries: {exc}"
                    ) from exc
                time.sleep(self.config.retry_backoff_s * retries)
        if retries:
            log.info("judge request %s succeeded after %d retries", correlation_id, retries)
        if response.status_code != 200:
            raise ScoringError(f"judge returned status {response.status_code}")
        try:
            payload = response.json()
        except json.JSONDecodeError:
            raise ScoringError("judge reply body is not JSON") from None
        return parse_judge_reply(payload)
