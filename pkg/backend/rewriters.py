"""
Caption rewriter clients: a deterministic rule-based rewriter, a local
line-protocol subprocess, a plain HTTP endpoint and hosted chat models
"""

import logging
import os
import shlex
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from typing import Dict, List, Optional, Sequence, Union

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from backend.captionaug import (
    PromptRuleSet,
    RewriterRequest,
    RewriterResponse,
    format_hertz,
    format_seconds,
)
from backend.errors import ConfigError, RewriterTransportError
from backend.synthworld import EventClass, EventSpec

logger = logging.getLogger(__name__)


DEFAULT_MODEL = "gpt-3.5-turbo"
DEFAULT_MAX_TOKENS = 200
DEFAULT_TEMPERATURE = 0.7
OPENAI_CHAT_COMPLETIONS_URL = "https://api.openai.com/v1/chat/completions"
DEFAULT_TIMEOUT_SECONDS = 30
SYSTEM_PROMPT = (
    "You are an expert audio captioner. Rewrite short audio captions into richer "
    "descriptions using only the facts given. Reply with the caption text only."
)
REWRITER_KINDS = ("rule", "subprocess", "http", "chat")


def build_session_with_retries() -> requests.Session:
    """Create a requests session configured with retries and backoff."""
    session = requests.Session()
    retry = Retry(
        total=3,
        read=3,
        connect=3,
        backoff_factor=0.5,
        status_forcelist=(429, 500, 502, 503, 504),
        allowed_methods=("POST", "GET"),
        raise_on_status=False,
    )
    adapter = HTTPAdapter(max_retries=retry)
    session.mount("http://", adapter)
    session.mount("https://", adapter)
    return session


class CaptionRewriter:
    """Base class: turn a request into an enriched caption."""

    name = "base"

    def rewrite(self, request: RewriterRequest, ruleset: PromptRuleSet) -> RewriterResponse:
        raise NotImplementedError

    def close(self):
        pass


def _pitch_word(freq: float) -> str:
    if freq < 800:
        return "low"
    if freq < 2000:
        return "mid"
    return "high"


def _loudness_word(amplitude: float) -> str:
    if amplitude < 0.4:
        return "soft"
    if amplitude <= 0.7:
        return "moderate"
    return "loud"


def _position_words(onset: float) -> str:
    if onset < 0.3:
        return "early in the clip"
    if onset < 0.6:
        return "in the middle of the clip"
    return "late in the clip"


def describe_event(event: EventSpec, fields: Sequence[str]) -> str:
    words: List[str] = []
    if "duration" in fields:
        if event.duration < 0.25:
            words.append("short")
        elif event.duration > 0.35:
            words.append("long")
    if "loudness" in fields:
        words.append(_loudness_word(event.amplitude))
    if event.event_class == EventClass.TONE:
        if "pitch" in fields:
            words += ["steady", _pitch_word(event.freq)]
        words.append("tone")
        if "frequency" in fields:
            words += ["at", format_hertz(event.freq), "hertz"]
    elif event.event_class == EventClass.CHIRP:
        if "pitch" in fields:
            words.append("rising" if event.freq_end > event.freq else "falling")
        words.append("chirp")
        if "frequency" in fields:
            words += ["from", format_hertz(event.freq), "to", format_hertz(event.freq_end), "hertz"]
    else:
        words += ["burst", "of", "noise"]
    phrase = "a " + " ".join(words)
    if "onset" in fields:
        phrase += f" starts at {format_seconds(event.onset)} seconds {_position_words(event.onset)}"
    if "duration" in fields:
        phrase += f" and lasts {format_seconds(event.duration)} seconds"
    return phrase


class RuleBasedRewriter(CaptionRewriter):
    """Deterministic rewriter driven by a rule set's detail fields."""

    name = "rule"

    def __init__(self, fields_override: Optional[Sequence[str]] = None):
        self.fields_override = tuple(fields_override) if fields_override else None

    def rewrite(self, request: RewriterRequest, ruleset: PromptRuleSet) -> RewriterResponse:
        fields = self.fields_override or ruleset.detail_fields
        scene = request.scene()
        if not scene.events:
            return RewriterResponse(text="", status="empty")
        phrases = [describe_event(e, fields) for e in scene.events]
        text = ", then ".join(phrases) + "."
        return RewriterResponse(text=text[0].upper() + text[1:])


class SubprocessRewriter(CaptionRewriter):
    """Line protocol over a child process: one JSON request per line in, one JSON response per line out."""

    name = "subprocess"

    def __init__(self, command: Union[str, List[str]], timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS):
        if not command:
            raise ConfigError("subprocess rewriter needs a command")
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout_seconds = timeout_seconds
        self._process: Optional[subprocess.Popen] = None
        self._reader = ThreadPoolExecutor(max_workers=1)
        self._lock = threading.Lock()

    def _ensure_started(self) -> subprocess.Popen:
        if self._process is None or self._process.poll() is not None:
            try:
                self._process = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as e:
                raise RewriterTransportError(f"cannot start rewriter {self.command}: {e}") from e
            logger.info(f"Started rewriter process: {' '.join(self.command)}")
        return self._process

    def rewrite(self, request: RewriterRequest, ruleset: PromptRuleSet) -> RewriterResponse:
        with self._lock:
            process = self._ensure_started()
            try:
                process.stdin.write(request.to_wire())
                process.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                self._kill()
                raise RewriterTransportError(f"rewriter process is gone: {e}") from e
            future = self._reader.submit(process.stdout.readline)
            try:
                line = future.result(timeout=self.timeout_seconds)
            except FutureTimeout as e:
                self._kill()
                raise RewriterTransportError(f"rewriter timed out after {self.timeout_seconds}s") from e
        if not line:
            self._kill()
            raise RewriterTransportError("rewriter process closed its output")
        return RewriterResponse.from_wire(line)

    def _kill(self):
        if self._process is not None:
            self._process.kill()
            self._process.wait()
            self._process = None

    def close(self):
        with self._lock:
            if self._process is not None:
                try:
                    self._process.stdin.close()
                    self._process.wait(timeout=self.timeout_seconds)
                except (OSError, subprocess.TimeoutExpired):
                    self._kill()
                self._process = None
        self._reader.shutdown(wait=False)


class HttpRewriter(CaptionRewriter):
    """POSTs the request JSON to an endpoint that answers with {"text": ...}."""

    name = "http"

    def __init__(
        self,
        endpoint: str,
        timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS,
        session: Optional[requests.Session] = None,
    ):
        if not endpoint:
            raise ConfigError("http rewriter needs an endpoint")
        self.endpoint = endpoint
        self.timeout_seconds = timeout_seconds
        self.session = session or build_session_with_retries()

    def rewrite(self, request: RewriterRequest, ruleset: PromptRuleSet) -> RewriterResponse:
        try:
            resp = self.session.post(self.endpoint, json=request.to_dict(), timeout=self.timeout_seconds)
            resp.raise_for_status()
            data = resp.json()
        except (requests.RequestException, ValueError) as e:
            logger.error(f"Error calling rewriter endpoint {self.endpoint}: {e}")
            raise RewriterTransportError(str(e)) from e
        text = str(data.get("text", "")).strip() if isinstance(data, dict) else ""
        return RewriterResponse(text=text, status="ok" if text else "empty")


class ChatRewriter(CaptionRewriter):
    """Uses a hosted or local chat model to rewrite captions"""

    name = "chat"

    def __init__(
        self,
        api_key: str = "",
        *,
        model: str = DEFAULT_MODEL,
        max_tokens: int = DEFAULT_MAX_TOKENS,
        temperature: float = DEFAULT_TEMPERATURE,
        timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS,
        session: Optional[requests.Session] = None,
        provider: str = "openai",
        ollama_host: Optional[str] = None,
        openrouter_api_key: Optional[str] = None,
        openrouter_model: Optional[str] = None,
        openrouter_api_url: Optional[str] = None,
        fallback: Optional[CaptionRewriter] = None,
    ):
        self.api_key = api_key
        self.model = model
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.timeout_seconds = timeout_seconds

        # Provider settings
        self.provider = (provider or "openai").lower()
        self.ollama_host = ollama_host or os.getenv("OLLAMA_HOST", "http://127.0.0.1:11434")
        self.openrouter_api_key = openrouter_api_key or os.getenv("OPENROUTER_API_KEY", "")
        self.openrouter_model = openrouter_model or os.getenv("OPENROUTER_MODEL", "openrouter/auto")
        self.openrouter_api_url = openrouter_api_url or os.getenv(
            "OPENROUTER_API_URL", "https://openrouter.ai/api/v1/chat/completions"
        )
        if self.provider == "ollama" and self.model == DEFAULT_MODEL:
            self.model = os.getenv("OLLAMA_MODEL", "llama3.1:8b-instruct")
        self.fallback = fallback or RuleBasedRewriter()

        self.session = session or build_session_with_retries()

    def _has_credentials(self) -> bool:
        if self.provider == "openai":
            return bool(self.api_key) and self.api_key != "your_openai_api_key_here"
        if self.provider == "openrouter":
            return bool(self.openrouter_api_key)
        return True

    def rewrite(self, request: RewriterRequest, ruleset: PromptRuleSet) -> RewriterResponse:
        if not self._has_credentials():
            logger.warning(f"{self.provider} API key not provided, using rule-based rewriter")
            return self.fallback.rewrite(request, ruleset)
        prompt = ruleset.render_prompt(request.caption, request.events)
        text = self._call_llm_chat(prompt).strip()
        # models sometimes wrap the caption in quotes
        text = text.strip('"').strip()
        return RewriterResponse(text=text, status="ok" if text else "empty")

    def _messages(self, prompt: str) -> List[Dict[str, str]]:
        return [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": prompt},
        ]

    def _post(self, url: str, payload: Dict, headers: Optional[Dict[str, str]] = None) -> Dict:
        try:
            resp = self.session.post(url, headers=headers, json=payload, timeout=self.timeout_seconds)
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as e:
            logger.error(f"Error calling {self.provider} chat API: {e}")
            raise RewriterTransportError(str(e)) from e

    def _call_openai_chat(self, prompt: str) -> str:
        headers = {
            "Authorization": f"Bearer {self.api_key}",
            "Content-Type": "application/json",
        }
        payload = {
            "model": self.model,
            "messages": self._messages(prompt),
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        }
        data = self._post(OPENAI_CHAT_COMPLETIONS_URL, payload, headers)
        return data["choices"][0]["message"]["content"]

    def _call_ollama_chat(self, prompt: str) -> str:
        url = f"{self.ollama_host.rstrip('/')}/api/chat"
        payload = {
            "model": self.model,
            "messages": self._messages(prompt),
            "stream": False,
            "options": {"temperature": self.temperature, "num_predict": self.max_tokens},
        }
        data = self._post(url, payload)
        msg = data.get("message") or {}
        if msg.get("content"):
            return msg["content"]
        return str(data.get("response", ""))

    def _call_openrouter_chat(self, prompt: str) -> str:
        headers = {
            "Authorization": f"Bearer {self.openrouter_api_key}",
            "Content-Type": "application/json",
        }
        payload = {
            "model": self.openrouter_model or self.model,
            "messages": self._messages(prompt),
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        }
        data = self._post(self.openrouter_api_url, payload, headers)
        return data["choices"][0]["message"]["content"]

    def _call_llm_chat(self, prompt: str) -> str:
        """Dispatch to the configured provider's chat API."""
        try:
            if self.provider == "ollama":
                return self._call_ollama_chat(prompt)
            if self.provider == "openrouter":
                return self._call_openrouter_chat(prompt)
            return self._call_openai_chat(prompt)
        except (KeyError, IndexError, TypeError) as e:
            raise RewriterTransportError(f"unexpected {self.provider} response shape: {e}") from e


def build_rewriter(kind: str, settings) -> CaptionRewriter:
    """Create the rewriter named by ``kind`` from a Config-like object."""
    kind = (kind or "rule").lower()
    if kind == "rule":
        return RuleBasedRewriter()
    if kind == "subprocess":
        return SubprocessRewriter(settings.REWRITER_COMMAND, timeout_seconds=settings.REWRITER_TIMEOUT)
    if kind == "http":
        return HttpRewriter(settings.REWRITER_ENDPOINT, timeout_seconds=settings.REWRITER_TIMEOUT)
    if kind == "chat":
        return ChatRewriter(
            settings.OPENAI_API_KEY,
            model=settings.DEFAULT_MODEL,
            max_tokens=settings.MAX_TOKENS,
            temperature=settings.TEMPERATURE,
            timeout_seconds=settings.REWRITER_TIMEOUT,
            provider=settings.AI_PROVIDER,
            ollama_host=settings.OLLAMA_HOST,
            openrouter_api_key=settings.OPENROUTER_API_KEY,
            openrouter_model=settings.OPENROUTER_MODEL,
            openrouter_api_url=settings.OPENROUTER_API_URL,
        )
    raise ConfigError(f"unknown rewriter kind '{kind}', expected one of {', '.join(REWRITER_KINDS)}")


def describe_rewriter(client: CaptionRewriter) -> Dict[str, str]:
    info = {"kind": client.name}
    if isinstance(client, ChatRewriter):
        info.update(provider=client.provider, model=client.model)
    elif isinstance(client, SubprocessRewriter):
        info["command"] = " ".join(client.command)
    elif isinstance(client, HttpRewriter):
        info["endpoint"] = client.endpoint
    return info

