"""Acquisition of the snapshot descriptors.

In ``replay`` mode, descriptors are read from a directory of fixtures named
after the question ids. In ``http`` mode, the prompt of the selected variant
is posted with a media reference to an external endpoint, whose response body
is parsed as a descriptor. Responses are cached on disk when a cache
directory is configured.

The HTTP mode requires the optional ``httpx`` package.
"""

from typing import Literal, TypeAlias
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
import hashlib
import logging
import time

from .base import EgofuseError, Seconds
from .qa import Question
from .tracks import DescriptorError, SnapshotDescriptor, parse_snapshot, read_snapshot

try:
    import httpx
except ImportError:
    IS_HTTPX_INSTALLED = False
else:
    IS_HTTPX_INSTALLED = True

logger = logging.getLogger(__name__)

PromptVariant: TypeAlias = Literal["open_model", "proprietary"]
"""The open-model prompt asks for the span, mode and object descriptions;
the proprietary prompt also asks for keyframes."""

_TRANSIENT_STATUS = {429, 500, 502, 503, 504}


class ProviderError(EgofuseError):
    """Base class of the descriptor acquisition errors."""


@dataclass
class MissingFixtureError(ProviderError):
    path: str

    def __str__(self) -> str:
        return f"No descriptor fixture at {self.path}"


@dataclass
class ProviderResponseError(ProviderError):
    """The endpoint answered with an error or an unusable descriptor."""
    message: str
    body: str

    def __str__(self) -> str:
        return self.message


class ProviderTimeoutError(ProviderError):
    pass


class ProviderUnavailableError(ProviderError):
    """The HTTP mode is selected but httpx is not installed."""


@dataclass(frozen=True, slots=True)
class ProviderConfig:
    mode: Literal["replay", "http"] = "replay"
    endpoint: str | None = None
    """URL receiving the POST requests, required in http mode."""
    timeout: Seconds = 120.0
    retries: int = 3
    """Additional attempts after a transient failure."""
    backoff: Seconds = 1.0
    """Delay before the first retry, doubled at each attempt."""
    prompt: PromptVariant = "proprietary"
    fixture_dir: str | None = None
    """Directory of the ``<question id>.json`` fixtures of the replay mode."""
    cache_dir: str | None = None
    token: str | None = None
    """Bearer token sent as is."""

    def __post_init__(self) -> None:
        if self.mode not in ("replay", "http"):
            raise ValueError(f"Unknown provider mode {self.mode!r}")
        if self.prompt not in ("open_model", "proprietary"):
            raise ValueError(f"Unknown prompt variant {self.prompt!r}")
        if self.mode == "http" and not self.endpoint:
            raise ValueError("The http provider needs an endpoint")
        if self.timeout <= 0 or self.retries < 0 or self.backoff < 0:
            raise ValueError("Invalid timeout, retries or backoff")


def render_prompt(variant: PromptVariant, question: str, media: str = "",
                  duration: Seconds | None = None) -> str:
    """Fill the prompt resource of the variant. The prompt texts contain
    JSON braces, so only the named placeholders are substituted."""
    template = resources.files("egofuse.resources").joinpath(f"prompt_{variant}.txt").read_text(encoding="utf-8")
    values = {
        "{question}": question,
        "{uploaded_obj}": media,
        "{duration}": "" if duration is None else f"{duration:g}",
    }
    for placeholder, value in values.items():
        template = template.replace(placeholder, value)
    return template


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


def _cache_path(config: ProviderConfig, question_id: str, prompt: str) -> Path | None:
    if config.cache_dir is None:
        return None
    return Path(config.cache_dir) / f"{question_id}-{prompt_digest(prompt)}.json"


def _parse_body(body: str) -> SnapshotDescriptor:
    try:
        descriptor, _ = parse_snapshot(body)
    except DescriptorError as error:
        logger.error("Unparseable descriptor response: %r", body)
        raise ProviderResponseError(f"Unparseable descriptor: {error}", body) from None
    return descriptor


def _post(client: 'httpx.Client', config: ProviderConfig, prompt: str, media: str) -> str:
    assert config.endpoint is not None
    headers = {"Authorization": f"Bearer {config.token}"} if config.token else {}
    payload = {"prompt": prompt, "media": media}
    delay = config.backoff
    for attempt in range(config.retries + 1):
        last = attempt == config.retries
        try:
            response = client.post(config.endpoint, json=payload, headers=headers, timeout=config.timeout)
        except httpx.TimeoutException:
            if last:
                raise ProviderTimeoutError(f"No response from {config.endpoint} after {config.timeout} s") from None
            logger.warning("Timeout from %s, retrying in %g s", config.endpoint, delay)
        except httpx.TransportError as error:
            if last:
                raise ProviderResponseError(f"Request to {config.endpoint} failed: {error}", "") from None
            logger.warning("Request failed (%s), retrying in %g s", error, delay)
        else:
            if response.status_code == 200:
                return response.text
            if response.status_code not in _TRANSIENT_STATUS or last:
                raise ProviderResponseError(f"HTTP {response.status_code} from {config.endpoint}", response.text)
            logger.warning("HTTP %d from %s, retrying in %g s", response.status_code, config.endpoint, delay)
        time.sleep(delay)
        delay *= 2
    raise AssertionError("unreachable")


def fetch_descriptor(question: Question, media: str, config: ProviderConfig = ProviderConfig(),
                     duration: Seconds | None = None,
                     client: 'httpx.Client | None' = None) -> SnapshotDescriptor:
    """Get the snapshot descriptor of a question.

    ``media`` is an opaque reference to the recording, passed to the
    endpoint as is. An ``httpx.Client`` may be given to reuse connections.

    Raise :py:exc:`.MissingFixtureError` in replay mode without fixture,
    :py:exc:`.ProviderTimeoutError` once the retries are exhausted on
    timeouts and :py:exc:`.ProviderResponseError` on error responses and
    bodies that aren't descriptors."""
    if config.mode == "replay":
        path = Path(config.fixture_dir or ".") / f"{question.id}.json"
        if not path.is_file():
            raise MissingFixtureError(str(path))
        descriptor, _ = read_snapshot(path)
        return descriptor
    if not IS_HTTPX_INSTALLED:
        raise ProviderUnavailableError("The http provider requires httpx, install egofuse[http]")
    prompt = render_prompt(config.prompt, question.text or question.event, media, duration)
    cache = _cache_path(config, question.id, prompt)
    if cache is not None and cache.is_file():
        logger.debug("Descriptor of %s read from %s", question.id, cache)
        return _parse_body(cache.read_text(encoding="utf-8"))
    if client is None:
        with httpx.Client() as own_client:
            body = _post(own_client, config, prompt, media)
    else:
        body = _post(client, config, prompt, media)
    descriptor = _parse_body(body)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        cache.write_text(body, encoding="utf-8")
    logger.info("Fetched the descriptor of %s", question.id)
    return descriptor
