"""Answer sources for the survey.

``SyntheticRespondent`` draws rankings from a rank-ordered logit with known,
context-dependent coefficients; it is the ground truth the estimator and the
elasticity regressions are checked against.  ``RemoteRespondent`` sends the
rendered prompt to an OpenAI-compatible chat-completion endpoint.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import httpx
import numpy as np

from .design import PURPOSES, ChoiceSet, ScenarioCell
from .errors import ConfigurationError, InvalidArgumentError, RequestError, TransportError
from .estimator import Coefficients, vot_from
from .survey import RenderedPrompt, format_answer

logger = logging.getLogger(__name__)

REFERENCE_INCOME = 25.0
RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


def sample_plackett_luce(utilities: Sequence[float], rng: np.random.Generator) -> list[int]:
    """Draw a ranking (1-based ids, best first) by sorting Gumbel-perturbed utilities."""
    u = np.asarray(utilities, dtype=float)
    if u.ndim != 1 or not np.all(np.isfinite(u)):
        raise InvalidArgumentError("utilities must be a finite 1-d sequence")
    noisy = u + rng.gumbel(size=u.shape)
    # stable sort on the negated keys keeps ties deterministic
    return [int(i) + 1 for i in np.argsort(-noisy, kind="stable")]


@dataclass(frozen=True)
class SyntheticRule:
    """Respondent coefficients as a function of the scenario cell.

    The cost coefficient is ``base.beta_cost * (income / 25) ** -income_exponent``
    and the time coefficient is ``base.beta_time * purpose_time_multipliers[purpose]``,
    so the implied VOT scales as ``income ** income_exponent``.
    """

    base_beta: Coefficients = Coefficients(-0.30, -0.05, -0.50)
    income_exponent: float = 0.0
    purpose_time_multipliers: Mapping[str, float] = field(
        default_factory=lambda: {p: 1.0 for p in PURPOSES}
    )
    noise_seed: int = 0

    def __post_init__(self):
        missing = [p for p in PURPOSES if p not in self.purpose_time_multipliers]
        if missing:
            raise InvalidArgumentError(f"purpose_time_multipliers missing {missing}")
        if any(not self.purpose_time_multipliers[p] > 0 for p in PURPOSES):
            raise InvalidArgumentError("purpose_time_multipliers must be positive")
        if not math.isfinite(self.income_exponent):
            raise InvalidArgumentError("income_exponent must be finite")

    def coefficients(self, cell: ScenarioCell) -> Coefficients:
        b = self.base_beta
        cost = b.beta_cost * (cell.income / REFERENCE_INCOME) ** (-self.income_exponent)
        t = b.beta_time * self.purpose_time_multipliers[cell.purpose]
        return Coefficients(cost, t, b.beta_truck)

    def vot(self, cell: ScenarioCell) -> float | None:
        return vot_from(self.coefficients(cell))

    def to_dict(self) -> dict:
        return {
            "base_beta": list(self.base_beta.as_tuple()),
            "income_exponent": self.income_exponent,
            "purpose_time_multipliers": {p: self.purpose_time_multipliers[p] for p in PURPOSES},
            "noise_seed": self.noise_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticRule":
        kwargs = {}
        if "base_beta" in d:
            kwargs["base_beta"] = Coefficients.from_array(d["base_beta"])
        if "income_exponent" in d:
            kwargs["income_exponent"] = float(d["income_exponent"])
        if "purpose_time_multipliers" in d:
            kwargs["purpose_time_multipliers"] = {k: float(v) for k, v in d["purpose_time_multipliers"].items()}
        if "noise_seed" in d:
            kwargs["noise_seed"] = int(d["noise_seed"])
        return cls(**kwargs)


def _seed_words(*parts) -> list[int]:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]


def synthetic_answer(cell: ScenarioCell, choice_set: ChoiceSet, rule: SyntheticRule, draw_index: int) -> str:
    """Seeded ranking for one (cell, set, draw), serialised in the answer format."""
    beta = rule.coefficients(cell).as_array()
    x = np.asarray(choice_set.attribute_matrix())
    seed = [rule.noise_seed & 0xFFFFFFFFFFFFFFFF] + _seed_words(cell.key(), choice_set.index, draw_index)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return format_answer(sample_plackett_luce(x @ beta, rng), "synthetic")


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "synthetic"
    model_name: str = "gpt-4o"
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 1.0
    max_retries: int = 5
    concurrency_cap: int = 4
    timeout: float = 60.0
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    synthetic_rule: SyntheticRule | None = None

    def problems(self) -> list[str]:
        out = []
        if self.kind not in ("remote", "synthetic"):
            out.append(f"provider.kind must be 'remote' or 'synthetic', got {self.kind!r}")
        if not self.temperature >= 0:
            out.append("provider.temperature must be >= 0")
        if not (isinstance(self.concurrency_cap, int) and self.concurrency_cap >= 1):
            out.append("provider.concurrency_cap must be an integer >= 1")
        if not (isinstance(self.max_retries, int) and self.max_retries >= 0):
            out.append("provider.max_retries must be a non-negative integer")
        if not self.timeout > 0:
            out.append("provider.timeout must be positive")
        if self.kind == "remote":
            for name in ("model_name", "endpoint_url", "api_key_env"):
                if not getattr(self, name):
                    out.append(f"provider.{name} is required for a remote provider")
        return out

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "model_name": self.model_name,
            "endpoint_url": self.endpoint_url,
            "api_key_env": self.api_key_env,
            "temperature": self.temperature,
            "max_retries": self.max_retries,
            "concurrency_cap": self.concurrency_cap,
            "timeout": self.timeout,
            "backoff_base": self.backoff_base,
            "backoff_max": self.backoff_max,
        }
        if self.synthetic_rule is not None:
            d["synthetic_rule"] = self.synthetic_rule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProviderConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d and k != "synthetic_rule"}
        rule = d.get("synthetic_rule")
        return cls(**known, synthetic_rule=SyntheticRule.from_dict(rule) if rule is not None else None)


@dataclass
class Answer:
    raw: str
    model: str
    latency: float
    retries: int


class SyntheticRespondent:
    def __init__(self, rule: SyntheticRule):
        self.rule = rule
        self.name = "synthetic"

    def answer(self, prompt: RenderedPrompt, choice_set: ChoiceSet, draw_index: int) -> Answer:
        t0 = time.perf_counter()
        raw = synthetic_answer(prompt.cell, choice_set, self.rule, draw_index)
        return Answer(raw, self.name, time.perf_counter() - t0, 0)


_semaphores: dict[tuple, threading.BoundedSemaphore] = {}
_semaphores_lock = threading.Lock()


def _process_semaphore(config: ProviderConfig) -> threading.BoundedSemaphore:
    key = (config.endpoint_url, config.model_name, config.concurrency_cap)
    with _semaphores_lock:
        if key not in _semaphores:
            _semaphores[key] = threading.BoundedSemaphore(config.concurrency_cap)
        return _semaphores[key]


def _backoff(config: ProviderConfig, attempt: int) -> float:
    ceiling = min(config.backoff_max, config.backoff_base * 2 ** attempt)
    return random.uniform(0, ceiling)


def remote_answer(
    prompt: RenderedPrompt,
    config: ProviderConfig,
    client: httpx.Client | None = None,
    sleep=time.sleep,
) -> Answer:
    """One chat completion with retries on 408/429/5xx and timeouts.

    The prompt goes out as a single user message.  Backoff is full-jitter
    exponential.  At most ``config.concurrency_cap`` requests per endpoint are
    in flight in this process.
    """
    if config.kind != "remote":
        raise ConfigurationError(f"provider kind is {config.kind!r}, not 'remote'")
    key = os.environ.get(config.api_key_env or "")
    if not key:
        raise ConfigurationError(f"environment variable {config.api_key_env!r} holding the API key is not set")
    payload = {
        "model": config.model_name,
        "temperature": config.temperature,
        "messages": [{"role": "user", "content": prompt.text}],
    }
    headers = {"Authorization": f"Bearer {key}"}
    own_client = client is None
    if own_client:
        client = httpx.Client(timeout=config.timeout)
    sem = _process_semaphore(config)
    last_status = None
    last_error = ""
    try:
        for attempt in range(config.max_retries + 1):
            if attempt:
                sleep(_backoff(config, attempt - 1))
            t0 = time.perf_counter()
            try:
                with sem:
                    resp = client.post(config.endpoint_url, json=payload, headers=headers, timeout=config.timeout)
            except httpx.TimeoutException as exc:
                last_status, last_error = None, f"timeout: {exc}"
                logger.warning("request timed out (attempt %d/%d)", attempt + 1, config.max_retries + 1)
                continue
            except httpx.TransportError as exc:
                last_status, last_error = None, f"transport: {exc}"
                logger.warning("transport failure (attempt %d/%d): %s", attempt + 1, config.max_retries + 1, exc)
                continue
            latency = time.perf_counter() - t0
            if resp.status_code in RETRYABLE_STATUS:
                last_status, last_error = resp.status_code, resp.text[:200]
                logger.warning("HTTP %d (attempt %d/%d)", resp.status_code, attempt + 1, config.max_retries + 1)
                continue
            if resp.status_code >= 400:
                raise RequestError(f"HTTP {resp.status_code}: {resp.text[:200]}", status=resp.status_code)
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise RequestError(f"unexpected response body: {exc!r}", status=resp.status_code) from exc
            return Answer(text if isinstance(text, str) else "", config.model_name, latency, attempt)
    finally:
        if own_client:
            client.close()
    raise TransportError(
        f"gave up after {config.max_retries + 1} attempts (last status {last_status}): {last_error}",
        status=last_status,
        attempts=config.max_retries + 1,
    )


class RemoteRespondent:
    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None, sleep=time.sleep):
        if config.kind != "remote":
            raise ConfigurationError("RemoteRespondent needs a remote provider config")
        self.config = config
        self.client = client
        self.sleep = sleep
        self.name = config.model_name

    def answer(self, prompt: RenderedPrompt, choice_set: ChoiceSet, draw_index: int) -> Answer:
        return remote_answer(prompt, self.config, client=self.client, sleep=self.sleep)


def make_respondent(config: ProviderConfig, **kwargs):
    if config.kind == "synthetic":
        return SyntheticRespondent(config.synthetic_rule or SyntheticRule())
    return RemoteRespondent(config, **kwargs)
