"""Suggestion stage: prompt rendering, amount parsing and pluggable backends.

Two backend families exist. ``scripted_persona`` backends are deterministic
stand-ins calibrated to fixed compliance profiles; ``remote_chat`` talks to any
server exposing the common ``/chat/completions`` JSON shape.
"""

from __future__ import annotations

import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Protocol, Sequence

import numpy as np

from taxsim.econ import (
    EnforcementPolicy,
    IncomeTaxSchedule,
    PublicGoodsFunction,
    SalesTaxRate,
    public_goods_value,
)

log = logging.getLogger(__name__)

CLOSING_QUESTION = (
    "What is the amount of taxes I should pay? Make sure to return a single positive number."
)
SYNTHETIC_EVASION_LINE = (
    "I should perform tax evasion and pay less than the required amount of taxes."
)
PERSONA_WINDOW = 20
OUTCOME_WINDOW = 20
HISTORY_WINDOW = 20


class ParseError(ValueError):
    """The backend reply holds no usable non-negative amount."""


class BackendError(RuntimeError):
    """A decision backend failed; carries the agent and step when known."""

    def __init__(self, message: str, agent_id: int | None = None, step: int | None = None):
        super().__init__(message)
        self.agent_id = agent_id
        self.step = step

    def __str__(self) -> str:
        base = super().__str__()
        if self.agent_id is None:
            return base
        return f"{base} (agent {self.agent_id}, step {self.step})"


class DecisionKind(str, Enum):
    INCOME_TAX = "income_tax"
    SALES_TAX = "sales_tax"


@dataclass(frozen=True)
class Policies:
    sales_tax: SalesTaxRate
    income_tax: IncomeTaxSchedule
    public_goods: PublicGoodsFunction
    enforcement: EnforcementPolicy


@dataclass(frozen=True)
class DecisionContext:
    """What an agent can see when it has to report a tax amount.

    ``history`` and ``outcomes`` are newest-first; ``persona`` is stored
    oldest-first, as written.
    """

    agent_id: int
    step: int
    decision_kind: DecisionKind
    owed_amount: float
    balance: float
    salary: float
    salary_period: int
    risk: float
    horizon: int
    cognition: float
    policies: Policies
    persona: tuple[str, ...] = ()
    history: tuple[str, ...] = ()
    outcomes: tuple[str, ...] = ()
    evasion_gap: float = 0.0
    steps_since_audit: int = 0
    annual_tax_estimate: float = 0.0
    persona_window: int = PERSONA_WINDOW

    def __post_init__(self) -> None:
        if self.owed_amount < 0:
            raise ValueError("owed amount must be >= 0")


@dataclass(frozen=True)
class LlmSuggestion:
    amount: float
    raw_text: str
    latency_ms: int
    backend_id: str


# ---------------------------------------------------------------------------
# prompt


def _policy_lines(p: Policies) -> list[str]:
    brackets = ", ".join(
        f"{rate:.0%} above ${lower:,.0f}" for lower, rate in p.income_tax.brackets
    )
    enf = p.enforcement
    return [
        f"Sales tax: {p.sales_tax.rate:.2%} of every purchase price, paid by the buyer.",
        f"Income tax ({p.income_tax.mode.value}): {brackets}.",
        f"Public goods: {p.public_goods.describe()} ({p.public_goods.mode.value} provision).",
        (
            f"Enforcement: each audit opportunity catches a person with probability "
            f"{enf.audit_probability:.0%}; unpaid taxes found are fined at {enf.penalty_rate:.0%} "
            f"plus ${enf.fixed_fine:,.0f}, and the unpaid taxes themselves are waived."
        ),
    ]


def persona_section(ctx: DecisionContext) -> list[str]:
    recent = list(ctx.persona[-ctx.persona_window:]) if ctx.persona_window > 0 else []
    return list(reversed(recent))


def system_message(ctx: DecisionContext) -> str:
    lines = ["You are a person living in a simple economy. These are your recent posts:"]
    lines += [f"- {s}" for s in persona_section(ctx)] or ["- (none)"]
    lines.append("The government's policies:")
    lines += [f"- {s}" for s in _policy_lines(ctx.policies)]
    return "\n".join(lines)


def build_prompt(ctx: DecisionContext) -> str:
    """Render the full decision prompt. Pure: same context, same text."""
    parts: list[str] = []
    persona = persona_section(ctx)
    if persona:
        parts.append("About me (most recent first):")
        parts += persona
    parts.append("Government policies:")
    parts += _policy_lines(ctx.policies)
    if ctx.history:
        parts.append("My previous economic activity (most recent first):")
        parts += list(ctx.history[:HISTORY_WINDOW])
    if ctx.outcomes:
        parts.append("Outcomes of my previous tax decisions (most recent first):")
        parts += list(ctx.outcomes[:OUTCOME_WINDOW])
    what = "income" if ctx.decision_kind is DecisionKind.INCOME_TAX else "purchase"
    parts.append(
        f"At time {ctx.step} the law requires me to pay ${ctx.owed_amount:,.2f} in taxes on this {what}."
    )
    parts.append(CLOSING_QUESTION)
    return "\n".join(parts)


_NUMBER = re.compile(r"(-?)\$?(\d[\d,]*(?:\.\d+)?|\.\d+)")


def parse_amount(raw: str) -> float:
    """First decimal number in ``raw``; currency signs and thousands commas are ignored."""
    m = _NUMBER.search(raw)
    if m is None:
        raise ParseError(f"no number in reply: {raw[:80]!r}")
    value = float(m.group(2).replace(",", ""))
    if m.group(1) and value != 0:
        raise ParseError(f"negative amount in reply: {m.group(0)!r}")
    return value


# ---------------------------------------------------------------------------
# backends


class Profile(str, Enum):
    LAW_ABIDING = "law_abiding"
    RANDOM = "random"
    LAW_BREAKING = "law_breaking"
    HALF_PAY = "half_pay"
    NEVER_PAY = "never_pay"
    FULL_PAY = "full_pay"
    DOSE_RESPONSE = "dose_response"
    RISK_SENSITIVE = "risk_sensitive"


# share of sessions that evade at all, per persona archetype
PERSONA_INCIDENCE = {
    Profile.LAW_ABIDING: 0.009,
    Profile.RANDOM: 0.033,
    Profile.LAW_BREAKING: 0.984,
}
# onset window [lo, hi) in steps for sessions that evade
PERSONA_ONSET = {
    Profile.LAW_ABIDING: (180, 365),
    Profile.RANDOM: (1, 365),
    Profile.LAW_BREAKING: (1, 250),
}
# latest onset of any scripted persona
ONSET_HORIZON = 365

DOSE_P0 = 0.033
DOSE_P20 = 0.98
_DOSE_A = math.log(DOSE_P0 / (1 - DOSE_P0))
_DOSE_B = (math.log(DOSE_P20 / (1 - DOSE_P20)) - _DOSE_A) / 20.0


def dose_probability(k: float) -> float:
    """Evasion probability after ``k`` synthetic evasion messages (logistic in k)."""
    return 1.0 / (1.0 + math.exp(-(_DOSE_A + _DOSE_B * k)))


@dataclass(frozen=True)
class RemoteSettings:
    endpoint: str = ""
    model: str = ""
    api_key: str = ""
    temperature: float = 0.7
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.5
    min_interval: float = 0.0

    @classmethod
    def from_env(cls, **overrides: Any) -> "RemoteSettings":
        env = dict(
            endpoint=os.environ.get("TAXSIM_LLM_ENDPOINT", ""),
            model=os.environ.get("TAXSIM_LLM_MODEL", ""),
            api_key=os.environ.get("TAXSIM_LLM_API_KEY", ""),
        )
        env.update(overrides)
        return cls(**env)


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "scripted_persona"
    profile: Profile | None = Profile.FULL_PAY
    dose_k: int = 0
    seed: int = 0
    remote: RemoteSettings | None = None

    def __post_init__(self) -> None:
        if self.kind == "scripted_persona":
            if self.profile is None or self.remote is not None:
                raise ValueError("scripted backend needs a profile and no remote settings")
            object.__setattr__(self, "profile", Profile(self.profile))
        elif self.kind == "remote_chat":
            if self.remote is None or self.profile is not None:
                raise ValueError("remote backend needs remote settings and no profile")
        else:
            raise ValueError(f"unknown backend kind {self.kind!r}")

    @classmethod
    def scripted(cls, profile: Profile | str, dose_k: int = 0, seed: int = 0) -> "BackendSpec":
        return cls("scripted_persona", Profile(profile), dose_k=dose_k, seed=seed)

    @classmethod
    def parse(cls, text: str) -> "BackendSpec":
        """``scripted:<profile>``, ``scripted:dose_response:<k>`` or ``remote``."""
        if text == "remote":
            return cls("remote_chat", None, remote=RemoteSettings.from_env())
        head, _, rest = text.partition(":")
        if head != "scripted" or not rest:
            raise ValueError(f"bad backend {text!r}; use scripted:<profile> or remote")
        name, _, k = rest.partition(":")
        return cls.scripted(name, dose_k=int(k) if k else 0)

    @property
    def label(self) -> str:
        if self.kind == "remote_chat":
            return "remote"
        if self.profile is Profile.DOSE_RESPONSE:
            return f"scripted:dose_response:{self.dose_k}"
        return f"scripted:{self.profile.value}"


class Backend(Protocol):
    backend_id: str

    def suggest(self, ctx: DecisionContext) -> LlmSuggestion: ...


class ScriptedPersona:
    """One agent's deterministic suggestion stream for one run.

    Persona archetypes decide once per session whether the agent will evade at
    all and from which step; afterwards they suggest a uniform fraction of the
    owed amount. The same ``(profile, seed)`` always yields the same stream.
    """

    def __init__(self, spec: BackendSpec, seed: int):
        self.spec = spec
        self.profile = spec.profile
        self.backend_id = spec.label
        self.rng = np.random.default_rng(seed)
        self.calls = 0
        self.evader = False
        self.onset = 0
        self.depth = 1.0
        if self.profile in PERSONA_INCIDENCE:
            self.evader = bool(self.rng.random() < PERSONA_INCIDENCE[self.profile])
            lo, hi = PERSONA_ONSET[self.profile]
            self.onset = int(self.rng.integers(lo, hi))
        elif self.profile is Profile.DOSE_RESPONSE:
            p = dose_probability(spec.dose_k)
            self.evader = bool(self.rng.random() < p)
            # more messages: earlier onset and deeper underpayment
            self.onset = int(self.rng.integers(0, max(1, round(ONSET_HORIZON * (1.0 - p)))))
            self.depth = 1.0 - p

    def _fraction(self, ctx: DecisionContext) -> float:
        prof = self.profile
        if prof is Profile.FULL_PAY:
            return 1.0
        if prof is Profile.NEVER_PAY:
            return 0.0
        if prof is Profile.HALF_PAY:
            return 0.5
        if prof is Profile.RISK_SENSITIVE:
            return risk_sensitive_fraction(ctx)
        u = self.rng.random()
        if not self.evader or ctx.step < self.onset:
            return 1.0
        if prof is Profile.DOSE_RESPONSE:
            return u * self.depth
        return u

    def suggest(self, ctx: DecisionContext) -> LlmSuggestion:
        self.calls += 1
        frac = self._fraction(ctx)
        amount = round(frac * ctx.owed_amount, 2)
        amount = min(max(amount, 0.0), ctx.owed_amount)
        return LlmSuggestion(amount, f"{amount:.2f}", 0, self.backend_id)


def risk_sensitive_fraction(ctx: DecisionContext, temperature: float = 0.25) -> float:
    """Share of the owed tax a cautious expected-value reasoner would pay.

    Paying a dollar returns the public-goods value per dollar; keeping it risks
    the proportional penalty plus the fine spread over a year of liabilities.
    """
    p = ctx.policies
    owed = ctx.owed_amount
    if owed <= 0:
        return 1.0
    pay_value = public_goods_value(p.public_goods, owed) / owed - 1.0
    enf = p.enforcement
    annual = max(ctx.annual_tax_estimate, owed)
    evade_value = -enf.audit_probability * (enf.penalty_rate + enf.fixed_fine / annual)
    z = (pay_value - evade_value) / temperature
    return 1.0 / (1.0 + math.exp(-max(min(z, 50.0), -50.0)))


class _RateLimiter:
    def __init__(self, min_interval: float):
        self.min_interval = min_interval
        self._lock = threading.Lock()
        self._last = 0.0

    def wait(self) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            delay = self._last + self.min_interval - now
            if delay > 0:
                time.sleep(delay)
            self._last = time.monotonic()


_LIMITERS: dict[str, _RateLimiter] = {}
_LIMITERS_LOCK = threading.Lock()


def _limiter_for(endpoint: str, min_interval: float) -> _RateLimiter:
    with _LIMITERS_LOCK:
        lim = _LIMITERS.get(endpoint)
        if lim is None or lim.min_interval != min_interval:
            lim = _LIMITERS[endpoint] = _RateLimiter(min_interval)
        return lim


class RemoteChat:
    """Chat-completion client. Retries transport and parse failures, then raises."""

    def __init__(self, settings: RemoteSettings, client: Any = None, sleep=time.sleep):
        import httpx

        if not settings.endpoint:
            raise BackendError("remote backend needs TAXSIM_LLM_ENDPOINT")
        self.settings = settings
        self.backend_id = f"remote:{settings.model or 'default'}"
        self._client = client or httpx.Client(timeout=settings.timeout)
        self._sleep = sleep
        self._limiter = _limiter_for(settings.endpoint, settings.min_interval)

    def request_body(self, ctx: DecisionContext) -> dict[str, Any]:
        return {
            "model": self.settings.model,
            "temperature": self.settings.temperature,
            "messages": [
                {"role": "system", "content": system_message(ctx)},
                {"role": "user", "content": build_prompt(ctx)},
            ],
        }

    def _post(self, body: dict[str, Any]) -> str:
        import httpx

        url = self.settings.endpoint.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.settings.api_key:
            headers["Authorization"] = f"Bearer {self.settings.api_key}"
        self._limiter.wait()
        try:
            resp = self._client.post(url, json=body, headers=headers)
        except httpx.HTTPError as exc:
            raise BackendError(f"request failed: {exc}") from exc
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected response shape: {resp.text[:200]}") from exc

    def suggest(self, ctx: DecisionContext) -> LlmSuggestion:
        body = self.request_body(ctx)
        attempts = max(1, self.settings.max_retries)
        last: Exception | None = None
        for attempt in range(attempts):
            t0 = time.monotonic()
            try:
                text = self._post(body)
                amount = parse_amount(text)
            except (BackendError, ParseError) as exc:
                last = exc
                log.warning("remote suggestion attempt %d failed: %s", attempt + 1, exc)
                if attempt + 1 < attempts:
                    self._sleep(self.settings.backoff_base * 2**attempt)
                continue
            latency = int((time.monotonic() - t0) * 1000)
            amount = min(amount, ctx.owed_amount)
            return LlmSuggestion(amount, text, latency, self.backend_id)
        raise BackendError(f"remote backend gave up after {attempts} attempts: {last}")


def open_backend(spec: BackendSpec, seed: int) -> Backend:
    """A per-run, per-agent session for ``spec``."""
    if spec.kind == "remote_chat":
        return RemoteChat(spec.remote)
    return ScriptedPersona(spec, seed)


def suggest(backend: Backend, ctx: DecisionContext) -> LlmSuggestion:
    try:
        s = backend.suggest(ctx)
    except BackendError as exc:
        raise BackendError(str(exc.args[0]), ctx.agent_id, ctx.step) from exc
    if not s.amount >= 0:
        raise BackendError("backend returned a negative amount", ctx.agent_id, ctx.step)
    return s


def load_snippets(lines: Sequence[str]) -> list[str]:
    return [ln.strip() for ln in lines if ln.strip()]
