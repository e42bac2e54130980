"""Prompt rendering and response parsing for the route-ranking survey.

Each prompt shows one choice set (13 alternatives) together with the persona
and trip purpose of a scenario cell.  Respondents answer with two
machine-readable lines::

    RANKING: 5 > 2 > 13 > ... > 1
    REASON: free text

The parser is strict: anything that is not a full permutation of the ids
comes back as a :class:`ParseFailure`, never as a repaired ranking.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from typing import Sequence, Union

from .design import N_ALTERNATIVES, ChoiceSet, ScenarioCell
from .errors import InvalidArgumentError

DEFAULT_TEMPLATE = "v1"

FAILURE_KINDS = (
    "malformed_structure",
    "duplicate_rank",
    "missing_alternative",
    "out_of_range_id",
    "rank_count_mismatch",
)

_SEX_TEXT = {"male": "man", "female": "woman"}
_AGE_TEXT = {"20s": "20s", "50s": "50s"}
_EDUCATION_TEXT = {"high_school": "a high school diploma", "bachelors_plus": "a bachelor's degree or higher"}
_PURPOSE_TEXT = {
    "personal": "personal trip",
    "business": "business trip",
    "commute": "commute to work",
    "leisure": "leisure trip",
}


@dataclass(frozen=True)
class RenderedPrompt:
    cell: ScenarioCell
    set_index: int
    text: str
    template_version: str


@dataclass(frozen=True)
class RankingResponse:
    order: tuple[int, ...]
    reason: str

    def to_dict(self) -> dict:
        return {"order": list(self.order), "reason": self.reason}


@dataclass(frozen=True)
class ParseFailure:
    kind: str
    detail: str
    raw: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "detail": self.detail}


def available_templates() -> list[str]:
    files = resources.files("llmvot") / "templates"
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".txt"))


def load_template(version: str) -> str:
    if not re.fullmatch(r"[A-Za-z0-9_.-]+", version or ""):
        raise InvalidArgumentError(f"unknown template version {version!r}")
    path = resources.files("llmvot") / "templates" / f"{version}.txt"
    if not path.is_file():
        raise InvalidArgumentError(f"unknown template version {version!r}")
    return path.read_text(encoding="utf-8")


def _format_income(income) -> str:
    return f"{income:g}" if isinstance(income, float) else str(income)


def alternatives_table(choice_set: ChoiceSet) -> str:
    lines = [
        "| Alternative | Travel cost | Travel time | Trucks on the road |",
        "|---|---|---|---|",
    ]
    for a in sorted(choice_set.alternatives, key=lambda a: a.id):
        lines.append(f"| {a.id} | ${a.cost_cents // 100}.{a.cost_cents % 100:02d} | {a.time_min} min | "
                     f"{'Yes' if a.trucks else 'No'} |")
    return "\n".join(lines)


def render_prompt(cell: ScenarioCell, choice_set: ChoiceSet, template_version: str = DEFAULT_TEMPLATE) -> RenderedPrompt:
    template = load_template(template_version)
    text = template.format(
        sex=_SEX_TEXT[cell.sex],
        age=_AGE_TEXT[cell.age_band],
        education=_EDUCATION_TEXT[cell.education],
        income=_format_income(cell.income),
        purpose_phrase=_PURPOSE_TEXT[cell.purpose],
        n=N_ALTERNATIVES,
        table=alternatives_table(choice_set),
    )
    return RenderedPrompt(cell, choice_set.index, text, template_version)


def format_answer(order: Sequence[int], reason: str = "") -> str:
    """Serialise a ranking in the answer format the parser accepts."""
    return "RANKING: " + " > ".join(str(i) for i in order) + "\nREASON: " + reason


_RANKING_LINE = re.compile(r"^[ \t]*ranking[ \t]*:(.*)$", re.IGNORECASE | re.MULTILINE)
_REASON_KEY = re.compile(r"reason[ \t]*:", re.IGNORECASE)
_REASON_LINE = re.compile(r"^[ \t]*reason[ \t]*:", re.IGNORECASE | re.MULTILINE)
_TOKEN = re.compile(r"(?:(?:alternative|alt|option)[ \t]*\.?[ \t]*)?#?([0-9]+)", re.IGNORECASE)
_SEPARATOR = re.compile(r"[>,]")


def parse_response(raw: Union[str, bytes], n_alternatives: int = N_ALTERNATIVES) -> Union[RankingResponse, ParseFailure]:
    """Extract a ranking from respondent text; total over arbitrary input."""
    if isinstance(raw, (bytes, bytearray)):
        text = bytes(raw).decode("utf-8", errors="replace")
    elif isinstance(raw, str):
        text = raw
    else:
        return ParseFailure("malformed_structure", f"unsupported input type {type(raw).__name__}", repr(raw))

    def fail(kind, detail):
        return ParseFailure(kind, detail, text)

    matches = list(_RANKING_LINE.finditer(text))
    if not matches:
        return fail("malformed_structure", "no RANKING line")
    if len(matches) > 1:
        return fail("malformed_structure", f"{len(matches)} RANKING lines")
    body = matches[0].group(1)
    inline_reason = _REASON_KEY.search(body)
    if inline_reason:
        reason = body[inline_reason.end():] + text[matches[0].end():]
        body = body[: inline_reason.start()]
    else:
        later = _REASON_LINE.search(text, matches[0].end())
        reason = text[later.end():] if later else ""
    reason = reason.strip()

    body = body.strip()
    if not body:
        return fail("rank_count_mismatch", f"0 ids, expected {n_alternatives}")
    ids = []
    for position, token in enumerate(_SEPARATOR.split(body), start=1):
        token = token.strip()
        if not token:
            return fail("missing_alternative", f"rank position {position} is empty")
        m = _TOKEN.fullmatch(token)
        if m is None:
            return fail("malformed_structure", f"unreadable token {token[:40]!r} at rank position {position}")
        digits = m.group(1).lstrip("0") or "0"
        if len(digits) > 6:
            return fail("out_of_range_id", f"id {digits[:12]}... outside 1..{n_alternatives}")
        ids.append(int(digits))

    bad = [i for i in ids if not 1 <= i <= n_alternatives]
    if bad:
        return fail("out_of_range_id", f"id {bad[0]} outside 1..{n_alternatives}")
    seen = set()
    for i in ids:
        if i in seen:
            return fail("duplicate_rank", f"id {i} ranked more than once")
        seen.add(i)
    if len(ids) != n_alternatives:
        return fail("rank_count_mismatch", f"{len(ids)} ids, expected {n_alternatives}")
    return RankingResponse(tuple(ids), reason)
