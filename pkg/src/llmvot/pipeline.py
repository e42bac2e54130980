"""Experiment orchestration: plan, execute (resumably), estimate.

Layout of one run::

    <root>/<run_id>/manifest.json     planned grid, provider, seed, template
    <root>/<run_id>/responses.jsonl   one ResponseRecord per line, append-only
    <root>/<run_id>/errors.jsonl      transport/request failures per key
    <root>/<run_id>/fits.json         per-cell rank-ordered logit fits
    <root>/<run_id>/report/           tables and curve series

A record is keyed by (cell, set_index, draw_index).  ``execute`` only asks
for keys that are missing from ``responses.jsonl``, so an interrupted run is
resumed by calling it again.  Transport failures go to ``errors.jsonl`` and
leave the key open for the next attempt.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .design import FACTOR_NAMES, FACTOR_LEVELS, FactorGrid, ScenarioCell, factorial_cells, package_registry
from .errors import (
    ConfigurationError,
    DataIntegrityError,
    IdentificationError,
    InvalidArgumentError,
    RequestError,
    StorageError,
    TransportError,
    ValidationError,
)
from .estimator import FitResult, RankingObservation, fit
from .respondents import ProviderConfig, SyntheticRule, make_respondent
from .survey import DEFAULT_TEMPLATE, ParseFailure, RankingResponse, available_templates, parse_response, render_prompt

logger = logging.getLogger(__name__)

DEFAULT_RESPONSES = 60
DEFAULT_MIN_RANKINGS = 30
CONFIG_KEYS = {"grid", "responses_per_cell_per_set", "provider", "template_version", "seed", "min_rankings"}


@dataclass
class RunManifest:
    run_id: str
    grid: FactorGrid
    responses_per_cell_per_set: int
    provider: ProviderConfig
    template_version: str
    created_at: str
    rng_seed: int
    min_rankings: int = DEFAULT_MIN_RANKINGS

    def cells(self) -> list[ScenarioCell]:
        return factorial_cells(self.grid)

    def planned_keys(self) -> list[tuple[ScenarioCell, int, int]]:
        return [
            (cell, set_index, draw)
            for cell in self.cells()
            for set_index in (1, 2)
            for draw in range(self.responses_per_cell_per_set)
        ]

    def planned_requests(self) -> int:
        return self.grid.size() * 2 * self.responses_per_cell_per_set

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "grid": self.grid.to_dict(),
            "responses_per_cell_per_set": self.responses_per_cell_per_set,
            "provider": self.provider.to_dict(),
            "template_version": self.template_version,
            "created_at": self.created_at,
            "rng_seed": self.rng_seed,
            "min_rankings": self.min_rankings,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunManifest":
        return cls(
            run_id=d["run_id"],
            grid=FactorGrid.from_dict(d["grid"]),
            responses_per_cell_per_set=int(d["responses_per_cell_per_set"]),
            provider=ProviderConfig.from_dict(d["provider"]),
            template_version=d["template_version"],
            created_at=d["created_at"],
            rng_seed=int(d["rng_seed"]),
            min_rankings=int(d.get("min_rankings", DEFAULT_MIN_RANKINGS)),
        )


def builtin_configs() -> list[str]:
    files = resources.files("llmvot") / "configs"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_config(source) -> dict:
    """A config dict from a mapping, a JSON file path, or a built-in config name."""
    if isinstance(source, Mapping):
        return dict(source)
    path = Path(source)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    elif str(source) in builtin_configs():
        text = (resources.files("llmvot") / "configs" / f"{source}.json").read_text(encoding="utf-8")
    else:
        raise ConfigurationError(f"config {source!r} is neither a file nor a built-in ({builtin_configs()})")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError([f"config is not valid JSON: {exc}"]) from exc


def _new_run_id(now: datetime) -> str:
    return now.strftime("%Y%m%dT%H%M%SZ") + "-" + uuid.uuid4().hex[:8]


def plan_run(config, seed: int | None = None, provider_kind: str | None = None,
             run_id: str | None = None) -> RunManifest:
    """Validate a config and turn it into a manifest.

    Every validation problem is collected and reported in one
    :class:`ValidationError`.  ``seed`` and ``provider_kind`` override the
    config, as the command-line flags do.
    """
    cfg = load_config(config)
    problems = []
    for key in sorted(set(cfg) - CONFIG_KEYS):
        problems.append(f"unknown config key {key!r}")

    grid_cfg = cfg.get("grid", {}) or {}
    factors = []
    if not isinstance(grid_cfg, Mapping):
        problems.append("grid must be a mapping of factor name to levels")
        grid_cfg = {}
    for name in grid_cfg:
        if name not in FACTOR_NAMES:
            problems.append(f"unknown grid factor {name!r}")
    for name in FACTOR_NAMES:
        levels = grid_cfg.get(name, list(FACTOR_LEVELS[name]))
        if not isinstance(levels, list) or not levels:
            problems.append(f"grid.{name} must be a non-empty list")
            continue
        bad = [lv for lv in levels if lv not in FACTOR_LEVELS[name]]
        if bad:
            problems.append(f"grid.{name} has invalid level(s) {bad}; allowed {list(FACTOR_LEVELS[name])}")
        if len(set(map(str, levels))) != len(levels):
            problems.append(f"grid.{name} repeats a level")
        factors.append((name, tuple(levels)))

    n_resp = cfg.get("responses_per_cell_per_set", DEFAULT_RESPONSES)
    if not isinstance(n_resp, int) or isinstance(n_resp, bool) or n_resp < 1:
        problems.append("responses_per_cell_per_set must be an integer >= 1")
    min_rankings = cfg.get("min_rankings", DEFAULT_MIN_RANKINGS)
    if not isinstance(min_rankings, int) or min_rankings < 1:
        problems.append("min_rankings must be an integer >= 1")

    template = cfg.get("template_version", DEFAULT_TEMPLATE)
    if template not in available_templates():
        problems.append(f"template_version {template!r} not in {available_templates()}")

    rng_seed = cfg.get("seed", 0) if seed is None else seed
    if not isinstance(rng_seed, int) or not 0 <= rng_seed < 2**64:
        problems.append("seed must be an integer in [0, 2**64)")
        rng_seed = 0

    prov_cfg = dict(cfg.get("provider", {}) or {})
    if provider_kind is not None:
        prov_cfg["kind"] = provider_kind
    provider = None
    try:
        provider = ProviderConfig.from_dict(prov_cfg)
        if provider.kind == "synthetic":
            rule = provider.synthetic_rule or SyntheticRule()
            rule = SyntheticRule(rule.base_beta, rule.income_exponent, rule.purpose_time_multipliers, rng_seed)
            provider = replace(provider, synthetic_rule=rule)
        problems.extend(provider.problems())
    except (TypeError, ValueError, KeyError, AttributeError) as exc:
        problems.append(f"provider block invalid: {exc}")

    if problems:
        raise ValidationError(problems)
    now = datetime.now(timezone.utc)
    return RunManifest(
        run_id=run_id or _new_run_id(now),
        grid=FactorGrid(tuple(factors)),
        responses_per_cell_per_set=n_resp,
        provider=provider,
        template_version=template,
        created_at=now.isoformat(timespec="seconds"),
        rng_seed=rng_seed,
        min_rankings=min_rankings,
    )


@dataclass
class ResponseRecord:
    run_id: str
    cell: ScenarioCell
    set_index: int
    draw_index: int
    raw: str
    parsed: RankingResponse | ParseFailure
    provider_metadata: dict = field(default_factory=dict)
    timestamp: str = ""
    template_version: str = DEFAULT_TEMPLATE

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.cell.key(), self.set_index, self.draw_index)

    @property
    def ok(self) -> bool:
        return isinstance(self.parsed, RankingResponse)

    def to_dict(self) -> dict:
        parsed = ({"ok": True, **self.parsed.to_dict()} if self.ok
                  else {"ok": False, **self.parsed.to_dict()})
        return {
            "run_id": self.run_id,
            "cell": self.cell.key(),
            "set_index": self.set_index,
            "draw_index": self.draw_index,
            "raw": self.raw,
            "parsed": parsed,
            "provider": self.provider_metadata,
            "template_version": self.template_version,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ResponseRecord":
        p = d["parsed"]
        if p["ok"]:
            parsed = RankingResponse(tuple(p["order"]), p.get("reason", ""))
        else:
            parsed = ParseFailure(p["kind"], p.get("detail", ""), d["raw"])
        return cls(
            run_id=d["run_id"],
            cell=ScenarioCell.from_key(d["cell"]),
            set_index=int(d["set_index"]),
            draw_index=int(d["draw_index"]),
            raw=d["raw"],
            parsed=parsed,
            provider_metadata=d.get("provider", {}),
            timestamp=d.get("timestamp", ""),
            template_version=d.get("template_version", DEFAULT_TEMPLATE),
        )


class ResponseStore:
    """Append-only JSONL store for one run directory.

    Appends go through one lock.  A torn final line (process killed mid
    write) is skipped on read and never rewritten; the next append starts on
    a fresh line so the earlier bytes stay untouched.
    """

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / "responses.jsonl"
        self.errors_path = self.run_dir / "errors.jsonl"
        self._lock = threading.Lock()

    def _append_line(self, path: Path, obj: dict) -> None:
        line = json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n"
        try:
            with self._lock:
                self.run_dir.mkdir(parents=True, exist_ok=True)
                needs_newline = False
                if path.exists() and path.stat().st_size > 0:
                    with open(path, "rb") as fh:
                        fh.seek(-1, os.SEEK_END)
                        needs_newline = fh.read(1) != b"\n"
                with open(path, "a", encoding="utf-8") as fh:
                    if needs_newline:
                        fh.write("\n")
                    fh.write(line)
                    fh.flush()
        except OSError as exc:
            raise StorageError(f"cannot append to {path}: {exc}") from exc

    def append(self, record: ResponseRecord) -> None:
        self._append_line(self.path, record.to_dict())

    def append_error(self, entry: dict) -> None:
        self._append_line(self.errors_path, entry)

    def _lines(self, path: Path):
        if not path.exists():
            return
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("%s:%d: skipping unreadable line (torn write?)", path, lineno)

    def records(self) -> Iterable[ResponseRecord]:
        for d in self._lines(self.path):
            try:
                yield ResponseRecord.from_dict(d)
            except InvalidArgumentError as exc:
                raise DataIntegrityError(f"record references an unknown cell: {exc}") from exc
            except (KeyError, TypeError) as exc:
                raise DataIntegrityError(f"malformed record in {self.path}: {exc!r}") from exc

    def errors(self) -> list[dict]:
        return list(self._lines(self.errors_path))

    def keys(self) -> set[tuple[str, int, int]]:
        return {r.key for r in self.records()}


def run_dir(root, run_id: str) -> Path:
    return Path(root) / run_id


def save_manifest(manifest: RunManifest, root) -> Path:
    d = run_dir(root, manifest.run_id)
    path = d / "manifest.json"
    if path.exists():
        raise StorageError(f"run {manifest.run_id!r} already exists in {root}")
    d.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(root, run_id: str) -> RunManifest:
    path = run_dir(root, run_id) / "manifest.json"
    if not path.is_file():
        raise ConfigurationError(f"no run {run_id!r} under {root}")
    return RunManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))


def respondent_for(manifest: RunManifest, **kwargs):
    """Respondent for a manifest; ``NO_NETWORK=1`` forces the synthetic one."""
    config = manifest.provider
    if config.kind == "remote" and os.environ.get("NO_NETWORK") == "1":
        logger.warning("NO_NETWORK=1: using the synthetic respondent instead of %s", config.model_name)
        rule = config.synthetic_rule or SyntheticRule(noise_seed=manifest.rng_seed)
        config = ProviderConfig(kind="synthetic", synthetic_rule=rule)
    if config.kind == "remote" and not os.environ.get(config.api_key_env):
        raise ConfigurationError(f"environment variable {config.api_key_env!r} holding the API key is not set")
    return make_respondent(config, **kwargs)


@dataclass
class ExecutionSummary:
    planned: int
    already_present: int
    new_records: int = 0
    parse_failures: int = 0
    request_errors: int = 0
    failure_kinds: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return self.already_present + self.new_records == self.planned


def execute(manifest: RunManifest, respondent, store: ResponseStore, limit: int | None = None,
            reask: int = 0, progress=None) -> ExecutionSummary:
    """Collect every planned response that is not yet in ``store``.

    Requests fan out over ``concurrency_cap`` worker threads; this thread is
    the only writer.  ``limit`` stops after that many new records (used to
    interrupt a run on purpose).  ``reask`` re-asks a respondent whose answer
    failed to parse, at most that many times; the last answer is stored.
    """
    packages = package_registry()
    done = store.keys()
    planned = manifest.planned_keys()
    todo = [k for k in planned if (k[0].key(), k[1], k[2]) not in done]
    summary = ExecutionSummary(planned=len(planned), already_present=len(planned) - len(todo))
    if limit is not None:
        todo = todo[:limit]
    if not todo:
        return summary

    def work(key):
        cell, set_index, draw = key
        choice_set = packages[cell.package_label].choice_set(set_index)
        prompt = render_prompt(cell, choice_set, manifest.template_version)
        attempts = 0
        while True:
            answer = respondent.answer(prompt, choice_set, draw)
            parsed = parse_response(answer.raw)
            if isinstance(parsed, RankingResponse) or attempts >= reask:
                break
            attempts += 1
        meta = {"model": answer.model, "latency": round(answer.latency, 6), "retries": answer.retries}
        if reask:
            meta["reasks"] = attempts
        return ResponseRecord(
            run_id=manifest.run_id, cell=cell, set_index=set_index, draw_index=draw, raw=answer.raw,
            parsed=parsed, provider_metadata=meta, template_version=manifest.template_version,
            timestamp=datetime.now(timezone.utc).isoformat(timespec="milliseconds"),
        )

    workers = max(1, manifest.provider.concurrency_cap if manifest.provider.kind == "remote" else 1)
    window = workers * 4
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, len(todo), window):
            batch = todo[start:start + window]
            futures = [(key, pool.submit(work, key)) for key in batch]
            for key, fut in futures:
                try:
                    record = fut.result()
                except (TransportError, RequestError) as exc:
                    summary.request_errors += 1
                    store.append_error({
                        "cell": key[0].key(), "set_index": key[1], "draw_index": key[2],
                        "category": exc.category, "status": getattr(exc, "status", None), "message": str(exc),
                        "timestamp": datetime.now(timezone.utc).isoformat(timespec="milliseconds"),
                    })
                    logger.warning("request failed for %s set %d draw %d: %s", key[0].key(), key[1], key[2], exc)
                    continue
                store.append(record)
                summary.new_records += 1
                if not record.ok:
                    summary.parse_failures += 1
                    kind = record.parsed.kind
                    summary.failure_kinds[kind] = summary.failure_kinds.get(kind, 0) + 1
            if progress is not None:
                progress(summary)
    logger.info("executed %d new records (%d parse failures, %d request errors)",
                summary.new_records, summary.parse_failures, summary.request_errors)
    return summary


def estimate_all(store, manifest: RunManifest, min_rankings: int | None = None,
                 exclusion_log: list | None = None, packages: Mapping | None = None) -> dict[ScenarioCell, FitResult]:
    """Fit one rank-ordered logit per cell, pooling both choice sets.

    Observations are ordered by (set, draw) so the result depends only on
    the store's content, not on the order records were appended.
    """
    packages = package_registry() if packages is None else packages
    threshold = manifest.min_rankings if min_rankings is None else min_rankings
    records = store.records() if isinstance(store, ResponseStore) else store
    by_cell: dict[str, dict] = {}
    for rec in records:
        if rec.ok:
            by_cell.setdefault(rec.cell.key(), {})[(rec.set_index, rec.draw_index)] = rec.parsed.order

    def exclude(cell, reason):
        logger.warning("skipping cell %s: %s", cell.key(), reason)
        if exclusion_log is not None:
            exclusion_log.append({"cell": cell.key(), "reason": reason})

    fits = {}
    for cell in manifest.cells():
        if cell.package_label not in packages:
            raise DataIntegrityError(f"cell {cell.key()} references unknown package {cell.package_label!r}")
        package = packages[cell.package_label]
        rankings = by_cell.get(cell.key(), {})
        if len(rankings) < threshold:
            exclude(cell, f"{len(rankings)} parsed rankings < minimum {threshold}")
            continue
        observations = [
            RankingObservation(package.choice_set(set_index).attribute_matrix(), order)
            for (set_index, _), order in sorted(rankings.items())
        ]
        try:
            fits[cell] = fit(observations)
        except IdentificationError as exc:
            exclude(cell, str(exc))
    return fits


def save_fits(fits: Mapping[ScenarioCell, FitResult], path, exclusions: list | None = None) -> Path:
    path = Path(path)
    doc = {"fits": {cell.key(): r.to_dict() for cell, r in fits.items()}, "exclusions": exclusions or []}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_fits(path) -> tuple[dict[ScenarioCell, FitResult], list]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    fits = {ScenarioCell.from_key(k): FitResult.from_dict(v) for k, v in doc["fits"].items()}
    return fits, doc.get("exclusions", [])
