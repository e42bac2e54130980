import hashlib
import json

import numpy as np
import pytest

from llmvot import pipeline
from llmvot.design import ScenarioCell
from llmvot.errors import ConfigurationError, DataIntegrityError, ValidationError
from llmvot.respondents import Answer, RemoteRespondent, SyntheticRespondent, SyntheticRule, synthetic_answer
from llmvot.survey import parse_response

SMALL = {
    "grid": {"package_label": ["ratio-29.1"], "purpose": ["business", "leisure"], "income": [15, 50],
             "sex": ["female"], "age_band": ["20s"], "education": ["bachelors_plus"]},
    "responses_per_cell_per_set": 20,
    "provider": {"kind": "synthetic"},
    "seed": 5,
}


def start(tmp_path, config=SMALL, run_id="r1", **kw):
    manifest = pipeline.plan_run(config, run_id=run_id, **kw)
    pipeline.save_manifest(manifest, tmp_path)
    return manifest, pipeline.ResponseStore(pipeline.run_dir(tmp_path, run_id))


def fits_bytes(fits, path):
    return pipeline.save_fits(fits, path).read_bytes()


class Garbling:
    """Synthetic answers, except every tenth draw (or one chosen cell) is unusable."""

    def __init__(self, rule, bad_cell=None):
        self.inner = SyntheticRespondent(rule)
        self.bad_cell = bad_cell
        self.name = "garbling"

    def answer(self, prompt, choice_set, draw_index):
        ans = self.inner.answer(prompt, choice_set, draw_index)
        if self.bad_cell is None and draw_index % 10 == 0:
            return Answer("I would rather not rank these.", self.name, 0.0, 0)
        if self.bad_cell is not None and prompt.cell == self.bad_cell:
            return Answer("RANKING: 1 > 1 > 2", self.name, 0.0, 0)
        return ans


def test_plan_counts():
    assert pipeline.plan_run("full-study").planned_requests() == 92_160
    assert len(pipeline.plan_run("full-study").cells()) == 768
    smoke = pipeline.plan_run("smoke")
    assert smoke.planned_requests() == 32 == len(smoke.planned_keys())
    assert len(pipeline.plan_run("synthetic-setting").cells()) == 128


def test_plan_is_deterministic():
    a = pipeline.plan_run("smoke", run_id="x").to_dict()
    b = pipeline.plan_run("smoke", run_id="x").to_dict()
    a.pop("created_at"), b.pop("created_at")
    assert a == b
    assert pipeline.RunManifest.from_dict(a | {"created_at": "t"}).to_dict()["grid"] == a["grid"]


def test_plan_overrides():
    m = pipeline.plan_run("smoke", seed=99, provider_kind="synthetic")
    assert m.rng_seed == 99 and m.provider.synthetic_rule.noise_seed == 99


def test_plan_reports_every_problem():
    bad = {"grid": {"income": [15, 99], "colour": ["red"], "purpose": []},
           "responses_per_cell_per_set": 0, "template_version": "v9", "bogus": 1,
           "provider": {"kind": "remote", "temperature": -1}}
    with pytest.raises(ValidationError) as info:
        pipeline.plan_run(bad)
    text = "\n".join(info.value.problems)
    for fragment in ("bogus", "colour", "grid.income", "grid.purpose", "responses_per_cell_per_set",
                     "template_version", "temperature"):
        assert fragment in text
    with pytest.raises(ConfigurationError):
        pipeline.plan_run("no-such-config")


def test_interrupt_and_resume(tmp_path):
    manifest, store = start(tmp_path)
    total = manifest.planned_requests()
    first = pipeline.execute(manifest, pipeline.respondent_for(manifest), store, limit=total // 2)
    assert first.new_records == total // 2 and not first.complete
    prefix = store.path.read_bytes()

    second = pipeline.execute(manifest, pipeline.respondent_for(manifest), store)
    assert second.already_present == total // 2 and second.new_records == total - total // 2
    assert store.path.read_bytes().startswith(prefix)
    keys = [r.key for r in store.records()]
    assert len(keys) == len(set(keys)) == total

    third = pipeline.execute(manifest, pipeline.respondent_for(manifest), store)
    assert third.new_records == 0 and third.complete

    _, straight = start(tmp_path, run_id="r2")
    pipeline.execute(manifest, pipeline.respondent_for(manifest), straight)
    a = fits_bytes(pipeline.estimate_all(store, manifest), tmp_path / "a.json")
    b = fits_bytes(pipeline.estimate_all(straight, manifest), tmp_path / "b.json")
    assert a == b


def test_synthetic_provider_never_fails_to_parse(tmp_path):
    manifest, store = start(tmp_path, config="smoke")
    summary = pipeline.execute(manifest, pipeline.respondent_for(manifest), store)
    assert summary.parse_failures == 0 and summary.new_records == 32


def test_injected_parse_failures_are_counted_exactly(tmp_path):
    manifest, store = start(tmp_path)
    summary = pipeline.execute(manifest, Garbling(manifest.provider.synthetic_rule), store)
    expected = sum(1 for _, _, d in manifest.planned_keys() if d % 10 == 0)
    assert summary.parse_failures == expected == manifest.planned_requests() // 10
    assert summary.failure_kinds == {"malformed_structure": expected}
    assert sum(not r.ok for r in store.records()) == expected


def test_reask_retries_unparseable_answers(tmp_path):
    class FlakyOnce:
        def __init__(self, rule):
            self.inner, self.seen = SyntheticRespondent(rule), set()

        def answer(self, prompt, cs, draw):
            key = (prompt.cell, cs.index, draw)
            if key not in self.seen:
                self.seen.add(key)
                return Answer("no", "flaky", 0.0, 0)
            return self.inner.answer(prompt, cs, draw)

    manifest, store = start(tmp_path)
    summary = pipeline.execute(manifest, FlakyOnce(manifest.provider.synthetic_rule), store, reask=1)
    assert summary.parse_failures == 0
    assert all(r.provider_metadata["reasks"] == 1 for r in store.records())


def test_unparseable_cell_is_excluded(tmp_path):
    manifest, store = start(tmp_path)
    bad = manifest.cells()[0]
    pipeline.execute(manifest, Garbling(manifest.provider.synthetic_rule, bad_cell=bad), store)
    log = []
    fits = pipeline.estimate_all(store, manifest, exclusion_log=log)
    assert bad not in fits and len(fits) == 3
    assert [e["cell"] for e in log] == [bad.key()]


def test_request_errors_leave_keys_open(tmp_path, monkeypatch):
    import httpx

    monkeypatch.setenv("LLMVOT_TEST_KEY", "k")
    config = dict(SMALL, provider={"kind": "remote", "model_name": "stub", "api_key_env": "LLMVOT_TEST_KEY",
                                   "endpoint_url": "http://stub.local/v1", "max_retries": 0})
    manifest, store = start(tmp_path, config=config)
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    summary = pipeline.execute(manifest, RemoteRespondent(manifest.provider, client=client), store, limit=5)
    assert summary.request_errors == 5 and summary.new_records == 0
    assert len(store.errors()) == 5 and store.keys() == set()
    assert store.errors()[0]["category"] == "transport"


def test_torn_trailing_line_is_skipped_and_repaired(tmp_path):
    manifest, store = start(tmp_path)
    pipeline.execute(manifest, pipeline.respondent_for(manifest), store, limit=10)
    with open(store.path, "a", encoding="utf-8") as fh:
        fh.write('{"run_id": "r1", "cell": "ratio')
    assert len(list(store.records())) == 10
    pipeline.execute(manifest, pipeline.respondent_for(manifest), store, limit=5)
    assert len(list(store.records())) == 15


def test_unknown_cell_in_store_is_data_integrity_error(tmp_path):
    manifest, store = start(tmp_path)
    pipeline.execute(manifest, pipeline.respondent_for(manifest), store, limit=1)
    line = json.loads(store.path.read_text().splitlines()[0])
    line["cell"] = "mystery|business|15|female|20s|high_school"
    with open(store.path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(line) + "\n")
    with pytest.raises(DataIntegrityError):
        pipeline.estimate_all(store, manifest)


def test_no_network_forces_synthetic(monkeypatch):
    manifest = pipeline.plan_run("full-study")
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    with pytest.raises(ConfigurationError):
        pipeline.respondent_for(manifest)
    monkeypatch.setenv("NO_NETWORK", "1")
    assert isinstance(pipeline.respondent_for(manifest), SyntheticRespondent)


def test_fits_round_trip(tmp_path):
    manifest, store = start(tmp_path)
    pipeline.execute(manifest, pipeline.respondent_for(manifest), store)
    fits = pipeline.estimate_all(store, manifest)
    path = pipeline.save_fits(fits, tmp_path / "fits.json", [{"cell": "c", "reason": "r"}])
    again, excl = pipeline.load_fits(path)
    assert excl == [{"cell": "c", "reason": "r"}]
    assert {c.key(): f.to_dict() for c, f in again.items()} == {c.key(): f.to_dict() for c, f in fits.items()}


# --- statistical behaviour of a full synthetic store -------------------------

@pytest.fixture(scope="module")
def base_rule_run(tmp_path_factory):
    """128 cells at the base coefficients (VOT 10 USD/h everywhere), 120 rankings per cell."""
    root = tmp_path_factory.mktemp("base")
    config = {"grid": {"package_label": ["ratio-29.1"]}, "responses_per_cell_per_set": 60,
              "provider": {"kind": "synthetic"}, "seed": 3}
    manifest, store = start(root, config=config, run_id="base")
    pipeline.execute(manifest, pipeline.respondent_for(manifest), store)
    return manifest, store, pipeline.estimate_all(store, manifest)


def test_per_cell_vot_tracks_the_rule(base_rule_run):
    manifest, _, fits = base_rule_run
    rule = manifest.provider.synthetic_rule
    assert len(fits) == 128
    errors = np.array([abs(f.vot - rule.vot(c)) / rule.vot(c) for c, f in fits.items()])
    # A single cell at 120 rankings lands within 15% about 98% of the time
    # (Monte Carlo over 2,000 replicates), so almost every cell should.
    assert np.mean(errors <= 0.15) >= 0.95
    assert np.median(errors) < 0.08


def test_vot_tracks_the_rule_across_contexts(setting_run):
    manifest, _, summary, fits = setting_run
    rule = manifest.provider.synthetic_rule
    assert summary.parse_failures == 0 and len(fits) == 128
    errors = np.array([abs(f.vot - rule.vot(c)) / rule.vot(c) for c, f in fits.items()])
    assert np.mean(errors <= 0.15) >= 0.95


def test_sex_has_no_effect_under_sex_blind_rule(base_rule_run, base_package):
    from llmvot.estimator import RankingObservation, fit

    _, _, fits = base_rule_run
    female = ScenarioCell("ratio-29.1", "commute", 35, "female", "50s", "high_school")
    male = ScenarioCell("ratio-29.1", "commute", 35, "male", "50s", "high_school")
    observed = fits[male].vot - fits[female].vot

    def replicate_vot(cell, seed):
        rule = SyntheticRule(noise_seed=seed)
        obs = []
        for s in (1, 2):
            cs = base_package.choice_set(s)
            for d in range(60):
                order = parse_response(synthetic_answer(cell, cs, rule, d)).order
                obs.append(RankingObservation(cs.attribute_matrix(), order))
        return fit(obs).vot

    diffs = [replicate_vot(male, 1000 + k) - replicate_vot(female, 1000 + k) for k in range(40)]
    sigma = float(np.std(diffs, ddof=1))
    assert abs(observed) <= 3 * sigma
    assert abs(np.mean(diffs)) <= 3 * sigma / np.sqrt(len(diffs))


def test_estimate_all_is_pure(base_rule_run, tmp_path):
    manifest, store, fits = base_rule_run
    again = pipeline.estimate_all(store, manifest)
    assert fits_bytes(fits, tmp_path / "a.json") == fits_bytes(again, tmp_path / "b.json")
    digest = hashlib.sha256(store.path.read_bytes()).hexdigest()
    pipeline.estimate_all(store, manifest)
    assert hashlib.sha256(store.path.read_bytes()).hexdigest() == digest
