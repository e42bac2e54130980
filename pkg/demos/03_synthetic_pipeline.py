"""
A full synthetic experiment
===========================

The pipeline renders one prompt per (context, choice set, draw), collects
answers, parses the rankings, fits one model per context and regresses
log VOT on log income and the context dummies.  With a synthetic respondent
whose VOT grows in proportion to income, the income elasticity should come
out close to one.

Everything is written under a temporary directory; pass a real path to keep
the run.
"""

import tempfile

from llmvot import pipeline
from llmvot.analysis import analyze, export_report

root = tempfile.mkdtemp(prefix="llmvot-demo-")

# A smaller version of the built-in synthetic-setting config: one package,
# 128 contexts, 20 answers per choice set.
config = pipeline.load_config("synthetic-setting")
config["responses_per_cell_per_set"] = 20
manifest = pipeline.plan_run(config, run_id="demo")
pipeline.save_manifest(manifest, root)
print(manifest.grid.size(), "contexts,", manifest.planned_requests(), "requests")

# What a respondent sees for the first context.
from llmvot.design import package_registry
from llmvot.survey import render_prompt

cell = manifest.cells()[0]
print(render_prompt(cell, package_registry()[cell.package_label].choice_set(1)).text[:400], "...")

# Collect answers.  Stopping early and calling execute again resumes the run.
store = pipeline.ResponseStore(pipeline.run_dir(root, "demo"))
respondent = pipeline.respondent_for(manifest)
pipeline.execute(manifest, respondent, store, limit=1000)
summary = pipeline.execute(manifest, respondent, store)
print("resumed with", summary.already_present, "answers already stored; complete:", summary.complete)

fits = pipeline.estimate_all(store, manifest, min_rankings=30)
results = analyze(fits)
for e in results.elasticities:
    print(f"{e.purpose_scope:9s} elasticity {e.value:.3f}  95% CI [{e.ci_low:.3f}, {e.ci_high:.3f}]")

written = export_report(results, f"{root}/demo/report")
print("report files:", ", ".join(sorted(p.name for p in written.values())))
