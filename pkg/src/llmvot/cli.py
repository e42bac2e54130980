"""Command line entry point: ``llmvot <subcommand> [flags]``.

Failures print one line ``error: <category>: <message>`` on stderr and exit
with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis, design, estimator, pipeline
from .errors import ConfigurationError, VotError

logger = logging.getLogger("llmvot")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file path or built-in name "
                        f"({', '.join(pipeline.builtin_configs())})")
    common.add_argument("--provider", choices=("synthetic", "remote"), help="override the config's provider kind")
    common.add_argument("--resume", "--run", dest="run_id", metavar="RUN_ID", help="existing run id")
    common.add_argument("--out", default="runs", help="runs root directory (design: output directory)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="llmvot", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("design", parents=[common], help="print packages, trade-off ratios and grid size")
    run = sub.add_parser("run", parents=[common], help="plan and execute a run (or resume one)")
    run.add_argument("--limit", type=int, help="stop after this many new responses")
    sub.add_parser("estimate", parents=[common], help="fit every cell of a run -> fits.json")
    sub.add_parser("analyze", parents=[common], help="regressions, elasticities and curves")
    sub.add_parser("report", parents=[common], help="write the report bundle")
    sub.add_parser("selftest", parents=[common], help="run the estimator oracle checks")
    return p


def _require_run(args) -> str:
    if not args.run_id:
        raise ConfigurationError("this subcommand needs --resume/--run RUN_ID")
    return args.run_id


def cmd_design(args) -> int:
    packages = design.choice_setting_packages()
    for pkg in packages:
        ratios = {s: design.average_tradeoff_ratio(pkg, s) for s in design.TRADEOFF_SCHEMES}
        print(f"{pkg.label:16s} declared {pkg.declared_ratio:5.1f} USD/h   "
              + "  ".join(f"{s}={v:.2f}" for s, v in ratios.items()))
    grid = design.FactorGrid.full()
    print(f"full factorial grid: {grid.size()} cells")
    if args.out and args.out != "runs":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "packages.json").write_text(
            json.dumps([p.to_dict() for p in packages], indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "grid.json").write_text(json.dumps(grid.to_dict(), indent=2) + "\n", encoding="utf-8")
        print(f"wrote {out / 'packages.json'} and {out / 'grid.json'}")
    return 0


def cmd_run(args) -> int:
    root = Path(args.out)
    if args.run_id:
        manifest = pipeline.load_manifest(root, args.run_id)
    else:
        if not args.config:
            raise ConfigurationError("run needs --config (or --resume RUN_ID)")
        manifest = pipeline.plan_run(args.config, seed=args.seed, provider_kind=args.provider)
        pipeline.save_manifest(manifest, root)
    store = pipeline.ResponseStore(pipeline.run_dir(root, manifest.run_id))
    respondent = pipeline.respondent_for(manifest)
    summary = pipeline.execute(manifest, respondent, store, limit=args.limit)
    print(json.dumps({
        "run_id": manifest.run_id,
        "planned": summary.planned,
        "already_present": summary.already_present,
        "new_records": summary.new_records,
        "parse_failures": summary.parse_failures,
        "request_errors": summary.request_errors,
        "complete": summary.complete,
    }))
    return 0


def cmd_estimate(args) -> int:
    root = Path(args.out)
    run_id = _require_run(args)
    manifest = pipeline.load_manifest(root, run_id)
    store = pipeline.ResponseStore(pipeline.run_dir(root, run_id))
    exclusions: list = []
    fits = pipeline.estimate_all(store, manifest, exclusion_log=exclusions)
    path = pipeline.save_fits(fits, pipeline.run_dir(root, run_id) / "fits.json", exclusions)
    print(json.dumps({"run_id": run_id, "fitted_cells": len(fits), "excluded": len(exclusions),
                      "fits": str(path)}))
    return 0


def _analysis(root: Path, run_id: str):
    manifest = pipeline.load_manifest(root, run_id)
    fits_path = pipeline.run_dir(root, run_id) / "fits.json"
    if not fits_path.is_file():
        raise ConfigurationError(f"{fits_path} missing; run `llmvot estimate --run {run_id}` first")
    fits, exclusions = pipeline.load_fits(fits_path)
    store = pipeline.ResponseStore(pipeline.run_dir(root, run_id))
    meta = {
        "run_id": run_id,
        "template_version": manifest.template_version,
        "provider": {k: v for k, v in manifest.provider.to_dict().items() if k != "api_key_env"},
        "rng_seed": manifest.rng_seed,
        "responses_per_cell_per_set": manifest.responses_per_cell_per_set,
        "created_at": manifest.created_at,
        "n_request_errors": len(store.errors()),
    }
    results = analysis.analyze(fits, metadata=meta)
    results.exclusions[:0] = exclusions
    return results


def cmd_analyze(args) -> int:
    root = Path(args.out)
    run_id = _require_run(args)
    results = _analysis(root, run_id)
    d = pipeline.run_dir(root, run_id)
    doc = {
        "regressions": {k: r.to_dict() for k, r in results.regressions.items()},
        "elasticities": [asdict(e) for e in results.elasticities],
        "problems": results.problems,
    }
    (d / "analysis.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rows = [[e.package_label, e.purpose_scope, analysis._num(e.value), analysis._num(e.std_error),
             analysis._num(e.ci_low), analysis._num(e.ci_high), e.n] for e in results.elasticities]
    analysis._write_csv(d / "elasticities.csv",
                        ["package", "purpose_scope", "elasticity", "std_error", "ci_low", "ci_high", "n"], rows)
    for e in results.elasticities:
        print(f"{e.package_label:16s} {e.purpose_scope:9s} elasticity {e.value:7.3f} "
              f"[{e.ci_low:7.3f}, {e.ci_high:7.3f}] n={e.n}")
    for problem in results.problems:
        print(f"warning: {problem}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    root = Path(args.out)
    run_id = _require_run(args)
    results = _analysis(root, run_id)
    written = analysis.export_report(results, pipeline.run_dir(root, run_id) / "report")
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def selftest(n_rankings: int = 1000, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Quick oracle checks; returns (name, passed, detail) triples."""
    import itertools

    from .respondents import sample_plackett_luce

    rng = np.random.default_rng(seed)
    out = []

    worst = 0.0
    for n_alt in (3, 4):
        for _ in range(5):
            beta = rng.normal(size=3)
            attrs = rng.normal(size=(n_alt, 3))
            total = sum(
                estimator.ranking_probability(beta, estimator.RankingObservation(attrs, perm))
                for perm in itertools.permutations(range(1, n_alt + 1))
            )
            worst = max(worst, abs(total - 1))
    out.append(("permutation-sum", worst < 1e-10, f"max |sum - 1| = {worst:.2e}"))

    data = [estimator.RankingObservation(rng.normal(size=(13, 3)), rng.permutation(13) + 1) for _ in range(50)]
    worst = 0.0
    for _ in range(5):
        beta = rng.normal(scale=0.5, size=3)
        g = estimator.gradient(beta, data)
        fd = np.zeros(3)
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1e-5
            fd[j] = (estimator.log_likelihood(beta + e, data) - estimator.log_likelihood(beta - e, data)) / 2e-5
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8))))
    out.append(("gradient-check", worst < 1e-6, f"max relative error = {worst:.2e}"))

    pkg = design.builtin_packages()[1]
    truth = np.array([-0.30, -0.05, -0.50])
    obs = []
    for i in range(n_rankings):
        cs = pkg.choice_set(1 + i % 2)
        x = np.asarray(cs.attribute_matrix())
        obs.append(estimator.RankingObservation(x, sample_plackett_luce(x @ truth, rng)))
    result = estimator.fit(obs)
    z = np.abs(result.beta_hat.as_array() - truth) / np.asarray(result.std_errors)
    ok = result.converged and bool(np.all(z < 3.5)) and result.vot is not None and abs(result.vot - 10) < 1.0
    out.append(("parameter-recovery", ok, f"beta_hat={np.round(result.beta_hat.as_array(), 4).tolist()} "
                f"vot={result.vot:.3f} max z={float(np.max(z)):.2f}"))
    return out


def cmd_selftest(args) -> int:
    t0 = time.perf_counter()
    checks = selftest(seed=args.seed or 0)
    for name, passed, detail in checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    print(f"selftest finished in {time.perf_counter() - t0:.1f}s")
    return 0 if all(p for _, p, _ in checks) else 1


COMMANDS = {
    "design": cmd_design,
    "run": cmd_run,
    "estimate": cmd_estimate,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except VotError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
