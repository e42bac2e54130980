"""Income-elasticity regressions, VOT-income curves and report files.

Regressions are run at the cell level: one row per scenario cell whose
ranking model converged with a positive VOT.  The pooled model regresses
``ln VOT`` on ``ln income`` plus sex, age, education and purpose dummies
(references: female, 20s, bachelor's or higher, business); the per-purpose
model drops the purpose dummies and is fitted on each purpose separately.
The coefficient on ``ln income`` is the income elasticity of the VOT.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, stats

from .design import FACTOR_NAMES, PURPOSES, FACTOR_LEVELS, ScenarioCell
from .errors import InvalidArgumentError, RankDeficientError
from .estimator import FitResult

logger = logging.getLogger(__name__)

POOLED_COLUMNS = ("intercept", "ln_income", "male", "age50s", "highschool", "commute", "leisure", "personal")
DEMOGRAPHIC_COLUMNS = POOLED_COLUMNS[:5]
SPECS = {"pooled": POOLED_COLUMNS, "demographics_only": DEMOGRAPHIC_COLUMNS}

TERM_LABELS = {
    "intercept": "Intercept",
    "ln_income": "Natural log of income",
    "male": "Male (ref: female)",
    "age50s": "50s (ref: 20s)",
    "highschool": "High school (ref: bachelor's)",
    "commute": "Commuting (ref: business)",
    "leisure": "Leisure travel (ref: business)",
    "personal": "Personal travel (ref: business)",
}

GROUP_FACTORS = {
    "package": "package_label",
    "purpose": "purpose",
    "sex": "sex",
    "age": "age_band",
    "education": "education",
}


@dataclass(frozen=True)
class RegressionRow:
    ln_vot: float
    ln_income: float
    male: int
    age50s: int
    highschool: int
    commute: int
    leisure: int
    personal: int
    package_label: str
    purpose: str = ""

    def __post_init__(self):
        if self.commute + self.leisure + self.personal > 1:
            raise InvalidArgumentError("at most one purpose dummy may be set")

    @classmethod
    def from_cell(cls, cell: ScenarioCell, vot: float) -> "RegressionRow":
        return cls(
            ln_vot=math.log(vot),
            ln_income=math.log(cell.income),
            male=int(cell.sex == "male"),
            age50s=int(cell.age_band == "50s"),
            highschool=int(cell.education == "high_school"),
            commute=int(cell.purpose == "commute"),
            leisure=int(cell.purpose == "leisure"),
            personal=int(cell.purpose == "personal"),
            package_label=cell.package_label,
            purpose=cell.purpose,
        )

    def regressors(self, columns: Sequence[str]) -> list[float]:
        return [1.0 if c == "intercept" else float(getattr(self, c)) for c in columns]


def assemble_rows(
    fits: Mapping[ScenarioCell, FitResult],
    package_label: str,
    exclusion_log: list | None = None,
) -> list[RegressionRow]:
    """One regression row per usable cell of a single choice setting.

    Cells that did not converge or have no positive VOT are skipped; each skip
    is logged and, when ``exclusion_log`` is given, appended to it.
    """
    labels = {cell.package_label for cell in fits}
    if labels - {package_label}:
        raise InvalidArgumentError(
            f"fits mix package labels {sorted(labels)}; expected only {package_label!r}"
        )
    rows = []
    for cell in sorted(fits, key=_cell_sort_key):
        result = fits[cell]
        reason = None
        if not result.converged:
            reason = f"not converged ({result.status})"
        elif result.vot is None:
            reason = "VOT undefined (cost coefficient ~ 0)"
        elif not result.vot > 0:
            reason = f"non-positive VOT {result.vot:.4g}"
        if reason:
            logger.warning("excluding cell %s: %s", cell.key(), reason)
            if exclusion_log is not None:
                exclusion_log.append({"cell": cell.key(), "reason": reason})
            continue
        rows.append(RegressionRow.from_cell(cell, result.vot))
    return rows


def _cell_sort_key(cell: ScenarioCell):
    return tuple(FACTOR_LEVELS[name].index(getattr(cell, name)) for name in FACTOR_NAMES)


@dataclass
class RegressionResult:
    spec: str
    names: tuple[str, ...]
    coefficients: np.ndarray
    std_errors: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    r_squared: float
    adj_r_squared: float
    f_statistic: float
    f_df: tuple[int, int]
    f_pvalue: float
    n: int
    residuals: np.ndarray = field(repr=False)
    cov_type: str = "classical"

    @property
    def df_resid(self) -> int:
        return self.n - len(self.names)

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def se(self, name: str) -> float:
        return float(self.std_errors[self.names.index(name)])

    def conf_int(self, name: str, level: float = 0.95) -> tuple[float, float]:
        q = stats.t.ppf(0.5 + level / 2, self.df_resid)
        b, s = self.coef(name), self.se(name)
        return b - q * s, b + q * s

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "cov_type": self.cov_type,
            "n": self.n,
            "terms": {
                name: {
                    "estimate": float(self.coefficients[i]),
                    "std_error": float(self.std_errors[i]),
                    "t": float(self.t_stats[i]),
                    "p": float(self.p_values[i]),
                }
                for i, name in enumerate(self.names)
            },
            "r_squared": self.r_squared,
            "adj_r_squared": self.adj_r_squared,
            "f_statistic": self.f_statistic,
            "f_df": list(self.f_df),
            "f_pvalue": self.f_pvalue,
        }


def significance_stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def ols(X: np.ndarray, y: np.ndarray, names: Sequence[str], spec: str = "custom",
        cov_type: str = "classical") -> RegressionResult:
    """Least squares through a column-pivoted QR factorisation.

    The first column of ``X`` is assumed to be the intercept for R^2 and the
    overall F test.  ``cov_type`` is ``"classical"`` or ``"hc1"``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n <= k:
        raise InvalidArgumentError(f"need more observations than coefficients (n={n}, k={k})")
    if cov_type not in ("classical", "hc1"):
        raise InvalidArgumentError(f"unknown cov_type {cov_type!r}")
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > 1e-10 * max(diag[0], 1.0)))
    if rank < k:
        # every column with weight in a null-space direction takes part in a dependency
        _, _, vt = linalg.svd(X, full_matrices=False)
        null = vt[rank:]
        bad = [names[j] for j in range(k) if np.max(np.abs(null[:, j])) > 1e-8]
        raise RankDeficientError(f"design matrix is rank deficient; collinear column(s): {bad}", columns=bad)
    z = linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty(k)
    beta[piv] = z
    Rinv = linalg.solve_triangular(R, np.eye(k))
    xtx_inv_p = Rinv @ Rinv.T
    xtx_inv = np.empty_like(xtx_inv_p)
    xtx_inv[np.ix_(piv, piv)] = xtx_inv_p

    resid = y - X @ beta
    ssr = float(resid @ resid)
    df2 = n - k
    if cov_type == "classical":
        cov = xtx_inv * (ssr / df2)
    else:
        meat = (X * resid[:, None] ** 2).T @ X
        cov = xtx_inv @ meat @ xtx_inv * (n / df2)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = beta / se
    p = 2 * stats.t.sf(np.abs(t), df2)

    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ssr / sst if sst > 0 else float("nan")
    adj = 1.0 - (1.0 - r2) * (n - 1) / df2
    df1 = k - 1
    if df1 > 0 and ssr > 0:
        f = ((sst - ssr) / df1) / (ssr / df2)
        f_p = float(stats.f.sf(f, df1, df2))
    else:
        f, f_p = float("inf"), 0.0
    return RegressionResult(spec, tuple(names), beta, se, t, p, r2, adj, float(f), (df1, df2), f_p, n, resid, cov_type)


def design_matrix(rows: Sequence[RegressionRow], spec: str):
    if spec not in SPECS:
        raise InvalidArgumentError(f"unknown regression spec {spec!r}")
    columns = SPECS[spec]
    X = np.array([r.regressors(columns) for r in rows], dtype=float).reshape(len(rows), len(columns))
    y = np.array([r.ln_vot for r in rows], dtype=float)
    return X, y, columns


def ols_fit(rows: Sequence[RegressionRow], spec: str = "pooled", cov_type: str = "classical") -> RegressionResult:
    X, y, columns = design_matrix(rows, spec)
    return ols(X, y, columns, spec=spec, cov_type=cov_type)


@dataclass(frozen=True)
class ElasticityEstimate:
    value: float
    ci_low: float
    ci_high: float
    purpose_scope: str
    package_label: str
    std_error: float = float("nan")
    n: int = 0


def _estimate(result: RegressionResult, scope: str, label: str) -> ElasticityEstimate:
    lo, hi = result.conf_int("ln_income")
    return ElasticityEstimate(result.coef("ln_income"), lo, hi, scope, label, result.se("ln_income"), result.n)


def elasticities(
    fits_by_package: Mapping[str, Mapping[ScenarioCell, FitResult]],
    scope: str = "pooled",
    cov_type: str = "classical",
) -> list[ElasticityEstimate]:
    """Income elasticities per package: pooled over purposes or one per purpose."""
    if scope not in ("pooled", "per_purpose"):
        raise InvalidArgumentError(f"scope must be 'pooled' or 'per_purpose', got {scope!r}")
    out = []
    for label, fits in fits_by_package.items():
        rows = assemble_rows(fits, label)
        if scope == "pooled":
            out.append(_estimate(ols_fit(rows, "pooled", cov_type), "pooled", label))
            continue
        for purpose in PURPOSES:
            subset = [r for r in rows if r.purpose == purpose]
            if not subset:
                continue
            out.append(_estimate(ols_fit(subset, "demographics_only", cov_type), purpose, label))
    return out


@dataclass(frozen=True)
class VotCurve:
    group_key: tuple[str, object]
    points: tuple[tuple[float, float, int], ...]
    package_label: str | None = None


def _usable(result: FitResult) -> bool:
    return result.converged and result.vot is not None


def vot_income_curves(fits: Mapping[ScenarioCell, FitResult], group_factor: str,
                      package_label: str | None = None) -> list[VotCurve]:
    """Mean VOT at each income level, one curve per level of ``group_factor``."""
    if group_factor not in GROUP_FACTORS:
        raise InvalidArgumentError(f"unknown group factor {group_factor!r}; choose from {sorted(GROUP_FACTORS)}")
    if not fits:
        raise InvalidArgumentError("no fits to summarise")
    attr = GROUP_FACTORS[group_factor]
    sums: dict = {}
    for cell, result in fits.items():
        if not _usable(result):
            continue
        acc = sums.setdefault(getattr(cell, attr), {}).setdefault(cell.income, [0.0, 0])
        acc[0] += result.vot
        acc[1] += 1
    curves = []
    for level in FACTOR_LEVELS[attr]:
        if level not in sums:
            continue
        points = tuple(
            (float(income), sums[level][income][0] / sums[level][income][1], sums[level][income][1])
            for income in sorted(sums[level])
        )
        curves.append(VotCurve((group_factor, level), points, package_label))
    return curves


def income_table(fits: Mapping[ScenarioCell, FitResult]) -> list[tuple[float, float, float, int]]:
    """Rows of (income, mean VOT, VOT-income ratio, cells) over usable cells."""
    acc: dict[int, list] = {}
    for cell, result in fits.items():
        if _usable(result):
            a = acc.setdefault(cell.income, [0.0, 0])
            a[0] += result.vot
            a[1] += 1
    return [(float(inc), acc[inc][0] / acc[inc][1], acc[inc][0] / acc[inc][1] / inc, acc[inc][1])
            for inc in sorted(acc)]


def split_by_package(fits: Mapping[ScenarioCell, FitResult]) -> dict[str, dict[ScenarioCell, FitResult]]:
    out: dict[str, dict] = {}
    for cell in sorted(fits, key=_cell_sort_key):
        out.setdefault(cell.package_label, {})[cell] = fits[cell]
    return out


@dataclass
class AnalysisResults:
    fits: dict
    regressions: dict = field(default_factory=dict)
    elasticities: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    income_tables: dict = field(default_factory=dict)
    exclusions: list = field(default_factory=list)
    problems: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def analyze(fits: Mapping[ScenarioCell, FitResult], metadata: Mapping | None = None,
            cov_type: str = "classical") -> AnalysisResults:
    """Run every regression, elasticity and curve the report needs.

    A package whose regression cannot be fitted (too few rows, collinear
    design) is recorded in ``problems`` instead of aborting the analysis.
    """
    results = AnalysisResults(fits=dict(fits), metadata=dict(metadata or {}))
    by_package = split_by_package(fits)
    for label, pfits in by_package.items():
        rows = assemble_rows(pfits, label, results.exclusions)
        results.income_tables[label] = income_table(pfits)
        try:
            reg = ols_fit(rows, "pooled", cov_type)
            results.regressions[label] = reg
            results.elasticities.append(_estimate(reg, "pooled", label))
        except (InvalidArgumentError, RankDeficientError) as exc:
            results.problems.append(f"{label} pooled: {exc}")
            logger.warning("pooled regression for %s failed: %s", label, exc)
        for purpose in PURPOSES:
            subset = [r for r in rows if r.purpose == purpose]
            if not subset:
                continue
            try:
                reg = ols_fit(subset, "demographics_only", cov_type)
                results.elasticities.append(_estimate(reg, purpose, label))
            except (InvalidArgumentError, RankDeficientError) as exc:
                results.problems.append(f"{label} {purpose}: {exc}")
                logger.warning("%s regression for %s failed: %s", purpose, label, exc)
        for factor in ("purpose", "sex", "age", "education"):
            results.curves.setdefault(factor, []).extend(vot_income_curves(pfits, factor, package_label=label))
    if fits:
        results.curves["package"] = vot_income_curves(fits, "package")
    return results


def _num(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    return format(float(x), ".10g")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def render_income_table(table) -> str:
    lines = ["| Income (USD/h) | Average VOT (USD/h) | VOT-income ratio |", "|---|---|---|"]
    for income, vot, ratio, _ in table:
        lines.append(f"| {income:g} | {vot:.2f} | {ratio:.2f} |")
    return "\n".join(lines) + "\n"


def render_regression_table(regressions: Mapping[str, RegressionResult]) -> str:
    labels = list(regressions)
    lines = ["| Variable | " + " | ".join(labels) + " |", "|---" * (len(labels) + 1) + "|"]
    for name in POOLED_COLUMNS:
        cells = []
        for label in labels:
            r = regressions[label]
            i = r.names.index(name)
            cells.append(f"{r.coefficients[i]:.3f}{significance_stars(r.p_values[i])} ({r.std_errors[i]:.3f})")
        lines.append(f"| {TERM_LABELS[name]} | " + " | ".join(cells) + " |")
    lines.append("| R² | " + " | ".join(f"{regressions[l].r_squared:.3f}" for l in labels) + " |")
    lines.append("| Adjusted R² | " + " | ".join(f"{regressions[l].adj_r_squared:.3f}" for l in labels) + " |")
    lines.append("| Observations | " + " | ".join(str(regressions[l].n) for l in labels) + " |")
    lines.append("| F | " + " | ".join(
        f"F({regressions[l].f_df[0]},{regressions[l].f_df[1]}) = {regressions[l].f_statistic:.2f}"
        f"{significance_stars(regressions[l].f_pvalue)}" for l in labels) + " |")
    lines.append("")
    lines.append("Significance codes: ***p<0.01; **p<0.05; *p<0.1.")
    return "\n".join(lines) + "\n"


def export_report(results: AnalysisResults, output_dir) -> dict[str, Path]:
    """Write tables, curve series, elasticities and metadata under ``output_dir``.

    Returns a mapping from logical name to written path.  Contents depend only
    on ``results``, so identical inputs give byte-identical files.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"report directory {out} is not writable")
    written: dict[str, Path] = {}

    for label, table in results.income_tables.items():
        p = out / f"vot_by_income_{label}.csv"
        _write_csv(p, ["income", "mean_vot", "vot_income_ratio"],
                   [[_num(i), _num(v), _num(r)] for i, v, r, _ in table])
        written[f"vot_by_income_{label}"] = p
        md = out / f"vot_by_income_{label}.md"
        md.write_text(render_income_table(table), encoding="utf-8")
        written[f"vot_by_income_{label}_md"] = md

    if results.regressions:
        rows = []
        for label, reg in results.regressions.items():
            for i, name in enumerate(reg.names):
                rows.append([label, name, _num(reg.coefficients[i]), _num(reg.std_errors[i]),
                             _num(reg.t_stats[i]), _num(reg.p_values[i]), significance_stars(reg.p_values[i])])
            for stat, value in (("r_squared", reg.r_squared), ("adj_r_squared", reg.adj_r_squared),
                                ("observations", reg.n), ("f_statistic", reg.f_statistic),
                                ("f_pvalue", reg.f_pvalue)):
                rows.append([label, stat, _num(value), "", "", "", ""])
        p = out / "regressions.csv"
        _write_csv(p, ["package", "term", "estimate", "std_error", "t", "p", "stars"], rows)
        written["regressions"] = p
        md = out / "regressions.md"
        md.write_text(render_regression_table(results.regressions), encoding="utf-8")
        written["regressions_md"] = md

    for factor, curves in results.curves.items():
        rows = []
        for c in curves:
            label = c.package_label if c.package_label is not None else "*"
            for income, vot, count in c.points:
                rows.append([label, c.group_key[1], _num(income), _num(vot), count])
        p = out / f"curves_{factor}.csv"
        _write_csv(p, ["package", "level", "income", "mean_vot", "count"], rows)
        written[f"curves_{factor}"] = p

    p = out / "elasticities.csv"
    _write_csv(p, ["package", "purpose_scope", "elasticity", "std_error", "ci_low", "ci_high", "n"],
               [[e.package_label, e.purpose_scope, _num(e.value), _num(e.std_error), _num(e.ci_low),
                 _num(e.ci_high), e.n] for e in results.elasticities])
    written["elasticities"] = p

    if results.exclusions:
        p = out / "exclusions.csv"
        _write_csv(p, ["cell", "reason"], [[e["cell"], e["reason"]] for e in results.exclusions])
        written["exclusions"] = p

    meta = dict(results.metadata)
    meta["problems"] = list(results.problems)
    p = out / "metadata.json"
    p.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    written["metadata"] = p
    return written
