"""Correlation and agreement statistics for metric meta-evaluation.

Kendall's tau is the tau-b variant (tie corrected; unit-count scores tie
often).  Summary-level correlation averages per-example cross-system tau,
skipping examples whose gold scores are fully tied.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .errors import InputError, UndefinedStatisticError


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """Tie-corrected rank correlation in [-1, 1]."""
    if len(x) != len(y):
        raise InputError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise InputError("kendall_tau_b needs at least 2 observations")
    concordant = discordant = tied_x = tied_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = (x[i] > x[j]) - (x[i] < x[j])
            dy = (y[i] > y[j]) - (y[i] < y[j])
            if dx == 0:
                tied_x += 1
            if dy == 0:
                tied_y += 1
            if dx != 0 and dy != 0:
                if dx == dy:
                    concordant += 1
                else:
                    discordant += 1
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - tied_x) * (n0 - tied_y))
    if denom == 0:
        raise UndefinedStatisticError("kendall_tau_b undefined: a series is fully tied")
    return (concordant - discordant) / denom


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation."""
    if len(x) != len(y):
        raise InputError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise InputError("pearson needs at least 2 observations")
    # constant series are detected structurally; computed variance of an
    # all-identical series can be a nonzero rounding residue
    if len(set(x)) <= 1 or len(set(y)) <= 1:
        raise UndefinedStatisticError("pearson undefined: zero variance")
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    cov = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    var_x = math.fsum((a - mx) ** 2 for a in x)
    var_y = math.fsum((b - my) ** 2 for b in y)
    if var_x == 0 or var_y == 0:
        raise UndefinedStatisticError("pearson undefined: zero variance")
    return cov / math.sqrt(var_x * var_y)


def krippendorff_alpha_binary(ratings: Sequence[Sequence[Hashable]]) -> float:
    """Inter-rater agreement for nominal labels, via coincidence counts.

    ``ratings`` holds one entry per item, each a list of labels from the
    raters who saw it; items with fewer than two labels are excluded.  When
    expected disagreement is zero (all pairable labels identical) the value
    is 1.0 by convention, with a warning.
    """
    pairable = [list(item) for item in ratings if len(item) >= 2]
    if len(ratings) < 2:
        raise InputError("krippendorff_alpha_binary needs at least 2 items")
    n = sum(len(item) for item in pairable)
    if n < 2:
        raise InputError("krippendorff_alpha_binary needs at least 2 pairable values")

    # coincidence counts: each ordered pair within an item contributes
    # 1/(m_u - 1), so every item contributes m_u values in total; exact
    # rational arithmetic keeps hand-checkable cases exact (e.g. 0.6)
    observed = Fraction(0)
    totals: dict[Hashable, int] = {}
    for item in pairable:
        m = len(item)
        for i, a in enumerate(item):
            totals[a] = totals.get(a, 0) + 1
            for j, b in enumerate(item):
                if i != j and a != b:
                    observed += Fraction(1, m - 1)
    d_o = observed / n
    d_e = Fraction(sum(totals[a] * totals[b]
                       for a in totals for b in totals if a != b), n * (n - 1))
    if d_e == 0:
        warnings.warn("expected disagreement is zero; alpha defined as 1.0",
                      stacklevel=2)
        return 1.0
    return float(1 - d_o / d_e)


@dataclass(frozen=True)
class MetricMatrix:
    """Per-(system, example) scores for one metric; no missing cells."""

    systems: tuple[str, ...]
    examples: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]  # rows follow systems, columns examples
    metric_name: str = ""

    def __post_init__(self):
        if len(self.values) != len(self.systems):
            raise InputError(f"{self.metric_name or 'metric'}: row count does not match systems")
        for system, row in zip(self.systems, self.values):
            if len(row) != len(self.examples):
                raise InputError(f"{self.metric_name or 'metric'}: row {system!r} has wrong length")

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, float]],
                     metric_name: str = "") -> "MetricMatrix":
        """Build a matrix from (system_id, example_id, value) triples."""
        cells: dict[tuple[str, str], float] = {}
        for system_id, example_id, value in records:
            key = (system_id, example_id)
            if key in cells:
                raise InputError(f"duplicate cell for {key!r}")
            cells[key] = float(value)
        systems = tuple(sorted({s for s, _ in cells}))
        examples = tuple(sorted({e for _, e in cells}))
        missing = [(s, e) for s in systems for e in examples if (s, e) not in cells]
        if missing:
            raise InputError(f"missing cells: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        values = tuple(tuple(cells[(s, e)] for e in examples) for s in systems)
        return cls(systems, examples, values, metric_name)

    @classmethod
    def from_file(cls, path: str | Path, metric_name: str = "") -> "MetricMatrix":
        """Read tab-separated ``system_id<TAB>example_id<TAB>value`` rows."""
        path = Path(path)
        if not path.exists():
            raise InputError(f"no such file: {path}")
        triples = []
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise InputError(f"{path}:{lineno}: expected 3 tab-separated fields")
                try:
                    triples.append((parts[0], parts[1], float(parts[2])))
                except ValueError as exc:
                    raise InputError(f"{path}:{lineno}: bad value ({exc})") from exc
        return cls.from_records(triples, metric_name or path.stem)

    def value(self, system_id: str, example_id: str) -> float:
        return self.values[self.systems.index(system_id)][self.examples.index(example_id)]

    def system_means(self) -> dict[str, float]:
        return {s: math.fsum(row) / len(row)
                for s, row in zip(self.systems, self.values)}

    def restrict_systems(self, keep: Sequence[str]) -> "MetricMatrix":
        keep_set = set(keep)
        unknown = keep_set - set(self.systems)
        if unknown:
            raise InputError(f"unknown systems: {sorted(unknown)}")
        rows = [(s, row) for s, row in zip(self.systems, self.values) if s in keep_set]
        return MetricMatrix(tuple(s for s, _ in rows), self.examples,
                            tuple(row for _, row in rows), self.metric_name)


@dataclass(frozen=True)
class SystemGroup:
    name: str
    systems: tuple[str, ...]


def standard_groups(ft_systems: Sequence[str], llm_systems: Sequence[str]) -> list[SystemGroup]:
    ft = tuple(ft_systems)
    llm = tuple(llm_systems)
    return [SystemGroup("FT", ft), SystemGroup("LLM", llm),
            SystemGroup("All", ft + llm)]


def _aligned(metric: MetricMatrix, gold: MetricMatrix) -> None:
    if set(metric.systems) != set(gold.systems) or set(metric.examples) != set(gold.examples):
        raise InputError("metric and gold matrices cover different systems or examples")


def system_level_corr(metric: MetricMatrix, gold: MetricMatrix) -> float:
    """Kendall tau-b between per-system means of the two matrices."""
    _aligned(metric, gold)
    metric_means = metric.system_means()
    gold_means = gold.system_means()
    systems = sorted(metric_means)
    return kendall_tau_b([metric_means[s] for s in systems],
                         [gold_means[s] for s in systems])


def summary_level_corr(metric: MetricMatrix, gold: MetricMatrix,
                       return_counts: bool = False):
    """Mean per-example cross-system tau-b.

    Examples whose gold values are fully tied (or where tau is otherwise
    undefined) are skipped; the skipped count is available via
    ``return_counts``.  Raises when every example is skipped.
    """
    _aligned(metric, gold)
    systems = sorted(metric.systems)
    taus = []
    skipped = 0
    for example in metric.examples:
        mv = [metric.value(s, example) for s in systems]
        gv = [gold.value(s, example) for s in systems]
        if len(systems) < 2 or len(set(gv)) == 1:
            skipped += 1
            continue
        try:
            taus.append(kendall_tau_b(mv, gv))
        except UndefinedStatisticError:
            skipped += 1
    if not taus:
        raise UndefinedStatisticError("summary-level correlation: all examples skipped")
    value = math.fsum(taus) / len(taus)
    if return_counts:
        return value, len(taus), skipped
    return value


@dataclass(frozen=True)
class ReportCell:
    group: str
    level: str  # "system" | "summary"
    value: float | None  # None when the statistic is undefined


@dataclass
class CorrelationReport:
    groups: tuple[str, ...]
    rows: dict[str, list[ReportCell]] = field(default_factory=dict)

    def render(self) -> str:
        """Tab-separated table, 3 decimals, em dash for undefined cells."""
        header = ["metric"]
        for g in self.groups:
            header += [f"{g}:system", f"{g}:summary"]
        lines = ["\t".join(header)]
        for metric_name, cells in self.rows.items():
            by_key = {(c.group, c.level): c.value for c in cells}
            row = [metric_name]
            for g in self.groups:
                for level in ("system", "summary"):
                    v = by_key.get((g, level))
                    row.append("—" if v is None else f"{v:.3f}")
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"


def correlation_report(metrics: Sequence[MetricMatrix], gold: MetricMatrix,
                       groups: Sequence[SystemGroup]) -> CorrelationReport:
    """System- and summary-level correlations of each metric against gold.

    Rows are metrics, columns are group x {system, summary}.  Cells where
    the statistic is undefined are reported as missing rather than failing
    the whole report.
    """
    report = CorrelationReport(tuple(g.name for g in groups))
    for metric in metrics:
        cells = []
        for group in groups:
            metric_g = metric.restrict_systems(group.systems)
            gold_g = gold.restrict_systems(group.systems)
            for level, fn in (("system", system_level_corr),
                              ("summary", summary_level_corr)):
                try:
                    value = fn(metric_g, gold_g)
                except UndefinedStatisticError:
                    value = None
                cells.append(ReportCell(group.name, level, value))
        report.rows[metric.metric_name or "metric"] = cells
    return report
