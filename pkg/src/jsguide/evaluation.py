"""Time-aware walk-forward evaluation, baselines, ablations and significance.

Folds are half-open date ranges ``[start, next_start)``; the last fold is
open-ended. A sample dated exactly on a boundary belongs to the later
fold. Each transition trains on fold ``i-1`` and tests on fold ``i``.

Undefined ratios (zero denominators) are reported as ``None`` and left
out of means; aggregates carry a count of how many were dropped.
"""

from __future__ import annotations

import datetime as dt
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import norm

from jsguide.catalog import FeatureCatalog, restrict_catalog
from jsguide.model import (
    GbdtModel,
    ModelError,
    TrainParams,
    feature_importance,
    fit,
    predict_score,
    select_top_fraction,
)
from jsguide.engines import Engine, SubprocessEngine
from jsguide.runner import EngineConfig
from jsguide.vectorize import Dataset, vectorize_input

METRICS = ("precision", "recall", "false_alarm")
DEFAULT_REPETITIONS = 10
DEFAULT_FRACTIONS = (0.06, 0.12, 0.25, 0.50, 0.75, 1.0)


class EvaluationError(ValueError):
    pass


class LeakageError(AssertionError):
    """A training sample is not strictly older than every test sample."""


@dataclass
class Fold:
    name: str
    start: dt.date
    end: dt.date | None
    sample_ids: list[str]

    @property
    def range(self) -> tuple[dt.date, dt.date | None]:
        return (self.start, self.end)


@dataclass
class Transition:
    train: Fold
    test: Fold

    @property
    def name(self) -> str:
        return self.test.name

    @property
    def train_range(self):
        return self.train.range

    @property
    def test_range(self):
        return self.test.range


@dataclass
class FoldPlan:
    folds: list[Fold]

    @property
    def transitions(self) -> list[Transition]:
        return [Transition(a, b) for a, b in zip(self.folds, self.folds[1:])]


def make_folds(dataset: Dataset, boundaries: Sequence[dt.date]) -> FoldPlan:
    """Assign every sample to the fold whose start date precedes it."""
    b = list(boundaries)
    if len(b) < 2:
        raise EvaluationError("need at least two fold boundaries")
    if any(x >= y for x, y in zip(b, b[1:])):
        raise EvaluationError("fold boundaries must be strictly increasing")
    buckets: list[list[str]] = [[] for _ in b]
    for s in dataset.samples:
        if s.timestamp < b[0]:
            raise EvaluationError(f"sample {s.id!r} ({s.timestamp}) precedes the first fold")
        i = int(np.searchsorted(np.array(b, dtype="datetime64[D]"),
                                np.datetime64(s.timestamp, "D"), side="right")) - 1
        buckets[i].append(s.id)
    folds = []
    for i, ids in enumerate(buckets):
        end = b[i + 1] if i + 1 < len(b) else None
        if not ids:
            raise EvaluationError(f"fold {i + 1} [{b[i]}, {end}) is empty")
        folds.append(Fold(f"fold{i + 1}", b[i], end, ids))
    return FoldPlan(folds)


@dataclass
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @staticmethod
    def _ratio(num: int, den: int) -> float | None:
        return None if den == 0 else num / den

    @property
    def precision(self) -> float | None:
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float | None:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def false_alarm(self) -> float | None:
        return self._ratio(self.fp, self.fp + self.tn)

    def get(self, name: str) -> float | None:
        return getattr(self, name)


def compute_metrics(predictions, truth) -> Metrics:
    """Confusion counts for 0/1 predictions against 0/1 truth."""
    p = np.asarray(predictions).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise EvaluationError("predictions and truth differ in length")
    return Metrics(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
        tn=int(np.sum(~p & ~t)),
    )


@dataclass
class MetricsRow:
    fold: str
    method: str
    repetition: int
    metrics: Metrics


@dataclass
class Aggregate:
    mean: float | None
    sd: float | None
    n: int
    n_undefined: int


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def extend(self, other: "MetricsReport") -> "MetricsReport":
        self.rows.extend(other.rows)
        return self

    @property
    def folds(self) -> list[str]:
        return list(dict.fromkeys(r.fold for r in self.rows))

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def values(self, metric: str, method: str, fold: str | None = None) -> list[float]:
        """Defined values of ``metric`` for ``method`` (optionally one fold)."""
        out = []
        for r in self.rows:
            if r.method == method and (fold is None or r.fold == fold):
                v = r.metrics.get(metric)
                if v is not None:
                    out.append(v)
        return out

    def aggregate(self, metric: str, method: str, fold: str | None = None) -> Aggregate:
        rows = [r for r in self.rows if r.method == method and (fold is None or r.fold == fold)]
        vals = [r.metrics.get(metric) for r in rows]
        defined = [v for v in vals if v is not None]
        if not defined:
            return Aggregate(None, None, len(vals), len(vals))
        arr = np.array(defined)
        return Aggregate(float(arr.mean()), float(arr.std()), len(vals), len(vals) - len(defined))

    def mean(self, metric: str, method: str, fold: str | None = None) -> float | None:
        return self.aggregate(metric, method, fold).mean


def _check_no_leakage(train: Dataset, test: Dataset) -> None:
    latest = max(train.timestamps)
    earliest = min(test.timestamps)
    if not latest < earliest:
        raise LeakageError(
            f"temporal leakage: training data reaches {latest}, test data starts {earliest}"
        )


def _split(dataset: Dataset, tr: Transition) -> tuple[Dataset, Dataset]:
    known = {s.id for s in dataset.samples}
    for fold in (tr.train, tr.test):
        missing = set(fold.sample_ids) - known
        if missing:
            raise EvaluationError(f"{fold.name}: {len(missing)} planned samples not in dataset")
    train, test = dataset.subset(tr.train.sample_ids), dataset.subset(tr.test.sample_ids)
    _check_no_leakage(train, test)
    return train, test


def _fit(train: Dataset, params: TrainParams) -> GbdtModel:
    try:
        return fit(train.X, train.y, params, train.feature_ids, train.fingerprint, train.n_static)
    except ModelError as exc:
        raise EvaluationError(f"cannot train on fold: {exc}") from None


def walk_forward(
    dataset: Dataset,
    plan: FoldPlan,
    train_params: TrainParams | None = None,
    feature_subset: Sequence[str] | None = None,
    repetitions: int = DEFAULT_REPETITIONS,
    seed: int = 0,
    method: str = "combined",
    threshold: float = 0.5,
) -> MetricsReport:
    """Train on each fold, test on the next; repetitions vary only the seed."""
    params = train_params or TrainParams()
    ds = dataset if feature_subset is None else dataset.select_ids(feature_subset)
    report = MetricsReport()
    for tr in plan.transitions:
        train, test = _split(ds, tr)
        X_test, y_test = test.X, test.y
        for rep in range(repetitions):
            model = _fit(train, replace(params, rng_seed=seed + rep))
            pred = model.predict_proba(X_test) >= threshold
            report.rows.append(MetricsRow(tr.name, method, rep, compute_metrics(pred, y_test)))
    return report


def evaluate_blocks(
    dataset: Dataset,
    plan: FoldPlan,
    train_params: TrainParams | None = None,
    repetitions: int = DEFAULT_REPETITIONS,
    seed: int = 0,
    methods: Sequence[str] = ("static", "dynamic", "combined", "random", "random_features"),
    threshold: float = 0.5,
) -> MetricsReport:
    """The static / dynamic / combined ablation plus both random baselines."""
    report = MetricsReport()
    for m in methods:
        if m in ("static", "dynamic", "combined"):
            ids = dataset.block_ids(m)
            if not ids:
                raise EvaluationError(f"dataset has no {m} features")
            report.extend(walk_forward(dataset, plan, train_params, ids, repetitions, seed, m,
                                       threshold))
        elif m == "random":
            for tr in plan.transitions:
                _, test = _split(dataset, tr)
                report.extend(baseline_random(test.y, seed, repetitions, fold=tr.name))
        elif m == "random_features":
            params = train_params or TrainParams()
            for tr in plan.transitions:
                train, test = _split(dataset, tr)
                model = _fit(train, replace(params, rng_seed=seed))
                report.extend(baseline_random_features(model, test.X, test.y, seed, repetitions,
                                                       fold=tr.name))
        else:
            raise EvaluationError(f"unknown method {m!r}")
    return report


def baseline_random(test_labels, seed: int = 0, repetitions: int = DEFAULT_REPETITIONS,
                    fold: str = "test") -> MetricsReport:
    """Fair coin per sample."""
    y = np.asarray(test_labels)
    report = MetricsReport()
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        pred = rng.random(len(y)) < 0.5
        report.rows.append(MetricsRow(fold, "random", rep, compute_metrics(pred, y)))
    return report


def baseline_random_features(model: GbdtModel | None, test_X, test_labels, seed: int = 0,
                             repetitions: int = DEFAULT_REPETITIONS,
                             fold: str = "test") -> MetricsReport:
    """Random positives at the model's mean predicted positive probability."""
    if model is None or not isinstance(model, GbdtModel):
        raise EvaluationError("random_features baseline needs a trained model")
    y = np.asarray(test_labels)
    p_bar = float(np.mean(model.predict_proba(test_X))) if len(y) else 0.0
    report = MetricsReport()
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep, 1])
        pred = rng.random(len(y)) < p_bar
        report.rows.append(MetricsRow(fold, "random_features", rep, compute_metrics(pred, y)))
    return report


def ablation_fractions(
    dataset: Dataset,
    plan: FoldPlan,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    train_params: TrainParams | None = None,
    repetitions: int = DEFAULT_REPETITIONS,
    seed: int = 0,
    threshold: float = 0.5,
) -> dict[float, MetricsReport]:
    """Per training fold: rank features by gain, keep the top fraction, re-evaluate."""
    params = train_params or TrainParams()
    out = {f: MetricsReport() for f in fractions}
    for tr in plan.transitions:
        train, test = _split(dataset, tr)
        table = feature_importance(_fit(train, replace(params, rng_seed=seed)))
        for frac in fractions:
            keep = select_top_fraction(table, frac)
            sub_train, sub_test = train.select_ids(keep), test.select_ids(keep)
            X_test, y_test = sub_test.X, sub_test.y
            for rep in range(repetitions):
                model = _fit(sub_train, replace(params, rng_seed=seed + rep))
                pred = model.predict_proba(X_test) >= threshold
                out[frac].rows.append(
                    MetricsRow(tr.name, f"top{frac:g}", rep, compute_metrics(pred, y_test))
                )
    return out


@dataclass
class WilcoxonResult:
    U: float
    p_two_sided: float
    method: str  # "exact", "normal" or "degenerate"
    z: float | None = None

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _exact_u_distribution(m: int, n: int) -> np.ndarray:
    """P(U = u) for u in 0..m*n, no ties, via the subset-sum recurrence."""
    # counts[k, s]: ways to pick k of the ranks seen so far with rank-sum offset s
    max_u = m * n
    counts = np.zeros((m + 1, max_u + 1))
    counts[0, 0] = 1.0
    # choosing ranks r_1<...<r_m from 1..m+n; U = sum(r_i - i)
    for r in range(1, m + n + 1):
        for k in range(min(m, r), 0, -1):
            shift = r - k
            if shift > max_u:
                continue
            counts[k, shift:] += counts[k - 1, : max_u + 1 - shift]
    dist = counts[m]
    return dist / dist.sum()


def wilcoxon_rank_sum(a: Sequence[float], b: Sequence[float], exact_max: int = 8) -> WilcoxonResult:
    """Two-sided Wilcoxon rank-sum (Mann-Whitney U) test.

    U is the statistic of ``a``. Without ties and with
    ``min(len(a), len(b)) <= exact_max`` the p-value is exact; otherwise
    the normal approximation with tie-corrected variance and continuity
    correction is used. If every value is identical the p-value is 1 and
    ``method == "degenerate"``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise EvaluationError("both samples must be non-empty")
    allv = np.concatenate([a, b])
    ranks = _average_ranks(allv)
    U = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    if np.all(allv == allv[0]):
        return WilcoxonResult(U, 1.0, "degenerate")
    _, tie_counts = np.unique(allv, return_counts=True)
    has_ties = bool(np.any(tie_counts > 1))
    if not has_ties and min(n1, n2) <= exact_max:
        dist = _exact_u_distribution(min(n1, n2), max(n1, n2))
        u = int(round(U))
        lower = dist[: u + 1].sum()
        upper = dist[u:].sum()
        return WilcoxonResult(U, float(min(1.0, 2 * min(lower, upper))), "exact")
    N = n1 + n2
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (N * (N - 1))
    sd = math.sqrt(n1 * n2 / 12.0 * ((N + 1) - tie_term))
    diff = max(abs(U - n1 * n2 / 2.0) - 0.5, 0.0)
    z = diff / sd
    return WilcoxonResult(U, float(min(1.0, 2 * norm.sf(z))), "normal", z)


def wilcoxon_matrix(
    report: MetricsReport,
    references: Sequence[str] = ("static", "dynamic"),
    metrics: Sequence[str] = METRICS,
) -> list[tuple[str, str, dict[str, WilcoxonResult | None]]]:
    """p-values of every method against each reference, pooled over folds and runs."""
    out = []
    for ref in references:
        if ref not in report.methods:
            continue
        for other in report.methods:
            if other == ref:
                continue
            cells = {}
            for metric in metrics:
                va, vb = report.values(metric, other), report.values(metric, ref)
                cells[metric] = wilcoxon_rank_sum(va, vb) if va and vb else None
            out.append((ref, other, cells))
    return out


@dataclass
class BenchResult:
    executions: int
    elapsed: float
    mode: str
    runs: int
    flags: list[str]
    n_features: int

    @property
    def rate(self) -> float:
        return self.executions / self.elapsed if self.elapsed > 0 else float("inf")


def exec_rate_bench(
    engine: EngineConfig | Engine,
    corpus: Sequence[str],
    catalog: FeatureCatalog,
    model: GbdtModel,
    feature_subset: Sequence[str] | None = None,
    threshold: float = 0.5,
) -> BenchResult:
    """Throughput of traced run -> extract -> score -> keep/discard over ``corpus``.

    ``engine`` is either a subprocess configuration or an in-process
    engine adapter. Only trace flags referenced by the (restricted)
    catalog are enabled, so a smaller feature set can also mean fewer
    traced runs per input.
    """
    if not corpus:
        raise EvaluationError("empty corpus")
    if feature_subset is not None:
        catalog = restrict_catalog(catalog, feature_subset)
    if model.fingerprint and model.fingerprint != catalog.fingerprint():
        raise EvaluationError("model was not trained on this feature set")
    if isinstance(engine, EngineConfig):
        flags = [f for f in engine.trace_flags if f in catalog.flags]
        mode = engine.trace_mode
        eng = SubprocessEngine(replace(engine, trace_flags=flags))
    else:
        flags = list(catalog.flags)
        mode = "in-process"
        eng = engine.with_flags(flags) if hasattr(engine, "with_flags") else engine
    before = eng.traced_runs
    kept = 0
    start = time.perf_counter()
    for source in corpus:
        x = vectorize_input(source, eng.trace(source), catalog)
        kept += predict_score(model, x) >= threshold
    elapsed = time.perf_counter() - start
    return BenchResult(len(corpus), elapsed, mode, eng.traced_runs - before, flags, len(catalog))
