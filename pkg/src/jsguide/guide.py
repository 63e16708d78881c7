"""Hybrid feature-guided fuzzing loop with SHAP-scoped preservation filters.

One step:

1. pick a parent (score-proportional with a uniform floor) and fetch the
   features its explanation marks as responsible for its score;
2. mutate the parent;
3. plain run: a crash is always kept;
4. with probability ``explore_prob``: keep iff the mutant reaches a new edge;
5. otherwise, in order: static features within one sigma of the parent's
   (cheap, no execution), predicted score not below the parent's, traced
   run, dynamic features within one sigma, and a final score check on the
   complete vector. Any failure discards the mutant.

Sigma per feature is the population standard deviation of that feature
over the current corpus; a sigma of zero demands an exact match.
"""

from __future__ import annotations

import json
import logging
import random
import time
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from itertools import accumulate
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from jsguide.catalog import FeatureCatalog
from jsguide.engines import DEFAULT_MAP_WIDTH, CoverageMap, Engine
from jsguide.explain import PreservationSubset, shap_values, top_shap_subset
from jsguide.extract import extract_dynamic, extract_static
from jsguide.model import GbdtModel, predict_score

log = logging.getLogger(__name__)

SCORE_MODES = ("parent_dynamic", "zero_dynamic", "traced")


class Decision(str, Enum):
    KEPT_CRASH = "kept_crash"
    KEPT_EXPLORATION = "kept_exploration"
    KEPT_EXPLOITATION = "kept_exploitation"
    REJECTED_STATIC_SIGMA = "rejected_static_sigma"
    REJECTED_SCORE = "rejected_score"
    REJECTED_DYNAMIC_SIGMA = "rejected_dynamic_sigma"
    REJECTED_NO_NEW_COVERAGE = "rejected_no_new_coverage"
    # unguided baseline and mutator failures
    KEPT_RANDOM = "kept_random"
    REJECTED_RANDOM = "rejected_random"
    SKIPPED_MUTATOR_ERROR = "skipped_mutator_error"

    @property
    def kept(self) -> bool:
        return self.value.startswith("kept_")


@dataclass
class SeedRecord:
    id: str
    source: str
    vector: np.ndarray
    score: float
    shap_subset: PreservationSubset
    parent_id: str | None
    coverage: CoverageMap | None
    origin: str  # initial, exploration, exploitation, crash, random


@dataclass
class FilterDecision:
    decision: Decision
    parent_id: str
    branch: str | None = None  # "exploration" / "exploitation"
    child_id: str | None = None
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"decision": self.decision.value, "parent": self.parent_id, "branch": self.branch,
                "child": self.child_id, **self.details}


class CorpusStats:
    """Running per-feature mean and population standard deviation."""

    def __init__(self, width: int):
        self.n = 0
        self.mean = np.zeros(width)
        self._m2 = np.zeros(width)

    @classmethod
    def from_vectors(cls, vectors: Sequence[np.ndarray]) -> "CorpusStats":
        width = len(vectors[0]) if len(vectors) else 0
        stats = cls(width)
        for v in vectors:
            stats.add(v)
        return stats

    def add(self, v) -> None:
        v = np.asarray(v, dtype=np.float64)
        self.n += 1
        delta = v - self.mean
        self.mean += delta / self.n
        self._m2 += delta * (v - self.mean)

    @property
    def std(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(self.mean)
        return np.sqrt(np.maximum(self._m2 / self.n, 0.0))


@dataclass
class SigmaResult:
    passed: bool
    deltas: dict[str, tuple[float, float]]  # id -> (|child - parent|, allowed)
    vacuous: bool


def sigma_filter(
    child,
    parent,
    subset: PreservationSubset,
    stats: CorpusStats,
    block: str,
    n_static: int,
    k_sigma: float = 1.0,
) -> SigmaResult:
    """Pass iff every subset feature of ``block`` moved at most ``k_sigma`` sigma.

    Subset features from the other block are ignored. An empty selection
    passes vacuously.
    """
    if block not in ("static", "dynamic"):
        raise ValueError("block must be 'static' or 'dynamic'")
    std = stats.std
    deltas = {}
    passed = True
    for fid, i in zip(subset.ids, subset.indices):
        if (i < n_static) != (block == "static"):
            continue
        d = abs(float(child[i]) - float(parent[i]))
        allowed = k_sigma * float(std[i])
        deltas[fid] = (d, allowed)
        if d > allowed:
            passed = False
    return SigmaResult(passed, deltas, not deltas)


def selection_probabilities(scores: Sequence[float], floor: float = 0.1) -> list[float]:
    """``(1 - floor) * s_i / sum(s) + floor / n``; uniform when all scores are 0."""
    n = len(scores)
    total = float(sum(scores))
    if total <= 0:
        return [1.0 / n] * n
    return [(1 - floor) * s / total + floor / n for s in scores]


def select_seed(corpus: Sequence[SeedRecord], rng: random.Random, floor: float = 0.1) -> SeedRecord:
    if not corpus:
        raise ValueError("empty corpus")
    probs = selection_probabilities([s.score for s in corpus], floor)
    cum = list(accumulate(probs))
    i = bisect_right(cum, rng.random() * cum[-1])
    return corpus[min(i, len(corpus) - 1)]


class Scorer:
    """Catalog + model: vectors, scores and preservation subsets."""

    def __init__(self, catalog: FeatureCatalog, model: GbdtModel, coverage: float = 0.9):
        if model.fingerprint and model.fingerprint != catalog.fingerprint():
            raise ValueError("model and catalog fingerprints differ")
        self.catalog = catalog
        self.model = model
        self.coverage = coverage

    @property
    def n_static(self) -> int:
        return self.catalog.n_static

    def static(self, source: str) -> np.ndarray:
        return extract_static(source, self.catalog)

    def dynamic(self, traces) -> np.ndarray:
        return extract_dynamic(traces, self.catalog)

    def score(self, vector) -> float:
        return predict_score(self.model, vector)

    def subset(self, vector) -> PreservationSubset:
        return top_shap_subset(shap_values(self.model, vector), self.coverage)


@dataclass
class FuzzConfig:
    explore_prob: float = 0.1
    k_sigma: float = 1.0
    shap_coverage: float = 0.9
    selection_floor: float = 0.1
    score_mode: str = "parent_dynamic"
    guidance: bool = True
    random_keep_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}")
        if not 0.0 <= self.explore_prob <= 1.0:
            raise ValueError("explore_prob must be in [0, 1]")


class Fuzzer:
    """Owns the corpus, its statistics and the coverage union."""

    def __init__(
        self,
        scorer: Scorer,
        engine: Engine,
        mutator: Callable[[str, random.Random], str],
        config: FuzzConfig | None = None,
        crash_dir: str | Path | None = None,
        decision_log: str | Path | None = None,
        engine_flags: Sequence[str] = (),
    ):
        self.scorer = scorer
        self.engine = engine
        self.mutator = mutator
        self.config = config or FuzzConfig()
        self.rng = random.Random(self.config.seed)
        self.corpus: list[SeedRecord] = []
        self.stats = CorpusStats(len(scorer.catalog))
        self.union = None
        self.crashes: list[SeedRecord] = []
        self.crash_dir = Path(crash_dir) if crash_dir else None
        self.decision_log = Path(decision_log) if decision_log else None
        self.engine_flags = list(engine_flags)
        self.steps = 0
        self._next_id = 0

    # corpus management

    def _new_id(self) -> str:
        self._next_id += 1
        return f"seed{self._next_id:06d}"

    def add_seed(self, source: str, origin: str, parent_id: str | None = None,
                 traces: dict | None = None, coverage: CoverageMap | None = None,
                 vector: np.ndarray | None = None) -> SeedRecord:
        if vector is None:
            if traces is None:
                traces = self.engine.trace(source)
            vector = np.concatenate([self.scorer.static(source), self.scorer.dynamic(traces)])
        rec = SeedRecord(
            id=self._new_id(),
            source=source,
            vector=vector,
            score=self.scorer.score(vector),
            shap_subset=self.scorer.subset(vector),
            parent_id=parent_id,
            coverage=coverage,
            origin=origin,
        )
        self.corpus.append(rec)
        self.stats.add(vector)
        if coverage is not None:
            self.union = coverage if self.union is None else self.union | coverage
        return rec

    def seed_corpus(self, sources: Sequence[str]) -> None:
        for src in sources:
            res = self.engine.execute(src)
            self.add_seed(src, "initial", coverage=res.coverage)
        if not self.corpus:
            raise ValueError("initial corpus is empty")

    def _has_new_coverage(self, cov: CoverageMap | None) -> bool:
        if cov is None:
            return False
        if self.union is None:
            return cov.count() > 0
        return cov.has_new(self.union)

    # one iteration

    def fuzz_step(self) -> FilterDecision:
        cfg = self.config
        self.steps += 1
        floor = cfg.selection_floor if cfg.guidance else 1.0
        parent = select_seed(self.corpus, self.rng, floor)
        subset = parent.shap_subset
        try:
            child = self.mutator(parent.source, self.rng)
        except Exception as exc:  # mutator is an external boundary
            log.warning("mutator failed on %s: %s", parent.id, exc)
            return self._log(FilterDecision(Decision.SKIPPED_MUTATOR_ERROR, parent.id,
                                            details={"error": str(exc)}))

        res = self.engine.execute(child)
        if res.crashed:
            traces = self.engine.trace(child)
            rec = self.add_seed(child, "crash", parent.id, traces=traces, coverage=res.coverage)
            self.crashes.append(rec)
            self._persist_crash(rec, traces, res.crash_keyword)
            return self._log(FilterDecision(Decision.KEPT_CRASH, parent.id, None, rec.id,
                                            {"keyword": res.crash_keyword}))

        if not cfg.guidance:
            if self.rng.random() < cfg.random_keep_prob:
                rec = self.add_seed(child, "random", parent.id, coverage=res.coverage)
                return self._log(FilterDecision(Decision.KEPT_RANDOM, parent.id, None, rec.id))
            return self._log(FilterDecision(Decision.REJECTED_RANDOM, parent.id))

        if self.rng.random() < cfg.explore_prob:
            if self._has_new_coverage(res.coverage):
                rec = self.add_seed(child, "exploration", parent.id, coverage=res.coverage)
                return self._log(FilterDecision(Decision.KEPT_EXPLORATION, parent.id,
                                                "exploration", rec.id))
            return self._log(FilterDecision(Decision.REJECTED_NO_NEW_COVERAGE, parent.id,
                                            "exploration"))
        return self._exploit(parent, subset, child, res.coverage)

    def _exploit(self, parent, subset, child, coverage) -> FilterDecision:
        cfg = self.config
        ns = self.scorer.n_static
        details: dict = {"parent_score": parent.score}

        def reject(decision, **extra):
            details.update(extra)
            return self._log(FilterDecision(decision, parent.id, "exploitation", None, details))

        static = self.scorer.static(child)
        probe = np.concatenate([static, parent.vector[ns:]])
        st = sigma_filter(probe, parent.vector, subset, self.stats, "static", ns, cfg.k_sigma)
        details["static_deltas"] = st.deltas
        if not st.passed:
            return reject(Decision.REJECTED_STATIC_SIGMA)

        if cfg.score_mode != "traced":
            if cfg.score_mode == "zero_dynamic":
                probe = np.concatenate([static, np.zeros(len(parent.vector) - ns)])
            pre = self.scorer.score(probe)
            details["pre_trace_score"] = pre
            if pre < parent.score:
                return reject(Decision.REJECTED_SCORE, score_stage="pre_trace")

        traces = self.engine.trace(child)
        full = np.concatenate([static, self.scorer.dynamic(traces)])
        score = self.scorer.score(full)
        details["score"] = score
        if cfg.score_mode == "traced" and score < parent.score:
            return reject(Decision.REJECTED_SCORE, score_stage="traced")

        dy = sigma_filter(full, parent.vector, subset, self.stats, "dynamic", ns, cfg.k_sigma)
        details["dynamic_deltas"] = dy.deltas
        if not dy.passed:
            return reject(Decision.REJECTED_DYNAMIC_SIGMA)
        if score < parent.score:
            return reject(Decision.REJECTED_SCORE, score_stage="post_trace")

        rec = self.add_seed(child, "exploitation", parent.id, coverage=coverage, vector=full)
        return self._log(FilterDecision(Decision.KEPT_EXPLOITATION, parent.id, "exploitation",
                                        rec.id, details))

    # artifacts

    def _log(self, decision: FilterDecision) -> FilterDecision:
        if self.decision_log is not None:
            with self.decision_log.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"step": self.steps, **decision.to_json()}, default=str) + "\n")
        return decision

    def _persist_crash(self, rec: SeedRecord, traces: dict, keyword: str | None) -> None:
        if self.crash_dir is None:
            return
        d = self.crash_dir / f"crash-{len(self.crashes):04d}-{rec.id}"
        d.mkdir(parents=True, exist_ok=True)
        (d / "input.js").write_text(rec.source, encoding="utf-8")
        (d / "flags.txt").write_text("\n".join(self.engine_flags) + "\n", encoding="utf-8")
        (d / "traces.json").write_text(json.dumps(traces, indent=1), encoding="utf-8")
        (d / "decision.json").write_text(
            json.dumps({"step": self.steps, "parent": rec.parent_id, "keyword": keyword,
                        "score": rec.score, "shap_subset": rec.shap_subset.ids}, indent=1),
            encoding="utf-8",
        )


@dataclass
class CampaignReport:
    steps: int
    crashes: list[str]
    first_crash_step: int | None
    corpus_initial: int
    corpus_final: int
    histogram: Counter
    elapsed: float
    plain_runs: int
    traced_runs: int

    @property
    def throughput(self) -> float:
        return self.steps / self.elapsed if self.elapsed > 0 else 0.0

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "crashes": self.crashes,
            "first_crash_step": self.first_crash_step,
            "corpus_initial": self.corpus_initial,
            "corpus_final": self.corpus_final,
            "histogram": {k.value if isinstance(k, Decision) else k: v
                          for k, v in sorted(self.histogram.items())},
            "elapsed": self.elapsed,
            "throughput": self.throughput,
            "plain_runs": self.plain_runs,
            "traced_runs": self.traced_runs,
        }


def run_campaign(
    fuzzer: Fuzzer,
    max_steps: int | None = None,
    max_seconds: float | None = None,
    stop_on_crash: bool = False,
    stats_every: int = 1000,
) -> CampaignReport:
    """Loop ``fuzz_step`` until a step or wall-clock budget runs out."""
    if max_steps is None and max_seconds is None:
        raise ValueError("need a step or time budget")
    initial = len(fuzzer.corpus)
    hist: Counter = Counter()
    first_crash = None
    start = time.monotonic()
    steps = 0
    while (max_steps is None or steps < max_steps) and (
        max_seconds is None or time.monotonic() - start < max_seconds
    ):
        d = fuzzer.fuzz_step()
        steps += 1
        hist[d.decision] += 1
        if d.decision is Decision.KEPT_CRASH and first_crash is None:
            first_crash = steps
            if stop_on_crash:
                break
        if stats_every and steps % stats_every == 0:
            log.info("step %d: corpus=%d crashes=%d %s", steps, len(fuzzer.corpus),
                     len(fuzzer.crashes), dict(hist))
    return CampaignReport(
        steps=steps,
        crashes=[c.id for c in fuzzer.crashes],
        first_crash_step=first_crash,
        corpus_initial=initial,
        corpus_final=len(fuzzer.corpus),
        histogram=hist,
        elapsed=time.monotonic() - start,
        plain_runs=fuzzer.engine.plain_runs,
        traced_runs=fuzzer.engine.traced_runs,
    )


@dataclass
class CoverageSelectionResult:
    vulnerable_retained_fraction: float
    benign_retained_count: float
    per_repetition: list[tuple[float, int]]


def simulate_coverage_selection(
    seeds: Sequence[tuple[str, CoverageMap]],
    seed: int = 0,
    repetitions: int = 10,
) -> CoverageSelectionResult:
    """Replay coverage-gain seed selection over random arrival orders.

    A seed is retained iff its map has at least one edge not covered by
    the seeds retained before it. Labels ``positive``/``vulnerable`` count
    as vulnerable, anything else as benign.
    """
    if not seeds:
        raise ValueError("no seeds")
    vuln = [lab in ("positive", "vulnerable") for lab, _ in seeds]
    n_vuln = sum(vuln)
    rng = random.Random(seed)
    per_rep = []
    order = list(range(len(seeds)))
    for _ in range(repetitions):
        rng.shuffle(order)
        union = 0
        kept_v = kept_b = 0
        for i in order:
            bits = seeds[i][1].bits
            if bits & ~union:
                union |= bits
                if vuln[i]:
                    kept_v += 1
                else:
                    kept_b += 1
        per_rep.append((kept_v / n_vuln if n_vuln else 0.0, kept_b))
    return CoverageSelectionResult(
        float(np.mean([p[0] for p in per_rep])),
        float(np.mean([p[1] for p in per_rep])),
        per_rep,
    )


def overlap_population(
    n_vulnerable: int = 160,
    sharers: Sequence[int] = (3, 4),
    extra_benign: int = 840,
    duplicate_benign: int = 600,
    seed: int = 0,
) -> list[tuple[str, CoverageMap]]:
    """Labeled maps where benign seeds shadow vulnerable ones.

    Vulnerable seed ``v`` owns a single edge that ``k_v`` benign seeds
    also reach (``k_v`` cycles through ``sharers``). Each benign seed has
    one private edge besides. Under a random arrival order ``v`` is kept
    iff it precedes all of its sharers, i.e. with probability
    ``1 / (k_v + 1)``. ``extra_benign`` seeds with private edges and
    ``duplicate_benign`` exact copies of those pad the population without
    shadowing anything.
    """
    ks = [sharers[i % len(sharers)] for i in range(n_vulnerable)]
    n_edges = n_vulnerable + sum(ks) + extra_benign
    width = max(DEFAULT_MAP_WIDTH, 1 << (n_edges - 1).bit_length())
    seeds: list[tuple[str, CoverageMap]] = []
    nxt = n_vulnerable
    for v, k in enumerate(ks):
        seeds.append(("vulnerable", CoverageMap.from_edges([v], width)))
        for _ in range(k):
            seeds.append(("benign", CoverageMap.from_edges([v, nxt], width)))
            nxt += 1
    padding = []
    for _ in range(extra_benign):
        padding.append(CoverageMap.from_edges([nxt], width))
        nxt += 1
    seeds += [("benign", m) for m in padding]
    if padding:
        rng = random.Random(seed)
        seeds += [("benign", rng.choice(padding)) for _ in range(duplicate_benign)]
    return seeds


def expected_vulnerable_retention(sharers: Sequence[int] = (3, 4), n_vulnerable: int = 160) -> float:
    """Closed form for :func:`overlap_population`: mean of ``1 / (k + 1)``."""
    ks = [sharers[i % len(sharers)] for i in range(n_vulnerable)]
    return float(np.mean([1.0 / (k + 1) for k in ks]))
