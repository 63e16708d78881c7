import json
import random
from collections import Counter

import numpy as np
import pytest

import harness
from jsguide.engines import CoverageMap, StubEngine
from jsguide.explain import PreservationSubset
from jsguide.guide import (
    CorpusStats,
    Decision,
    FuzzConfig,
    Fuzzer,
    Scorer,
    SeedRecord,
    expected_vulnerable_retention,
    overlap_population,
    run_campaign,
    select_seed,
    selection_probabilities,
    sigma_filter,
    simulate_coverage_selection,
)
from jsguide.mutators import MutationError

EMPTY = PreservationSubset([], [], 0.0)


def _rec(i, score):
    return SeedRecord(f"s{i}", "", np.zeros(1), score, EMPTY, None, None, "initial")


@pytest.fixture(scope="module")
def cat():
    return harness.catalog()


@pytest.fixture(scope="module")
def mdl(cat):
    return harness.model(cat)


def test_selection_probabilities_formula():
    assert selection_probabilities([0.9, 0.1]) == pytest.approx([0.86, 0.14])
    assert selection_probabilities([0.0, 0.0, 0.0]) == pytest.approx([1 / 3] * 3)
    assert selection_probabilities([0.5], floor=0.1) == pytest.approx([1.0])


def test_select_seed_frequencies():
    rng = random.Random(0)
    corpus = [_rec(0, 0.9), _rec(1, 0.1)]
    hits = Counter(select_seed(corpus, rng).id for _ in range(10_000))
    assert abs(hits["s0"] / 10_000 - 0.86) <= 0.03
    zeros = [_rec(i, 0.0) for i in range(4)]
    hits = Counter(select_seed(zeros, rng).id for _ in range(8000))
    assert all(abs(c / 8000 - 0.25) < 0.03 for c in hits.values())
    assert select_seed([_rec(0, 0.0)], rng).id == "s0"
    with pytest.raises(ValueError):
        select_seed([], rng)


def test_corpus_stats_population_sd():
    vs = [np.array([3.0, 1.0]), np.array([7.0, 1.0])]
    st = CorpusStats.from_vectors(vs)
    assert st.std == pytest.approx([2.0, 0.0])
    rng = np.random.default_rng(0)
    X = rng.poisson(2.0, size=(50, 3))
    assert CorpusStats.from_vectors(list(X)).std == pytest.approx(X.std(axis=0))


def test_sigma_filter_examples():
    st = CorpusStats.from_vectors([np.array([3.0, 0.0]), np.array([7.0, 0.0])])
    sub = PreservationSubset(["a"], [0], 1.0)
    assert sigma_filter([7, 0], [5, 0], sub, st, "static", 1).passed
    res = sigma_filter([8, 0], [5, 0], sub, st, "static", 1)
    assert not res.passed and res.deltas["a"] == (3.0, 2.0)
    zero = PreservationSubset(["b"], [1], 1.0)
    assert sigma_filter([0, 0], [0, 0], zero, st, "dynamic", 1).passed
    assert not sigma_filter([0, 1], [0, 0], zero, st, "dynamic", 1).passed
    # features of the other block are ignored, an empty selection is vacuous
    res = sigma_filter([100, 0], [0, 0], sub, st, "dynamic", 1)
    assert res.passed and res.vacuous
    with pytest.raises(ValueError):
        sigma_filter([0, 0], [0, 0], sub, st, "both", 1)


def test_scorer_rejects_foreign_model(cat, mdl):
    other = harness.catalog()
    other = type(other)(other.specs[:-1], other.flags)
    with pytest.raises(ValueError, match="fingerprint"):
        Scorer(other, mdl)


class FakeScorer:
    """Scores from a lookup on the first column; a fixed preservation subset."""

    def __init__(self, cat, scores, subset=EMPTY):
        self.catalog = cat
        self.n_static = cat.n_static
        self._scores = scores
        self._subset = subset

    def static(self, source):
        return np.array([source.count("A"), 0, 0, 0], dtype=np.int64)

    def dynamic(self, traces):
        return np.array([traces.get("--trace-gc", "").count("X"), 0], dtype=np.int64)

    def score(self, v):
        return self._scores(v)

    def subset(self, v):
        return self._subset


def _single_child_fuzzer(cat, scorer, parent, child, traces=lambda s: {}, **cfg):
    engine = StubEngine(traces=traces)
    fz = Fuzzer(scorer, engine, lambda s, r: child, FuzzConfig(explore_prob=0.0, **cfg))
    fz.seed_corpus([parent])
    engine.plain_runs = engine.traced_runs = 0
    return fz, engine


def test_score_drop_rejected_before_tracing(cat):
    scorer = FakeScorer(cat, lambda v: 0.8 if v[0] == 1 else 0.6)
    fz, engine = _single_child_fuzzer(cat, scorer, "A\n", "B\n")
    d = fz.fuzz_step()
    assert d.decision is Decision.REJECTED_SCORE and d.details["score_stage"] == "pre_trace"
    assert (engine.plain_runs, engine.traced_runs) == (1, 0)
    assert len(fz.corpus) == 1


def test_static_sigma_rejected_before_tracing(cat):
    sub = PreservationSubset(["s_gc"], [0], 1.0)
    scorer = FakeScorer(cat, lambda v: 0.5, sub)
    fz, engine = _single_child_fuzzer(cat, scorer, "A\n", "AAAA\n")
    d = fz.fuzz_step()
    assert d.decision is Decision.REJECTED_STATIC_SIGMA
    assert engine.traced_runs == 0 and engine.plain_runs == 1


def test_dynamic_sigma_rejected_after_tracing(cat):
    sub = PreservationSubset(["d_scav"], [4], 1.0)
    scorer = FakeScorer(cat, lambda v: 0.5, sub)
    traces = lambda s: {"--trace-gc": "X" * s.count("B")}
    fz, engine = _single_child_fuzzer(cat, scorer, "A\n", "A\nBBB\n", traces)
    d = fz.fuzz_step()
    assert d.decision is Decision.REJECTED_DYNAMIC_SIGMA
    assert engine.traced_runs == 1


def test_post_trace_score_recheck(cat):
    scorer = FakeScorer(cat, lambda v: 0.8 - 0.1 * v[4])
    traces = lambda s: {"--trace-gc": "X" * s.count("B")}
    fz, engine = _single_child_fuzzer(cat, scorer, "A\n", "A\nB\n", traces)
    d = fz.fuzz_step()
    assert d.decision is Decision.REJECTED_SCORE and d.details["score_stage"] == "post_trace"
    fz, _ = _single_child_fuzzer(cat, scorer, "A\n", "A\nC\n", traces)
    d = fz.fuzz_step()
    assert d.decision is Decision.KEPT_EXPLOITATION and len(fz.corpus) == 2


def test_score_modes(cat):
    scorer = FakeScorer(cat, lambda v: 0.5)
    traces = lambda s: {"--trace-gc": "X"}
    fz, engine = _single_child_fuzzer(cat, scorer, "A\n", "A\n", traces, score_mode="traced")
    d = fz.fuzz_step()
    assert "pre_trace_score" not in d.details and engine.traced_runs == 1
    probes = []
    scorer = FakeScorer(cat, lambda v: probes.append(v.copy()) or 0.5)
    fz, _ = _single_child_fuzzer(cat, scorer, "A\n", "A\n", traces, score_mode="zero_dynamic")
    probes.clear()
    fz.fuzz_step()
    assert probes[0][4] == 0 and probes[1][4] == 1
    fz, _ = _single_child_fuzzer(cat, scorer, "A\n", "A\n", traces)
    probes.clear()
    fz.fuzz_step()
    assert probes[0][4] == 1  # parent's dynamic block stands in before tracing
    with pytest.raises(ValueError):
        FuzzConfig(score_mode="bogus")


def test_crash_dominates_every_branch(cat, mdl, tmp_path):
    fz = harness.make_fuzzer(cat, mdl, crash=lambda s: "Check failed", explore_prob=1.0)
    fz.crash_dir = tmp_path
    for _ in range(5):
        d = fz.fuzz_step()
        assert d.decision is Decision.KEPT_CRASH
    dirs = sorted(tmp_path.iterdir())
    assert len(dirs) == 5
    for name in ("input.js", "flags.txt", "traces.json", "decision.json"):
        assert (dirs[0] / name).exists()
    meta = json.loads((dirs[0] / "decision.json").read_text())
    assert meta["keyword"] == "Check failed"


def test_exploration_frequency_and_coverage_rule(cat, mdl):
    fz = harness.make_fuzzer(cat, mdl, crash=lambda s: None, seed=1)
    rep = run_campaign(fz, max_steps=3000)
    explored = rep.histogram[Decision.KEPT_EXPLORATION] + rep.histogram[Decision.REJECTED_NO_NEW_COVERAGE]
    assert 0.08 <= explored / 3000 <= 0.12
    kept = [s for s in fz.corpus if s.origin == "exploration"]
    assert kept and all(s.coverage.count() > 0 for s in kept)


def test_exploitation_is_monotone(cat, mdl):
    fz = harness.make_fuzzer(cat, mdl, crash=lambda s: None, seed=2)
    run_campaign(fz, max_steps=1500)
    by_id = {s.id: s for s in fz.corpus}
    children = [s for s in fz.corpus if s.origin == "exploitation"]
    assert children
    assert all(s.score >= by_id[s.parent_id].score for s in children)


def test_no_trace_after_cheap_rejections(cat, mdl, tmp_path):
    log = tmp_path / "d.jsonl"
    fz = harness.make_fuzzer(cat, mdl, crash=lambda s: None, seed=3)
    fz.decision_log = log
    before = fz.engine.traced_runs
    rep = run_campaign(fz, max_steps=1000)
    h = rep.histogram
    # kept exploration children are traced once when they join the corpus
    traced_steps = (h[Decision.REJECTED_DYNAMIC_SIGMA] + h[Decision.KEPT_EXPLOITATION]
                    + h[Decision.KEPT_EXPLORATION]
                    + sum(1 for line in log.read_text().splitlines()
                          if json.loads(line).get("score_stage") == "post_trace"))
    assert rep.traced_runs - before == traced_steps
    assert len(log.read_text().splitlines()) == 1000


def test_determinism(cat, mdl):
    def decisions(seed):
        fz = harness.make_fuzzer(cat, mdl, seed=seed)
        return [fz.fuzz_step().decision for _ in range(300)]

    assert decisions(7) == decisions(7)


def test_mutator_error_is_skipped(cat, mdl):
    def broken(src, rng):
        raise MutationError("boom")

    fz = harness.make_fuzzer(cat, mdl)
    fz.mutator = broken
    rep = run_campaign(fz, max_steps=3)
    assert rep.histogram == Counter({Decision.SKIPPED_MUTATOR_ERROR: 3})
    assert len(fz.corpus) == len(harness.SEEDS)


def test_zero_budget(cat, mdl):
    fz = harness.make_fuzzer(cat, mdl)
    rep = run_campaign(fz, max_steps=0)
    assert rep.steps == 0 and rep.corpus_final == rep.corpus_initial and not rep.crashes
    with pytest.raises(ValueError):
        run_campaign(fz)
    json.dumps(rep.to_json())


def test_unguided_mode_keeps_at_random(cat, mdl):
    fz = harness.make_fuzzer(cat, mdl, crash=lambda s: None, guidance=False)
    rep = run_campaign(fz, max_steps=400)
    assert set(rep.histogram) <= {Decision.KEPT_RANDOM, Decision.REJECTED_RANDOM}
    assert abs(rep.histogram[Decision.KEPT_RANDOM] / 400 - 0.5) < 0.1
    assert rep.traced_runs == len(harness.SEEDS) + rep.histogram[Decision.KEPT_RANDOM]


def test_empty_corpus_rejected(cat, mdl):
    fz = Fuzzer(Scorer(cat, mdl), StubEngine(), lambda s, r: s)
    with pytest.raises(ValueError):
        fz.seed_corpus([])


def test_coverage_selection_trivial_populations():
    same = [("positive", CoverageMap.from_edges([1, 2]))] * 5
    res = simulate_coverage_selection(same, repetitions=4)
    assert res.vulnerable_retained_fraction == pytest.approx(0.2)
    disjoint = [("benign", CoverageMap.from_edges([i])) for i in range(6)]
    disjoint += [("vulnerable", CoverageMap.from_edges([100 + i])) for i in range(3)]
    res = simulate_coverage_selection(disjoint, repetitions=3)
    assert res.vulnerable_retained_fraction == 1.0 and res.benign_retained_count == 6
    with pytest.raises(ValueError):
        simulate_coverage_selection([])


def test_overlap_population_matches_closed_form():
    pop = overlap_population()
    res = simulate_coverage_selection(pop, seed=0, repetitions=20)
    assert abs(res.vulnerable_retained_fraction - expected_vulnerable_retention()) < 0.03
    assert res.benign_retained_count == 160 * 3.5 + 840
