"""Synthetic catalogs and planted-signal datasets for desk-scale studies.

Real PoC corpora and their curated labels are not redistributable, so
the evaluation harness is exercised on generated data with a known
ground truth:

* every feature carries Poisson background counts shared by both classes;
* a chosen set of *signal* features is switched on (shifted upwards) in
  positives with probability ``p_on_pos`` and in negatives with
  ``p_on_neg``;
* optionally, a fraction of negatives carries the positives' static
  pattern only, and another fraction the dynamic pattern only. Such
  confounders make each block alone ambiguous while the conjunction
  stays discriminative.

The synthetic catalog uses one literal token per feature
(``tok_s000``, ``evt_d000``), so generated vectors can be rendered back
into sources and trace bundles that extract to the same counts.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from jsguide.catalog import FeatureCatalog, FeatureSpec
from jsguide.vectorize import NEGATIVE, POSITIVE, Dataset, Sample

DEFAULT_FLAGS = ("--trace-gc", "--trace-ic", "--log-maps", "--trace-opt", "--trace-deopt")


def make_synthetic_catalog(
    n_static: int = 115, n_dynamic: int = 49, flags=DEFAULT_FLAGS
) -> FeatureCatalog:
    """Token-per-feature catalog; dynamic feature ``j`` belongs to ``flags[j % len(flags)]``."""
    specs = [
        FeatureSpec(f"s{i:03d}", f"static token {i}", "static", rf"\btok_s{i:03d}\b", None,
                    "synthetic")
        for i in range(n_static)
    ]
    specs += [
        FeatureSpec(f"d{j:03d}", f"trace event {j}", "dynamic", rf"\bevt_d{j:03d}\b",
                    flags[j % len(flags)], "synthetic")
        for j in range(n_dynamic)
    ]
    used = [f for f in flags if any(s.source_flag == f for s in specs)]
    return FeatureCatalog(tuple(specs), tuple(used))


@dataclass
class PlantedConfig:
    """Shape of a planted dataset.

    ``fold_sizes`` lists ``(positives, negatives)`` per time fold.
    Signal features are the first ``signal_static`` static and the first
    ``signal_dynamic`` dynamic columns after a seeded shuffle.
    """

    fold_sizes: list[tuple[int, int]] = field(default_factory=lambda: [(40, 2000)] * 3)
    signal_static: int = 5
    signal_dynamic: int = 5
    p_on_pos: float = 0.6
    p_on_neg: float = 0.005
    shift: float = 3.0
    background: tuple[float, float] = (0.05, 1.5)
    signal_background: float | None = None  # fixed rate for signal columns
    confound_static: float = 0.0
    confound_dynamic: float = 0.0
    start: dt.date = dt.date(2022, 1, 1)
    fold_days: int = 180
    seed: int = 0


PRESETS = {
    # 10 signal features over both blocks, 1:50 imbalance
    "predictive": PlantedConfig(),
    # each block alone is confounded by negatives carrying only its pattern
    "synergy": PlantedConfig(
        signal_static=4, signal_dynamic=4, p_on_pos=0.75, p_on_neg=0.002,
        confound_static=0.04, confound_dynamic=0.04,
    ),
    # a quarter of all features carry weak, spread-out signal
    "ablation": PlantedConfig(
        signal_static=26, signal_dynamic=15, p_on_pos=0.45, p_on_neg=0.04,
        signal_background=0.0,
    ),
}


@dataclass
class PlantedDataset:
    dataset: Dataset
    boundaries: list[dt.date]
    signal_ids: list[str]
    config: PlantedConfig


def _draw(rng, n, lam, signal_cols, p_on, shift):
    X = rng.poisson(lam, size=(n, len(lam)))
    if signal_cols.size and n:
        on = rng.random((n, signal_cols.size)) < p_on
        bump = 1 + rng.poisson(shift, size=on.shape)
        X[:, signal_cols] += np.where(on, bump, 0)
    return X


def make_planted_dataset(catalog: FeatureCatalog, config: PlantedConfig) -> PlantedDataset:
    rng = np.random.default_rng(config.seed)
    ns, nd = catalog.n_static, catalog.n_dynamic
    if config.signal_static > ns or config.signal_dynamic > nd:
        raise ValueError("more signal features than catalog columns")
    s_cols = np.sort(rng.permutation(ns)[: config.signal_static])
    d_cols = np.sort(ns + rng.permutation(nd)[: config.signal_dynamic])
    sig = np.concatenate([s_cols, d_cols])
    lam = rng.uniform(*config.background, size=ns + nd)
    if config.signal_background is not None:
        lam[sig] = config.signal_background

    samples = []
    boundaries = []
    for k, (n_pos, n_neg) in enumerate(config.fold_sizes):
        start = config.start + dt.timedelta(days=k * config.fold_days)
        boundaries.append(start)
        pos = _draw(rng, n_pos, lam, sig, config.p_on_pos, config.shift)
        neg = _draw(rng, n_neg, lam, sig, config.p_on_neg, config.shift)
        n_cs = int(round(config.confound_static * n_neg))
        n_cd = int(round(config.confound_dynamic * n_neg))
        if n_cs:
            neg[:n_cs] = _draw(rng, n_cs, lam, s_cols, config.p_on_pos, config.shift)
        if n_cd:
            neg[n_cs:n_cs + n_cd] = _draw(rng, n_cd, lam, d_cols, config.p_on_pos, config.shift)
        for label, X in ((POSITIVE, pos), (NEGATIVE, neg)):
            days = rng.integers(0, config.fold_days, size=len(X))
            for i, (row, d) in enumerate(zip(X, days)):
                samples.append(Sample(
                    id=f"f{k + 1}-{label[:3]}-{i:05d}",
                    label=label,
                    timestamp=start + dt.timedelta(days=int(d)),
                    vector=row.astype(np.int64),
                    source_ref="synthetic",
                    engine_version=f"synthetic-{k + 1}",
                ))
    samples.sort(key=lambda s: (s.timestamp, s.id))
    ds = Dataset(catalog.fingerprint(), catalog.ids, ns, samples)
    return PlantedDataset(ds, boundaries, [catalog.ids[i] for i in sig], config)


def render_source(vector, catalog: FeatureCatalog) -> str:
    """JS text whose static extraction reproduces ``vector``'s static block."""
    lines = ["// synthetic input"]
    for i, spec in enumerate(catalog.static_specs):
        lines.extend(f"tok_{spec.id}();" for _ in range(int(vector[i])))
    return "\n".join(lines) + "\n"


def render_traces(vector, catalog: FeatureCatalog) -> dict[str, str]:
    """Trace bundle whose dynamic extraction reproduces ``vector``'s dynamic block."""
    out = {f: [] for f in catalog.flags}
    for j, spec in enumerate(catalog.dynamic_specs):
        out[spec.source_flag].extend(
            f"[{spec.source_flag[2:]}] evt_{spec.id}" for _ in range(int(vector[catalog.n_static + j]))
        )
    return {f: "\n".join(lines) + "\n" for f, lines in out.items()}
