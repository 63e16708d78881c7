import datetime as dt
import json

import numpy as np
import pytest

from jsguide.catalog import FeatureCatalog, FeatureSpec
from jsguide.runner import EngineConfig, run_target, write_record
from jsguide.synth import make_synthetic_catalog
from jsguide.vectorize import (
    Dataset,
    DatasetError,
    ManifestEntry,
    Sample,
    build_dataset,
    ingest_test_suite,
    read_dataset,
    read_manifest,
    vectorize_input,
    write_dataset,
    write_manifest,
)

MINI = FeatureCatalog(
    (
        FeatureSpec("gc", "gc", "static", r"\bgc\(\)"),
        FeatureSpec("ta", "ta", "static", r"Float64Array"),
        FeatureSpec("scav", "scav", "dynamic", r"Scavenge", "--trace-gc"),
    ),
    ("--trace-gc",),
)
DAY = dt.date(2023, 5, 1)


def test_empty_input_full_width():
    v = vectorize_input("", {}, make_synthetic_catalog())
    assert v.shape == (164,) and not v.any()


def test_mini_catalog_vector():
    src = "let a = new Float64Array(2);\ngc();\ngc();\n"
    v = vectorize_input(src, {"--trace-gc": "Scavenge\nScavenge\nScavenge\n"}, MINI)
    assert v.tolist() == [2, 1, 3]
    # an unrelated flag's log changes nothing
    v2 = vectorize_input(src, {"--trace-gc": "Scavenge\nScavenge\nScavenge\n", "--x": "gc()"}, MINI)
    assert v2.tolist() == v.tolist()


def _write_js(tmp_path, name, text):
    p = tmp_path / name
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    return p


def test_ingest_skips_regression_files(tmp_path):
    _write_js(tmp_path, "regress-12345.js", "gc();")
    assert ingest_test_suite(tmp_path, DAY, "11.8") == []
    _write_js(tmp_path, "array/sort.js", "gc();")
    _write_js(tmp_path, "compiler/Bug-1.js", "gc();")
    _write_js(tmp_path, "crashes/a.js", "gc();")
    got = ingest_test_suite(tmp_path, DAY, "11.8")
    assert [e.id for e in got] == ["11.8:array/sort.js"]
    assert got[0].label == "negative" and got[0].date == DAY


def test_build_dataset_with_records(tmp_path, stub_engine_path):
    cfg = EngineConfig(stub_engine_path, trace_flags=["--trace-gc"])
    src = "gc();\ngc();\n"
    js = _write_js(tmp_path, "poc.js", src)
    write_record(run_target(cfg, src), cfg, tmp_path / "poc.json")
    entries = [
        ManifestEntry(str(js), "positive", DAY, "11.1", str(tmp_path / "poc.json"), "p1"),
        ManifestEntry(str(_write_js(tmp_path, "n.js", "1;")), "negative", DAY, "11.1", None, "n1"),
    ]
    ds = build_dataset(entries, MINI)
    assert ds.X.tolist() == [[2, 0, 2], [0, 0, 0]]
    assert ds.y.tolist() == [1, 0]
    rev = build_dataset(entries[::-1], MINI)
    assert {s.id: s.vector.tolist() for s in rev.samples} == {s.id: s.vector.tolist() for s in ds.samples}


def test_bad_entries_are_rejected_not_fatal(tmp_path, stub_engine_path):
    good = ManifestEntry(str(_write_js(tmp_path, "a.js", "gc();")), "negative", DAY, id="a")
    missing = ManifestEntry(str(tmp_path / "gone.js"), "negative", DAY, id="gone")
    cfg = EngineConfig(stub_engine_path, trace_flags=["--trace-gc"], timeout=0.5)
    write_record(run_target(cfg, "HANG_ME"), cfg, tmp_path / "hang.json")
    hung = ManifestEntry(str(_write_js(tmp_path, "h.js", "HANG_ME")), "positive", DAY,
                         traces=str(tmp_path / "hang.json"), id="hang")
    ds = build_dataset([good, missing, hung], MINI, workers=2)
    assert [s.id for s in ds.samples] == ["a"]
    assert {r[0] for r in ds.rejected} == {"gone", "hang"}
    with pytest.raises(DatasetError):
        build_dataset([missing], MINI)
    with pytest.raises(DatasetError):
        build_dataset([], MINI)


def test_manifest_round_trip(tmp_path):
    _write_js(tmp_path, "x/a.js", "gc();")
    entries = [ManifestEntry("x/a.js", "positive", DAY, "11.1", None, "a")]
    write_manifest(entries, tmp_path / "m.csv")
    back = read_manifest(tmp_path / "m.csv")
    assert back[0].source == str(tmp_path / "x/a.js")
    assert back[0].date == DAY and back[0].traces is None


def test_dataset_table_round_trip(tmp_path):
    ds = Dataset(MINI.fingerprint(), MINI.ids, 2, [
        Sample("a", "positive", DAY, np.array([1, 2, 3]), "a.js", "11.1", True),
        Sample("b", "negative", DAY, np.array([0, 0, 5]), "b.js", "11.1"),
    ])
    write_dataset(ds, tmp_path / "d.tsv")
    back = read_dataset(tmp_path / "d.tsv")
    assert back.fingerprint == ds.fingerprint and back.n_static == 2
    assert back.X.tolist() == ds.X.tolist()
    assert [s.capped for s in back.samples] == [True, False]
    assert (tmp_path / "d.tsv").read_text().startswith("# jsguide-dataset v1 catalog=")


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        Dataset("fp", MINI.ids, 2, [Sample("a", "positive", DAY, np.array([1, 2]))])
    with pytest.raises(DatasetError):
        Sample("a", "maybe", DAY, np.array([1, 2, 3]))
    with pytest.raises(DatasetError):
        Dataset("fp", MINI.ids, 2, [Sample("a", "positive", DAY, np.array([1, 2, 3]))] * 2)


def test_merge_requires_same_catalog():
    a = Dataset("fp1", MINI.ids, 2, [Sample("a", "positive", DAY, np.array([1, 2, 3]))])
    b = Dataset("fp2", MINI.ids, 2, [Sample("b", "negative", DAY, np.array([1, 2, 3]))])
    with pytest.raises(DatasetError):
        a.merge(b)
    assert len(a.merge(Dataset("fp1", MINI.ids, 2, b.samples))) == 2


def test_select_ids_and_blocks():
    ds = Dataset(MINI.fingerprint(), MINI.ids, 2, [Sample("a", "positive", DAY, np.array([1, 2, 3]))])
    sub = ds.select_ids(["scav", "gc"])
    assert sub.feature_ids == ["gc", "scav"] and sub.n_static == 1
    assert sub.X.tolist() == [[1, 3]]
    assert ds.block_ids("dynamic") == ["scav"]
    with pytest.raises(DatasetError):
        ds.select_ids(["nope"])
