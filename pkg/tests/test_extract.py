import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from jsguide.catalog import FeatureCatalog, FeatureSpec
from jsguide.extract import cap_text, decode_text, extract_dynamic, extract_static

MINI = FeatureCatalog(
    (
        FeatureSpec("gc", "gc call", "static", r"\bgc\(\)"),
        FeatureSpec("ta", "typed array", "static", r"\bnew\s+\w+Array\("),
        FeatureSpec("try", "try/catch", "static", r"\btry\s*\{"),
        FeatureSpec("scav", "scavenge", "dynamic", r"\bScavenge\b", "--trace-gc"),
        FeatureSpec("load", "load ic", "dynamic", r"LoadIC", "--trace-ic"),
    ),
    ("--trace-gc", "--trace-ic"),
)

POC = """\
// hand-counted fixture
let buf = new Float64Array(8);
function f() {
  try { buf[0] = 1.5; } catch (e) {}
  try {
    gc();
  } catch (e) {}
}
f();
"""


def test_empty_source_gives_zero_vector():
    assert extract_static("", MINI).tolist() == [0, 0, 0]


def test_hand_counted_fixture():
    assert extract_static(POC, MINI).tolist() == [1, 1, 2]


def test_literal_repeated():
    cat = FeatureCatalog((FeatureSpec("x", "x", "static", r"foo"),), ())
    assert extract_static("foo" * 5, cat).tolist() == [5]


def test_non_overlapping_counting():
    cat = FeatureCatalog((FeatureSpec("x", "x", "static", r"aa"),), ())
    assert extract_static("aaaaa", cat).tolist() == [2]


def test_multiline_anchors():
    cat = FeatureCatalog((FeatureSpec("x", "x", "static", r"^let\b"),), ())
    assert extract_static("let a;\nlet b;\n  let c;\n", cat).tolist() == [2]


def test_dynamic_counts_per_flag():
    log = "\n".join(["[gc] Scavenge 1.0 -> 0.5 MB"] * 7 + ["[gc] Mark-Compact"]) + "\n"
    assert extract_dynamic({"--trace-gc": log}, MINI).tolist() == [7, 0]


def test_dynamic_missing_and_unknown_flags():
    assert extract_dynamic({}, MINI).tolist() == [0, 0]
    got = extract_dynamic({"--trace-ic": "LoadIC\nLoadIC\n", "--other": "Scavenge"}, MINI)
    assert got.tolist() == [0, 2]


def test_locality_between_flags():
    base = {"--trace-gc": "Scavenge\n", "--trace-ic": "LoadIC\n"}
    edited = dict(base, **{"--trace-ic": "LoadIC\nLoadIC\nScavenge\n"})
    assert extract_dynamic(base, MINI)[0] == extract_dynamic(edited, MINI)[0]


def test_invalid_utf8_is_replaced():
    raw = b"gc();\xff\xfe gc();"
    assert "�" in decode_text(raw)
    assert extract_static(raw, MINI)[0] == 2


def test_byte_cap_truncates_and_flags():
    text = "gc();\n" * 100
    capped, was = cap_text(text, 60)
    assert was and len(capped.encode()) <= 60
    assert extract_static(text, MINI, byte_cap=60)[0] == 10
    assert cap_text("short", 60) == ("short", False)
    # a multi-byte character cut by the cap is dropped, not mangled
    assert cap_text("é" * 10, 5) == ("éé", True)


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet="gc();{}try new Float64Array(\n", max_size=80),
       st.text(alphabet="gc();{}try new Float64Array(\n", max_size=80))
def test_concatenation_is_monotone(a, b):
    joined = extract_static(a + "\n\n" + b, MINI)
    assert np.all(joined >= extract_static(a, MINI))
    assert np.all(joined >= extract_static(b, MINI))


def test_deterministic():
    assert extract_static(POC, MINI).tolist() == extract_static(POC, MINI).tolist()
