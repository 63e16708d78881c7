import json

import pytest

from jsguide.catalog import (
    CatalogError,
    FeatureCatalog,
    FeatureSpec,
    catalog_from_dict,
    load_catalog,
    restrict_catalog,
    write_catalog,
)
from jsguide.synth import make_synthetic_catalog


def _doc(features, flags=("--trace-gc",)):
    return {"format": "jsguide-catalog", "version": 1, "flags": list(flags), "features": features}


def _spec(i, kind="static", pattern=None, flag=None):
    return {"id": f"f{i}", "kind": kind, "pattern": pattern or rf"\btok{i}\b", "source_flag": flag}


def test_fixture_catalog_loads(fixture_catalog):
    assert fixture_catalog.n_static == 8
    assert fixture_catalog.n_dynamic == 6
    assert fixture_catalog.ids[0] == "s_gc_call"
    assert all(s.source_flag in fixture_catalog.flags for s in fixture_catalog.dynamic_specs)


def test_full_scale_catalog_shape():
    cat = make_synthetic_catalog()
    assert (cat.n_static, cat.n_dynamic, len(cat.flags)) == (115, 49, 5)


def test_empty_catalog_is_valid():
    cat = catalog_from_dict(_doc([], flags=[]))
    assert (cat.n_static, cat.n_dynamic) == (0, 0)


def test_bad_pattern_names_the_spec():
    feats = [_spec(i) for i in range(10)]
    feats[7]["pattern"] = "(unbalanced"
    with pytest.raises(CatalogError) as err:
        catalog_from_dict(_doc(feats))
    assert "spec #7" in str(err.value)
    assert err.value.spec_id == "f7"


@pytest.mark.parametrize("pattern", [r"(a)\1", r"foo(?=bar)", r"(?<!x)y"])
def test_backtracking_constructs_rejected(pattern):
    with pytest.raises(CatalogError):
        catalog_from_dict(_doc([_spec(0, pattern=pattern)]))


def test_empty_match_pattern_rejected():
    with pytest.raises(CatalogError, match="empty string"):
        catalog_from_dict(_doc([_spec(0, pattern=r"a*")]))


def test_duplicate_id_rejected():
    with pytest.raises(CatalogError, match="duplicate id"):
        catalog_from_dict(_doc([_spec(0), _spec(0)]))


def test_static_after_dynamic_rejected():
    feats = [_spec(0, "dynamic", flag="--trace-gc"), _spec(1)]
    with pytest.raises(CatalogError, match="after the dynamic block"):
        catalog_from_dict(_doc(feats))


def test_dynamic_flag_must_be_declared():
    with pytest.raises(CatalogError, match="not in declared flags"):
        catalog_from_dict(_doc([_spec(0, "dynamic", flag="--trace-ic")]))
    with pytest.raises(CatalogError, match="without source_flag"):
        catalog_from_dict(_doc([_spec(0, "dynamic")]))


def test_static_must_not_name_flag():
    with pytest.raises(CatalogError):
        catalog_from_dict(_doc([_spec(0, flag="--trace-gc")]))


def test_wrong_format_and_malformed_file(tmp_path):
    with pytest.raises(CatalogError):
        catalog_from_dict({"format": "other", "version": 1, "features": []})
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(CatalogError, match="malformed"):
        load_catalog(p)


def test_round_trip(tmp_path, fixture_catalog):
    p = tmp_path / "c.json"
    write_catalog(fixture_catalog, p)
    again = load_catalog(p)
    assert again == fixture_catalog
    assert again.fingerprint() == fixture_catalog.fingerprint()


def test_fingerprint_tracks_patterns(fixture_catalog):
    d = fixture_catalog.to_dict()
    d["features"][0]["pattern"] = r"\bgc\(\)"
    changed = catalog_from_dict(d)
    assert changed.fingerprint() != fixture_catalog.fingerprint()
    d = fixture_catalog.to_dict()
    d["features"][0]["description"] = "reworded"
    assert catalog_from_dict(d).fingerprint() == fixture_catalog.fingerprint()


def test_restrict_keeps_order_and_prunes_flags():
    specs = (
        FeatureSpec("a", "a", "static", r"\ba\b"),
        FeatureSpec("b", "b", "dynamic", r"\bb\b", "--x"),
        FeatureSpec("c", "c", "dynamic", r"\bc\b", "--y"),
    )
    cat = FeatureCatalog(specs, ("--x", "--y"))
    sub = restrict_catalog(cat, {"c"})
    assert sub.ids == ["c"] and sub.flags == ("--y",)
    sub = restrict_catalog(cat, {"c", "a"})
    assert sub.ids == ["a", "c"]
    assert restrict_catalog(sub, {"c", "a"}) == sub
    assert restrict_catalog(cat, {"a", "b", "c"}) is cat
    with pytest.raises(CatalogError):
        restrict_catalog(cat, {"zzz"})


def test_restrict_top_quarter_of_full_catalog():
    cat = make_synthetic_catalog()
    keep = cat.ids[:26] + cat.ids[115:130]
    sub = restrict_catalog(cat, keep)
    assert len(sub) == 41 and sub.n_dynamic == 15


def test_catalog_file_order_is_column_order(tmp_path):
    feats = [_spec(3), _spec(1), _spec(2)]
    p = tmp_path / "c.json"
    p.write_text(json.dumps(_doc(feats)))
    assert load_catalog(p).ids == ["f3", "f1", "f2"]
