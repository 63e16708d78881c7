"""Feature catalogs: ordered regular-expression feature specs.

A catalog file is a JSON document::

    {
      "format": "jsguide-catalog",
      "version": 1,
      "flags": ["--trace-gc", "--trace-ic", ...],
      "features": [
        {"id": "s_gc_call", "name": "explicit gc()", "kind": "static",
         "pattern": "\\bgc\\(\\)", "source_flag": null, "description": "..."},
        ...
      ]
    }

Static specs come first, then dynamic specs. The position of a spec in
``features`` is its column in every feature vector, so the file order is
never changed on load.

Patterns use the RE2 dialect (no backreferences, no lookaround), which
keeps extraction linear in the input size.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import re2

CATALOG_FORMAT = "jsguide-catalog"
CATALOG_VERSION = 1

STATIC = "static"
DYNAMIC = "dynamic"

_RE2_OPTIONS = re2.Options()
_RE2_OPTIONS.log_errors = False


class CatalogError(ValueError):
    """Raised for malformed or invalid catalog files."""

    def __init__(self, message: str, spec_id: str | None = None):
        super().__init__(message)
        self.spec_id = spec_id


def compile_pattern(pattern: str):
    """Compile ``pattern`` in multiline mode under RE2."""
    return re2.compile("(?m)" + pattern, _RE2_OPTIONS)


@dataclass(frozen=True)
class FeatureSpec:
    id: str
    name: str
    kind: str
    pattern: str
    source_flag: str | None = None
    description: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "kind": self.kind,
            "pattern": self.pattern,
            "source_flag": self.source_flag,
            "description": self.description,
        }


@dataclass(frozen=True)
class FeatureCatalog:
    specs: tuple[FeatureSpec, ...]
    flags: tuple[str, ...]
    _compiled: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "flags", tuple(self.flags))
        _validate(self.specs, self.flags)
        object.__setattr__(
            self, "_compiled", tuple(compile_pattern(s.pattern) for s in self.specs)
        )

    @property
    def n_static(self) -> int:
        return sum(1 for s in self.specs if s.kind == STATIC)

    @property
    def n_dynamic(self) -> int:
        return sum(1 for s in self.specs if s.kind == DYNAMIC)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.specs]

    @property
    def static_specs(self) -> tuple[FeatureSpec, ...]:
        return self.specs[: self.n_static]

    @property
    def dynamic_specs(self) -> tuple[FeatureSpec, ...]:
        return self.specs[self.n_static :]

    def __len__(self) -> int:
        return len(self.specs)

    def index(self, feature_id: str) -> int:
        for i, spec in enumerate(self.specs):
            if spec.id == feature_id:
                return i
        raise KeyError(feature_id)

    def compiled(self, i: int):
        return self._compiled[i]

    def fingerprint(self) -> str:
        """Stable hash of everything that determines vector columns."""
        payload = {
            "flags": list(self.flags),
            "specs": [[s.id, s.kind, s.pattern, s.source_flag] for s in self.specs],
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "format": CATALOG_FORMAT,
            "version": CATALOG_VERSION,
            "flags": list(self.flags),
            "features": [s.to_dict() for s in self.specs],
        }


def _validate(specs: tuple[FeatureSpec, ...], flags: tuple[str, ...]) -> None:
    if len(set(flags)) != len(flags):
        raise CatalogError("duplicate trace flag in flag list")
    seen: set[str] = set()
    in_dynamic_block = False
    for i, spec in enumerate(specs):
        label = f"spec #{i} ({spec.id!r})"
        if not spec.id:
            raise CatalogError(f"spec #{i}: empty id", spec.id)
        if spec.id in seen:
            raise CatalogError(f"{label}: duplicate id", spec.id)
        seen.add(spec.id)
        if spec.kind == STATIC:
            if in_dynamic_block:
                raise CatalogError(f"{label}: static spec after the dynamic block", spec.id)
            if spec.source_flag is not None:
                raise CatalogError(f"{label}: static spec must not name a source_flag", spec.id)
        elif spec.kind == DYNAMIC:
            in_dynamic_block = True
            if not spec.source_flag:
                raise CatalogError(f"{label}: dynamic spec without source_flag", spec.id)
            if spec.source_flag not in flags:
                raise CatalogError(
                    f"{label}: source_flag {spec.source_flag!r} not in declared flags", spec.id
                )
        else:
            raise CatalogError(f"{label}: unknown kind {spec.kind!r}", spec.id)
        try:
            compiled = compile_pattern(spec.pattern)
        except re2.error as exc:
            msg = exc.args[0].decode() if exc.args and isinstance(exc.args[0], bytes) else exc
            raise CatalogError(f"{label}: bad pattern {spec.pattern!r}: {msg}", spec.id) from None
        if compiled.search("") is not None:
            raise CatalogError(f"{label}: pattern matches the empty string", spec.id)


def catalog_from_dict(data: dict) -> FeatureCatalog:
    if not isinstance(data, dict):
        raise CatalogError("catalog document must be a JSON object")
    if data.get("format") != CATALOG_FORMAT:
        raise CatalogError(f"not a catalog file (format={data.get('format')!r})")
    if data.get("version") != CATALOG_VERSION:
        raise CatalogError(f"unsupported catalog version {data.get('version')!r}")
    flags = data.get("flags", [])
    records = data.get("features")
    if not isinstance(flags, list) or not isinstance(records, list):
        raise CatalogError("'flags' and 'features' must be lists")
    specs = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise CatalogError(f"spec #{i}: record is not an object")
        missing = {"id", "kind", "pattern"} - rec.keys()
        if missing:
            raise CatalogError(f"spec #{i}: missing fields {sorted(missing)}", rec.get("id"))
        specs.append(
            FeatureSpec(
                id=str(rec["id"]),
                name=str(rec.get("name") or rec["id"]),
                kind=rec["kind"],
                pattern=rec["pattern"],
                source_flag=rec.get("source_flag"),
                description=rec.get("description", ""),
            )
        )
    return FeatureCatalog(specs=tuple(specs), flags=tuple(flags))


def load_catalog(path: str | Path) -> FeatureCatalog:
    """Read and validate a catalog file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CatalogError(f"{path}: malformed catalog file: {exc}") from None
    return catalog_from_dict(data)


def write_catalog(catalog: FeatureCatalog, path: str | Path) -> None:
    Path(path).write_text(json.dumps(catalog.to_dict(), indent=2) + "\n", encoding="utf-8")


def restrict_catalog(catalog: FeatureCatalog, keep: Iterable[str]) -> FeatureCatalog:
    """Keep only the specs in ``keep``, preserving catalog order.

    Flags no longer referenced by a kept dynamic spec are dropped.
    """
    keep = set(keep)
    unknown = keep - set(catalog.ids)
    if unknown:
        raise CatalogError(f"unknown feature ids: {sorted(unknown)}", sorted(unknown)[0])
    if len(keep) == len(catalog.specs):
        return catalog
    specs = tuple(s for s in catalog.specs if s.id in keep)
    used = {s.source_flag for s in specs if s.kind == DYNAMIC}
    flags = tuple(f for f in catalog.flags if f in used)
    return FeatureCatalog(specs=specs, flags=flags)
