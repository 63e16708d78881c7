"""Combined feature vectors and labeled, timestamped datasets.

Manifest format (CSV with header; paths relative to the manifest file)::

    id,source,traces,label,date,version
    poc-1,pocs/1.js,records/1.json,positive,2023-02-11,11.1.92
    neg-7,mjsunit/array-sort.js,,negative,2023-08-31,11.8.149

``traces`` is an optional run record (see :mod:`jsguide.runner`); without
one, the dynamic block is zero. ``id`` may be empty, in which case the
source path is used.

Dataset table format (tab-separated)::

    # jsguide-dataset v1 catalog=<fingerprint> n_static=<k>
    id  label  date  version  source  capped  <feature id> ...
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from jsguide.catalog import FeatureCatalog
from jsguide.extract import DEFAULT_BYTE_CAP, cap_text, decode_text, extract_dynamic, extract_static
from jsguide.runner import RecordError, replay_traces

log = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"
LABELS = (POSITIVE, NEGATIVE)
DEFAULT_EXCLUDE_KEYWORDS = ("regress", "bug", "crash")
DATASET_MAGIC = "# jsguide-dataset v1"
META_COLUMNS = ("id", "label", "date", "version", "source", "capped")


class DatasetError(ValueError):
    pass


def vectorize_input(source: str, traces: Mapping[str, str], catalog: FeatureCatalog) -> np.ndarray:
    """``[static counts, dynamic counts]`` in catalog column order."""
    return np.concatenate([extract_static(source, catalog), extract_dynamic(traces, catalog)])


def input_was_capped(
    source: str, traces: Mapping[str, str], byte_cap: int | None = DEFAULT_BYTE_CAP
) -> bool:
    if cap_text(source, byte_cap)[1]:
        return True
    return any(cap_text(t, byte_cap)[1] for t in traces.values())


@dataclass
class Sample:
    id: str
    label: str
    timestamp: dt.date
    vector: np.ndarray
    source_ref: str = ""
    engine_version: str = ""
    capped: bool = False

    def __post_init__(self):
        if self.label not in LABELS:
            raise DatasetError(f"sample {self.id!r}: bad label {self.label!r}")
        if self.timestamp is None:
            raise DatasetError(f"sample {self.id!r}: missing timestamp")


@dataclass
class Dataset:
    fingerprint: str
    feature_ids: list[str]
    n_static: int
    samples: list[Sample]
    rejected: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate sample ids")
        n = len(self.feature_ids)
        for s in self.samples:
            if len(s.vector) != n:
                raise DatasetError(f"sample {s.id!r}: vector length {len(s.vector)} != {n}")
            if np.any(np.asarray(s.vector) < 0):
                raise DatasetError(f"sample {s.id!r}: negative feature count")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def X(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(self.feature_ids)))
        return np.vstack([s.vector for s in self.samples]).astype(np.float64)

    @property
    def y(self) -> np.ndarray:
        return np.array([s.label == POSITIVE for s in self.samples], dtype=np.int64)

    @property
    def timestamps(self) -> list[dt.date]:
        return [s.timestamp for s in self.samples]

    def subset(self, ids: Iterable[str]) -> "Dataset":
        wanted = set(ids)
        return Dataset(
            self.fingerprint,
            list(self.feature_ids),
            self.n_static,
            [s for s in self.samples if s.id in wanted],
        )

    def select_features(self, catalog: FeatureCatalog) -> "Dataset":
        """Project onto the columns of a restricted ``catalog``."""
        pos = {fid: i for i, fid in enumerate(self.feature_ids)}
        try:
            cols = [pos[fid] for fid in catalog.ids]
        except KeyError as exc:
            raise DatasetError(f"feature {exc.args[0]!r} not in dataset") from None
        samples = [
            Sample(s.id, s.label, s.timestamp, np.asarray(s.vector)[cols], s.source_ref,
                   s.engine_version, s.capped)
            for s in self.samples
        ]
        return Dataset(catalog.fingerprint(), catalog.ids, catalog.n_static, samples)

    def select_ids(self, ids: Sequence[str]) -> "Dataset":
        """Project onto ``ids`` (kept in dataset column order)."""
        wanted = set(ids)
        unknown = wanted - set(self.feature_ids)
        if unknown:
            raise DatasetError(f"unknown feature ids {sorted(unknown)[:5]}")
        cols = [i for i, fid in enumerate(self.feature_ids) if fid in wanted]
        n_static = sum(1 for i in cols if i < self.n_static)
        samples = [
            Sample(s.id, s.label, s.timestamp, np.asarray(s.vector)[cols], s.source_ref,
                   s.engine_version, s.capped)
            for s in self.samples
        ]
        fp = self.fingerprint if len(cols) == len(self.feature_ids) else f"{self.fingerprint}/{len(cols)}"
        return Dataset(fp, [self.feature_ids[i] for i in cols], n_static, samples)

    def block_ids(self, block: str) -> list[str]:
        if block == "static":
            return self.feature_ids[: self.n_static]
        if block == "dynamic":
            return self.feature_ids[self.n_static :]
        if block == "combined":
            return list(self.feature_ids)
        raise DatasetError(f"unknown feature block {block!r}")

    def check_catalog(self, catalog: FeatureCatalog) -> None:
        if catalog.fingerprint() != self.fingerprint:
            raise DatasetError(
                f"catalog fingerprint {catalog.fingerprint()} does not match dataset {self.fingerprint}"
            )

    def merge(self, other: "Dataset") -> "Dataset":
        if other.fingerprint != self.fingerprint:
            raise DatasetError("cannot merge datasets built from different catalogs")
        return Dataset(self.fingerprint, list(self.feature_ids), self.n_static,
                       self.samples + other.samples)


@dataclass
class ManifestEntry:
    source: str
    label: str
    date: dt.date
    version: str = ""
    traces: str | None = None
    id: str = ""


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries = []
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            src = row["source"].strip()
            tr = (row.get("traces") or "").strip()
            entries.append(
                ManifestEntry(
                    source=str(base / src),
                    traces=str(base / tr) if tr else None,
                    label=row["label"].strip(),
                    date=parse_date(row["date"]),
                    version=(row.get("version") or "").strip(),
                    id=(row.get("id") or "").strip(),
                )
            )
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "source", "traces", "label", "date", "version"])
        for e in entries:
            w.writerow([e.id, e.source, e.traces or "", e.label, e.date.isoformat(), e.version])


def ingest_test_suite(
    directory: str | Path,
    date: dt.date,
    version: str = "",
    exclude_keywords: Iterable[str] = DEFAULT_EXCLUDE_KEYWORDS,
    label: str = NEGATIVE,
) -> list[ManifestEntry]:
    """Manifest entries for every ``*.js`` under ``directory``.

    Files whose relative path contains any exclusion keyword
    (case-insensitive) are skipped, so past regressions never enter the
    negative set.
    """
    directory = Path(directory)
    keywords = [k.lower() for k in exclude_keywords]
    entries = []
    for p in sorted(directory.rglob("*.js")):
        rel = p.relative_to(directory).as_posix()
        if any(k in rel.lower() for k in keywords):
            continue
        entries.append(ManifestEntry(source=str(p), label=label, date=date, version=version,
                                     id=f"{version}:{rel}" if version else rel))
    return entries


def _load_entry(entry: ManifestEntry, catalog: FeatureCatalog) -> Sample:
    source = decode_text(Path(entry.source).read_bytes())
    traces: dict[str, str] = {}
    if entry.traces:
        outcome = replay_traces(entry.traces)
        if outcome.timed_out:
            raise DatasetError("recorded run timed out; label is ambiguous")
        traces = outcome.traces
    return Sample(
        id=entry.id or entry.source,
        label=entry.label,
        timestamp=entry.date,
        vector=vectorize_input(source, traces, catalog),
        source_ref=entry.source,
        engine_version=entry.version,
        capped=input_was_capped(source, traces),
    )


def build_dataset(
    entries: Sequence[ManifestEntry], catalog: FeatureCatalog, workers: int = 1
) -> Dataset:
    """Vectorize every manifest entry.

    Unreadable entries and entries whose recorded run timed out are
    logged and listed in ``Dataset.rejected``; the rest of the batch
    continues.
    """
    def attempt(entry):
        try:
            return _load_entry(entry, catalog), None
        except (OSError, RecordError, DatasetError) as exc:
            return None, (entry.id or entry.source, str(exc))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(attempt, entries))
    else:
        results = [attempt(e) for e in entries]
    samples, rejected = [], []
    for sample, err in results:
        if err is not None:
            log.warning("skipping %s: %s", *err)
            rejected.append(err)
        else:
            samples.append(sample)
    if not samples:
        raise DatasetError("no samples could be built from the manifest")
    ds = Dataset(catalog.fingerprint(), catalog.ids, catalog.n_static, samples)
    ds.rejected = rejected
    return ds


def write_dataset(ds: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"{DATASET_MAGIC} catalog={ds.fingerprint} n_static={ds.n_static}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow([*META_COLUMNS, *ds.feature_ids])
        for s in ds.samples:
            w.writerow([s.id, s.label, s.timestamp.isoformat(), s.engine_version, s.source_ref,
                        int(s.capped), *(int(v) for v in s.vector)])


def read_dataset(path: str | Path) -> Dataset:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith(DATASET_MAGIC):
            raise DatasetError(f"{path}: missing dataset header")
        meta = dict(tok.split("=", 1) for tok in header[len(DATASET_MAGIC):].split())
        r = csv.reader(fh, delimiter="\t")
        cols = next(r)
        if tuple(cols[: len(META_COLUMNS)]) != META_COLUMNS:
            raise DatasetError(f"{path}: unexpected columns {cols[:len(META_COLUMNS)]}")
        feature_ids = cols[len(META_COLUMNS):]
        samples = []
        for row in r:
            if not row:
                continue
            sid, label, date, version, src, capped = row[: len(META_COLUMNS)]
            vec = np.array([int(v) for v in row[len(META_COLUMNS):]], dtype=np.int64)
            samples.append(Sample(sid, label, parse_date(date), vec, src, version, capped == "1"))
    return Dataset(meta["catalog"], feature_ids, int(meta["n_static"]), samples)
