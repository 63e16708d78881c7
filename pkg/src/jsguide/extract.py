"""Regex match counting over JS source text and engine trace logs."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from jsguide.catalog import FeatureCatalog

DEFAULT_BYTE_CAP = 16 * 1024 * 1024

# flag name -> captured log text
TraceBundle = Mapping[str, str]


def decode_text(data: bytes | str) -> str:
    """UTF-8 decode with U+FFFD replacement for invalid sequences."""
    if isinstance(data, str):
        return data
    return data.decode("utf-8", errors="replace")


def cap_text(text: str, byte_cap: int | None = DEFAULT_BYTE_CAP) -> tuple[str, bool]:
    """Truncate ``text`` to at most ``byte_cap`` UTF-8 bytes.

    Returns the (possibly truncated) text and whether truncation happened.
    A multi-byte character split by the cap is dropped.
    """
    if byte_cap is None or len(text) * 4 <= byte_cap:
        return text, False
    raw = text.encode("utf-8")
    if len(raw) <= byte_cap:
        return text, False
    return raw[:byte_cap].decode("utf-8", errors="ignore"), True


def count_matches(compiled, text: str) -> int:
    """Number of non-overlapping left-to-right matches."""
    return sum(1 for _ in compiled.finditer(text))


def extract_static(
    source: bytes | str, catalog: FeatureCatalog, byte_cap: int | None = DEFAULT_BYTE_CAP
) -> np.ndarray:
    text, _ = cap_text(decode_text(source), byte_cap)
    counts = np.zeros(catalog.n_static, dtype=np.int64)
    if not text:
        return counts
    for i in range(catalog.n_static):
        counts[i] = count_matches(catalog.compiled(i), text)
    return counts


def extract_dynamic(
    traces: TraceBundle, catalog: FeatureCatalog, byte_cap: int | None = DEFAULT_BYTE_CAP
) -> np.ndarray:
    """Count each dynamic spec's matches in the log of its own trace flag.

    Flags absent from ``traces`` contribute zeros; logs for flags the
    catalog does not declare are ignored.
    """
    counts = np.zeros(catalog.n_dynamic, dtype=np.int64)
    logs: dict[str, str] = {}
    for flag, raw in traces.items():
        if flag in catalog.flags and raw:
            logs[flag] = cap_text(decode_text(raw), byte_cap)[0]
    offset = catalog.n_static
    for j, spec in enumerate(catalog.dynamic_specs):
        text = logs.get(spec.source_flag)
        if text:
            counts[j] = count_matches(catalog.compiled(offset + j), text)
    return counts
