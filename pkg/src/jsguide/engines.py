"""Engine adapters used by the fuzzing scheduler.

An engine offers two operations:

``execute(source)``
    a plain run (no trace flags) that reports crashes and, when the
    adapter can observe it, an edge-coverage bitmap;
``trace(source)``
    a run with the catalog's trace flags that returns the trace bundle.

The scheduler never interprets edge ids; it only compares bitmaps.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Callable, Protocol

from jsguide.runner import EngineConfig, run_target

DEFAULT_MAP_WIDTH = 1 << 16

# Coverage convention for subprocess engines: a wrapper around an
# instrumented binary prints ``jsguide-cov: <id>,<id>,...`` on stdout.
_COV_LINE = re.compile(r"^jsguide-cov: ?([0-9, ]*)$", re.M)


class CoverageMap:
    """Fixed-width edge bitmap backed by a Python int."""

    __slots__ = ("bits", "width")

    def __init__(self, bits: int = 0, width: int = DEFAULT_MAP_WIDTH):
        self.width = width
        self.bits = bits & ((1 << width) - 1)

    @classmethod
    def from_edges(cls, edges, width: int = DEFAULT_MAP_WIDTH) -> "CoverageMap":
        bits = 0
        for e in edges:
            bits |= 1 << (int(e) % width)
        return cls(bits, width)

    def has_new(self, union: "CoverageMap") -> bool:
        return bool(self.bits & ~union.bits)

    def __or__(self, other: "CoverageMap") -> "CoverageMap":
        if other.width != self.width:
            raise ValueError("coverage maps differ in width")
        return CoverageMap(self.bits | other.bits, self.width)

    def __eq__(self, other) -> bool:
        return isinstance(other, CoverageMap) and (self.bits, self.width) == (other.bits, other.width)

    def __hash__(self) -> int:
        return hash((self.bits, self.width))

    def count(self) -> int:
        return bin(self.bits).count("1")

    def edges(self) -> list[int]:
        return [i for i in range(self.width) if self.bits >> i & 1]

    def __repr__(self) -> str:
        return f"CoverageMap({self.count()} edges, width={self.width})"


@dataclass
class ExecResult:
    crashed: bool
    crash_keyword: str | None = None
    coverage: CoverageMap | None = None
    timed_out: bool = False


class Engine(Protocol):
    plain_runs: int
    traced_runs: int

    def execute(self, source: str) -> ExecResult: ...

    def trace(self, source: str) -> dict[str, str]: ...


def parse_coverage(text: str, width: int = DEFAULT_MAP_WIDTH) -> CoverageMap | None:
    edges = []
    found = False
    for m in _COV_LINE.finditer(text):
        found = True
        edges.extend(tok for tok in m.group(1).replace(" ", "").split(",") if tok)
    return CoverageMap.from_edges(edges, width) if found else None


class SubprocessEngine:
    """Adapter over :func:`jsguide.runner.run_target`."""

    def __init__(self, config: EngineConfig, map_width: int = DEFAULT_MAP_WIDTH):
        self.config = config
        self.map_width = map_width
        self.plain_runs = 0
        self.traced_runs = 0

    def execute(self, source: str) -> ExecResult:
        out = run_target(self.config, source, trace=False)
        self.plain_runs += out.runs
        cov = parse_coverage(out.stdout_tail, self.map_width)
        return ExecResult(out.crashed, out.crash_keyword, cov, out.timed_out)

    def trace(self, source: str) -> dict[str, str]:
        out = run_target(self.config, source, trace=True)
        self.traced_runs += out.runs
        return out.traces

    def with_flags(self, flags: list[str]) -> "SubprocessEngine":
        return SubprocessEngine(replace(self.config, trace_flags=list(flags)), self.map_width)


class StubEngine:
    """Deterministic in-process engine for tests and dry runs.

    ``crash`` maps source to a crash keyword or None, ``coverage`` maps
    source to an iterable of edge ids, ``traces`` maps source to a trace
    bundle.
    """

    def __init__(
        self,
        crash: Callable[[str], str | None] = lambda s: None,
        coverage: Callable[[str], object] = lambda s: (),
        traces: Callable[[str], dict[str, str]] = lambda s: {},
        map_width: int = DEFAULT_MAP_WIDTH,
        flags: list[str] | None = None,
    ):
        self._crash = crash
        self._coverage = coverage
        self._traces = traces
        self.map_width = map_width
        self.flags = flags
        self.plain_runs = 0
        self.traced_runs = 0

    def execute(self, source: str) -> ExecResult:
        self.plain_runs += 1
        kw = self._crash(source)
        cov = CoverageMap.from_edges(self._coverage(source), self.map_width)
        return ExecResult(kw is not None, kw, cov)

    def trace(self, source: str) -> dict[str, str]:
        self.traced_runs += 1
        bundle = self._traces(source)
        if self.flags is not None:
            return {f: bundle[f] for f in self.flags if f in bundle}
        return dict(bundle)

    def with_flags(self, flags: list[str]) -> "StubEngine":
        """A copy that only emits traces for ``flags``."""
        return StubEngine(self._crash, self._coverage, self._traces, self.map_width, list(flags))
