"""Run JS inputs under an engine binary, capture traces, detect crashes.

Two trace capture modes are supported:

``per_flag``
    the input is run once per trace flag and each run's combined
    stdout+stderr is attributed to that flag. Bundle keys are exact at
    the cost of one process per flag.
``combined``
    one run with every trace flag enabled; the whole output is
    attributed to each flag. Cheaper, but a pattern written for one flag
    can match lines emitted by another.

Runs that hit the timeout are killed (whole process group) and reported
with ``timed_out=True`` and ``crashed=False``.
"""

from __future__ import annotations

import json
import os
import signal
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from jsguide.extract import DEFAULT_BYTE_CAP, cap_text, decode_text

DEFAULT_CRASH_KEYWORDS = (
    "Crash",
    "Segmentation fault",
    "OOB",
    "Fatal error",
    "Check failed",
    "AddressSanitizer",
)
TAIL_BYTES = 64 * 1024
RECORD_FORMAT = "jsguide-run-record"
RECORD_VERSION = 1
TRACE_MODES = ("per_flag", "combined")


class EngineError(RuntimeError):
    """The engine process could not be started."""


class RecordError(ValueError):
    """A replay record does not follow the record schema."""


@dataclass
class EngineConfig:
    binary_path: str
    base_flags: list[str] = field(default_factory=list)
    trace_flags: list[str] = field(default_factory=list)
    timeout: float = 10.0
    env: dict[str, str] = field(default_factory=dict)
    trace_mode: str = "per_flag"
    crash_keywords: tuple[str, ...] = DEFAULT_CRASH_KEYWORDS

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.trace_mode not in TRACE_MODES:
            raise ValueError(f"trace_mode must be one of {TRACE_MODES}")
        self.crash_keywords = tuple(self.crash_keywords)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["crash_keywords"] = list(self.crash_keywords)
        return d


@dataclass
class RunOutcome:
    exit_status: int | None
    crashed: bool
    crash_keyword: str | None
    traces: dict[str, str]
    stdout_tail: str = ""
    stderr_tail: str = ""
    timed_out: bool = False
    wall_time: float = field(default=0.0, compare=False)
    runs: int = field(default=1, compare=False)


def detect_crash(
    stdout: str,
    stderr: str,
    exit_status: int | None,
    keywords: tuple[str, ...] | list[str] = DEFAULT_CRASH_KEYWORDS,
) -> str | None:
    """Return the first keyword (in list order) found in either stream.

    Keywords are case-sensitive. With no keyword match, a process killed
    by a signal (negative ``exit_status``, Python's convention) yields the
    synthetic keyword ``"signal:<n>"``.
    """
    for kw in keywords:
        if kw in stdout or kw in stderr:
            return kw
    if exit_status is not None and exit_status < 0:
        return f"signal:{-exit_status}"
    return None


def _tail(text: str, limit: int = TAIL_BYTES) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= limit:
        return text
    return raw[-limit:].decode("utf-8", errors="ignore")


@dataclass
class _Proc:
    stdout: str
    stderr: str
    returncode: int | None
    timed_out: bool


def _spawn(argv: list[str], config: EngineConfig) -> _Proc:
    env = dict(os.environ)
    env.update(config.env)
    try:
        proc = subprocess.Popen(
            argv,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            stdin=subprocess.DEVNULL,
            env=env,
            start_new_session=True,
        )
    except OSError as exc:
        raise EngineError(f"cannot start engine {argv[0]!r}: {exc}") from exc
    try:
        out, err = proc.communicate(timeout=config.timeout)
        timed_out = False
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        out, err = proc.communicate()
        timed_out = True
    return _Proc(decode_text(out), decode_text(err), proc.returncode, timed_out)


def run_target(config: EngineConfig, source: str, trace: bool = True) -> RunOutcome:
    """Execute ``source`` under the engine.

    With ``trace=False`` a single run with only ``base_flags`` is made
    (the cheap crash check); otherwise trace flags are applied according
    to ``config.trace_mode``.
    """
    if not config.binary_path:
        raise EngineError("no engine binary configured")
    with tempfile.TemporaryDirectory(prefix="jsguide-") as tmp:
        script = Path(tmp) / "input.js"
        script.write_text(source, encoding="utf-8")
        base = [config.binary_path, *config.base_flags]
        if not trace or not config.trace_flags:
            plans = [(None, base + [str(script)])]
        elif config.trace_mode == "combined":
            plans = [(None, base + list(config.trace_flags) + [str(script)])]
        else:
            plans = [(flag, base + [flag, str(script)]) for flag in config.trace_flags]

        start = time.monotonic()
        traces: dict[str, str] = {}
        chosen: _Proc | None = None
        last: _Proc | None = None
        keyword = None
        any_timeout = False
        for flag, argv in plans:
            proc = _spawn(argv, config)
            any_timeout |= proc.timed_out
            log = cap_text(proc.stdout + proc.stderr, DEFAULT_BYTE_CAP)[0]
            if trace and config.trace_flags:
                if flag is None:
                    for f in config.trace_flags:
                        traces[f] = log
                else:
                    traces[flag] = log
            kw = None
            if not proc.timed_out:
                kw = detect_crash(proc.stdout, proc.stderr, proc.returncode, config.crash_keywords)
            if kw is not None and keyword is None:
                keyword, chosen = kw, proc
            last = proc
        wall = time.monotonic() - start

    chosen = chosen or last
    return RunOutcome(
        exit_status=None if chosen.timed_out else chosen.returncode,
        crashed=keyword is not None,
        crash_keyword=keyword,
        traces=traces,
        stdout_tail=_tail(chosen.stdout),
        stderr_tail=_tail(chosen.stderr),
        timed_out=any_timeout and keyword is None,
        wall_time=wall,
        runs=len(plans),
    )


def outcome_to_record(outcome: RunOutcome, config: EngineConfig) -> dict:
    return {
        "format": RECORD_FORMAT,
        "version": RECORD_VERSION,
        "config": config.snapshot(),
        "flags": list(config.trace_flags),
        "exit_status": outcome.exit_status,
        "crashed": outcome.crashed,
        "crash_keyword": outcome.crash_keyword,
        "timed_out": outcome.timed_out,
        "stdout_tail": outcome.stdout_tail,
        "stderr_tail": outcome.stderr_tail,
        "wall_time": outcome.wall_time,
        "runs": outcome.runs,
        "traces": dict(outcome.traces),
    }


def write_record(outcome: RunOutcome, config: EngineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(outcome_to_record(outcome, config), indent=1), encoding="utf-8")


_RECORD_FIELDS = {
    "exit_status": (int, type(None)),
    "crashed": (bool,),
    "crash_keyword": (str, type(None)),
    "timed_out": (bool,),
    "stdout_tail": (str,),
    "stderr_tail": (str,),
    "traces": (dict,),
    "flags": (list,),
}


def record_to_outcome(data: dict) -> RunOutcome:
    if not isinstance(data, dict) or data.get("format") != RECORD_FORMAT:
        raise RecordError("not a run record")
    if data.get("version") != RECORD_VERSION:
        raise RecordError(f"unsupported record version {data.get('version')!r}")
    for name, types in _RECORD_FIELDS.items():
        if name not in data:
            raise RecordError(f"missing field {name!r}")
        if not isinstance(data[name], types) or (
            isinstance(data[name], bool) and bool not in types
        ):
            raise RecordError(f"field {name!r} has wrong type")
    declared = set(data["flags"])
    for flag, text in data["traces"].items():
        if flag not in declared:
            raise RecordError(f"trace for undeclared flag {flag!r}")
        if not isinstance(text, str):
            raise RecordError(f"trace for {flag!r} is not text")
    if data["crashed"] and data["crash_keyword"] is None:
        raise RecordError("crashed record without crash_keyword")
    return RunOutcome(
        exit_status=data["exit_status"],
        crashed=data["crashed"],
        crash_keyword=data["crash_keyword"],
        traces=dict(data["traces"]),
        stdout_tail=data["stdout_tail"],
        stderr_tail=data["stderr_tail"],
        timed_out=data["timed_out"],
        wall_time=float(data.get("wall_time", 0.0)),
        runs=int(data.get("runs", 1)),
    )


def replay_traces(record_path: str | Path) -> RunOutcome:
    """Rebuild a RunOutcome from a record file without spawning anything."""
    try:
        data = json.loads(Path(record_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RecordError(f"{record_path}: not valid JSON: {exc}") from None
    return record_to_outcome(data)
