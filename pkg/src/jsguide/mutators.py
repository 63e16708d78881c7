"""Mutation boundary: parent source in, mutant source out.

Any callable ``(source, rng) -> str`` works as a mutator. Two are
provided: a small line/token mutator for tests and smoke campaigns, and
an adapter for an external mutation command.
"""

from __future__ import annotations

import random
import re
import subprocess
from typing import Sequence

DEFAULT_SNIPPETS = (
    "gc();",
    "let a = new Array(16).fill(1.1);",
    "let ta = new Float64Array(8);",
    "try { f(); } catch (e) {}",
    "for (let i = 0; i < 100; i++) { o.x = i; }",
    "Object.defineProperty(o, 'x', { get() { return 1; } });",
    "let o = { x: 1, y: 2 };",
    "function f() { return o.x; }",
)

_NUMBER = re.compile(r"\b\d+(?:\.\d+)?\b")
_INTERESTING_NUMBERS = ("0", "1", "-1", "0x7fffffff", "2147483648", "-0", "NaN", "1e308", "65536")


class MutationError(RuntimeError):
    pass


class TokenMutator:
    """Line-level edits plus numeric literal substitution."""

    def __init__(self, snippets: Sequence[str] = DEFAULT_SNIPPETS):
        self.snippets = list(snippets)

    def __call__(self, source: str, rng: random.Random) -> str:
        lines = source.splitlines() or [""]
        op = rng.randrange(5)
        if op == 0:
            lines.insert(rng.randrange(len(lines) + 1), rng.choice(self.snippets))
        elif op == 1 and len(lines) > 1:
            del lines[rng.randrange(len(lines))]
        elif op == 2:
            i = rng.randrange(len(lines))
            lines.insert(i, lines[i])
        elif op == 3:
            i = rng.randrange(len(lines))
            nums = list(_NUMBER.finditer(lines[i]))
            if nums:
                m = rng.choice(nums)
                lines[i] = lines[i][: m.start()] + rng.choice(_INTERESTING_NUMBERS) + lines[i][m.end():]
            else:
                lines.append(rng.choice(self.snippets))
        else:
            i, j = rng.randrange(len(lines)), rng.randrange(len(lines))
            lines[i], lines[j] = lines[j], lines[i]
        return "\n".join(lines) + "\n"


class CommandMutator:
    """Run an external mutator: parent on stdin, mutant on stdout.

    The rng seed for the call is passed as the last argument.
    """

    def __init__(self, argv: Sequence[str], timeout: float = 10.0):
        self.argv = list(argv)
        self.timeout = timeout

    def __call__(self, source: str, rng: random.Random) -> str:
        seed = str(rng.getrandbits(32))
        try:
            proc = subprocess.run(self.argv + [seed], input=source.encode("utf-8"),
                                  capture_output=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise MutationError(f"mutator failed: {exc}") from exc
        if proc.returncode != 0:
            raise MutationError(f"mutator exited {proc.returncode}: {proc.stderr[-200:]!r}")
        return proc.stdout.decode("utf-8", errors="replace")
