"""Token counting and context-budget truncation.

Tokenizers are pluggable handles: a name plus a function mapping text to a
token list with stable byte offsets into the UTF-8 encoding. The reference
tokenizer splits on ASCII whitespace and is what all tests use; model
tokenizers can be plugged in through the subprocess adapter.

The budget policy is reservation-first: instruction, time-series block and
query are counted before the note, and only the note is ever truncated
(from its end, at a token boundary).
"""

from __future__ import annotations

import json
import logging
import re
import subprocess
import threading
from dataclasses import dataclass
from typing import Callable

log = logging.getLogger(__name__)

_WS_TOKEN = re.compile(rb"\S+")


@dataclass(frozen=True)
class Token:
    """One token with byte offsets [start, end) into the UTF-8 text."""

    text: str
    start: int
    end: int


@dataclass(frozen=True)
class TokenizerHandle:
    """Named, stateless tokenization function; shareable across threads."""

    name: str
    tokenize: Callable[[str], list[Token]]


def _whitespace_tokenize(text: str) -> list[Token]:
    data = text.encode("utf-8")
    return [
        Token(m.group(0).decode("utf-8"), m.start(), m.end())
        for m in _WS_TOKEN.finditer(data)
    ]


WHITESPACE = TokenizerHandle("whitespace", _whitespace_tokenize)

_REGISTRY: dict[str, TokenizerHandle] = {"whitespace": WHITESPACE}


def get_tokenizer(name: str) -> TokenizerHandle:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown tokenizer {name!r}; available: {sorted(_REGISTRY)}") from None


class SubprocessTokenizer:
    """Adapter for an external tokenizer over newline-delimited JSON stdio.

    Protocol: one request ``{"text": ...}`` per line on stdin, one response
    ``{"count": N, "offsets": [[start, end], ...]}`` per line on stdout,
    offsets in UTF-8 bytes.
    """

    def __init__(self, argv: list[str], name: str = "subprocess"):
        self.name = name
        self._proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._lock = threading.Lock()

    def tokenize(self, text: str) -> list[Token]:
        with self._lock:
            if self._proc.poll() is not None:
                raise RuntimeError(f"tokenizer subprocess {self.name!r} has exited")
            self._proc.stdin.write(json.dumps({"text": text}) + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError(f"tokenizer subprocess {self.name!r} closed its stdout")
        reply = json.loads(line)
        offsets = reply["offsets"]
        if reply["count"] != len(offsets):
            raise ValueError("tokenizer reply count does not match offsets length")
        data = text.encode("utf-8")
        return [Token(data[s:e].decode("utf-8"), s, e) for s, e in offsets]

    def handle(self) -> TokenizerHandle:
        return TokenizerHandle(self.name, self.tokenize)

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass(frozen=True)
class BudgetPlan:
    """Context budget split: reserved tokens come off the top for the note."""

    max_context: int
    reserved: int

    def __post_init__(self):
        if self.max_context < 0 or self.reserved < 0:
            raise ValueError("max_context and reserved must be >= 0")

    @property
    def available_for_note(self) -> int:
        return max(0, self.max_context - self.reserved)


@dataclass(frozen=True)
class TruncationReport:
    original_tokens: int
    kept_tokens: int
    truncated: bool
    note_dropped: bool


def count_tokens(text: str, tok: TokenizerHandle) -> int:
    return len(tok.tokenize(text))


def truncate_to_fit(
    note: str, plan: BudgetPlan, tok: TokenizerHandle
) -> tuple[str, TruncationReport]:
    """Cut the note to the longest token prefix that fits the plan.

    A note that already fits is returned unchanged (truncation is
    idempotent). A zero-token budget yields an empty note with the report
    flag raised; that case is legal but logged loudly.
    """
    tokens = tok.tokenize(note)
    limit = plan.available_for_note
    if len(tokens) <= limit:
        return note, TruncationReport(len(tokens), len(tokens), False, False)
    if limit == 0:
        log.warning(
            "note dropped entirely: reserved %d tokens leave no room in a %d-token context",
            plan.reserved,
            plan.max_context,
        )
        return "", TruncationReport(len(tokens), 0, True, True)
    kept = tokens[:limit]
    text = note.encode("utf-8")[: kept[-1].end].decode("utf-8")
    return text, TruncationReport(len(tokens), limit, True, False)
