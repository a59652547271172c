"""Interface-event rule language.

A rule names a condition over 1 Hz streams and interval events::

    VolOverload := (HR > 140) ∨ (Cycling ∧ detect-climb(Altitude))
    PressOverload := detect-spike(HR, delta=20) OR (Power > 400 W)

Grammar::

    rule     := IDENT ":=" or_expr
    or_expr  := and_expr { ("∨" | "OR") and_expr }
    and_expr := unary { ("∧" | "AND") unary }
    unary    := ["NOT" | "¬"] primary
    primary  := compare | detector | IDENT | "(" or_expr ")"
    compare  := IDENT REL NUMBER [UNIT]
    detector := DETNAME "(" IDENT { "," IDENT "=" NUMBER } ")"

A bare IDENT is an event predicate: true while an event of that type is
in progress. Unit suffixes after numbers are kept only as annotations.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .personicle import Event, StreamSeries, hold_on_grid


class RuleError(Exception):
    pass


class RuleSyntaxError(RuleError):
    def __init__(self, message: str, line: int, column: int, text: str = ""):
        self.message, self.line, self.column, self.text = message, line, column, text
        super().__init__(f"line {line}, column {column}: {message}")


class EvaluationError(RuleError):
    pass


# -- AST ------------------------------------------------------------------------

@dataclass(frozen=True)
class Or:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class And:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Not:
    operand: "Node"


@dataclass(frozen=True)
class Compare:
    stream: str
    op: str
    value: float
    unit: str | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Detector:
    name: str
    stream: str
    params: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class EventPredicate:
    event_type: str


Node = Union[Or, And, Not, Compare, Detector, EventPredicate]


@dataclass(frozen=True)
class Rule:
    name: str
    expr: Node
    min_duration: int = 5
    annotations: tuple[str, ...] = ()

    @property
    def streams(self) -> set[str]:
        return referenced_streams(self.expr)


@dataclass(frozen=True)
class InterfaceEvent:
    rule_name: str
    start: int
    end: int
    attributes: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("interface event ends before it starts")

    @property
    def duration(self) -> int:
        return self.end - self.start


def referenced_streams(node: Node) -> set[str]:
    if isinstance(node, (Or, And)):
        return referenced_streams(node.left) | referenced_streams(node.right)
    if isinstance(node, Not):
        return referenced_streams(node.operand)
    if isinstance(node, (Compare, Detector)):
        return {node.stream}
    return set()


# -- lexer ----------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<define>:=)
  | (?P<rel>>=|<=|==|≥|≤|>|<)
  | (?P<number>[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*(?:-[A-Za-z_][A-Za-z0-9_]*)*)
  | (?P<or>∨)
  | (?P<and>∧)
  | (?P<not>¬)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<comma>,)
  | (?P<eq>=)
  | (?P<unit>[%µ°/³²]+[A-Za-z0-9%µ°/³²]*)
    """,
    re.VERBOSE,
)

_KEYWORDS = {"OR": "or", "AND": "and", "NOT": "not"}
_REL_NORMAL = {"≥": ">=", "≤": "<="}

DETECTORS = {
    "detect-spike": {"window_s": 10.0, "delta": 15.0},
    "detect-climb": {"window_s": 60.0, "gain_m": 8.0},
}


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    column: int  # 1-based


def tokenize(text: str, line: int = 1) -> list[Token]:
    pos, out = 0, []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", line, pos + 1, text)
        kind = m.lastgroup
        if kind != "ws":
            word = m.group()
            if kind == "ident" and word in _KEYWORDS:
                kind = _KEYWORDS[word]
            out.append(Token(kind, word, pos + 1))
        pos = m.end()
    out.append(Token("eof", "", len(text) + 1))
    return out


# -- parser ---------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str, line: int, streams: set[str] | None):
        self.text, self.line, self.streams = text, line, streams
        self.tokens = tokenize(text, line)
        self.i = 0
        self.annotations: list[str] = []

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise RuleSyntaxError(f"{msg}, found {found}", self.line, tok.column, self.text)

    def expect(self, kind: str, what: str) -> Token:
        if self.tok.kind != kind:
            self.error(f"expected {what}")
        tok = self.tok
        self.i += 1
        return tok

    def check_stream(self, tok: Token):
        if self.streams is not None and tok.text not in self.streams:
            raise RuleSyntaxError(f"unknown stream identifier {tok.text!r}", self.line, tok.column, self.text)

    def rule(self) -> tuple[str, Node]:
        name = self.expect("ident", "rule name").text
        self.expect("define", "':='")
        expr = self.or_expr()
        if self.tok.kind != "eof":
            self.error("expected operator or end of rule")
        return name, expr

    def or_expr(self) -> Node:
        node = self.and_expr()
        while self.tok.kind == "or":
            self.i += 1
            node = Or(node, self.and_expr())
        return node

    def and_expr(self) -> Node:
        node = self.unary()
        while self.tok.kind == "and":
            self.i += 1
            node = And(node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tok.kind == "not":
            self.i += 1
            return Not(self.primary())
        return self.primary()

    def primary(self) -> Node:
        tok = self.tok
        if tok.kind == "lparen":
            self.i += 1
            node = self.or_expr()
            self.expect("rparen", "')'")
            return node
        if tok.kind != "ident":
            self.error("expected comparison, detector, event type or '('")
        nxt = self.tokens[self.i + 1]
        if nxt.kind == "lparen":
            return self.detector()
        self.i += 1
        if nxt.kind == "rel":
            self.check_stream(tok)
            op = self.tokens[self.i].text
            self.i += 1
            num = self.expect("number", "number after comparison operator")
            unit = None
            if self.tok.kind in ("ident", "unit"):
                unit = self.tok.text
                self.annotations.append(f"unit {unit!r} discarded after {tok.text} {op} {num.text}")
                self.i += 1
            return Compare(tok.text, _REL_NORMAL.get(op, op), float(num.text), unit)
        return EventPredicate(tok.text)

    def detector(self) -> Node:
        name_tok = self.expect("ident", "detector name")
        if name_tok.text not in DETECTORS:
            raise RuleSyntaxError(f"unknown detector {name_tok.text!r}", self.line, name_tok.column, self.text)
        self.expect("lparen", "'('")
        stream = self.expect("ident", "stream identifier")
        self.check_stream(stream)
        params = []
        while self.tok.kind == "comma":
            self.i += 1
            key = self.expect("ident", "parameter name")
            if key.text not in DETECTORS[name_tok.text]:
                raise RuleSyntaxError(f"unknown parameter {key.text!r} for {name_tok.text}",
                                      self.line, key.column, self.text)
            self.expect("eq", "'='")
            params.append((key.text, float(self.expect("number", "parameter value").text)))
        self.expect("rparen", "')'")
        return Detector(name_tok.text, stream.text, tuple(params))


def parse_expression(text: str, streams: Sequence[str] | None = None) -> Node:
    p = _Parser(text, 1, set(streams) if streams is not None else None)
    node = p.or_expr()
    if p.tok.kind != "eof":
        p.error("expected operator or end of expression")
    return node


def parse_rule(source: str, streams: Sequence[str] | None = None, *, line: int = 1,
               min_duration: int = 5) -> Rule:
    """Parse ``NAME := expr``. ``streams`` (when given) restricts stream identifiers."""
    p = _Parser(source, line, set(streams) if streams is not None else None)
    name, expr = p.rule()
    return Rule(name, expr, min_duration, tuple(p.annotations))


def parse_rules(text: str, streams: Sequence[str] | None = None, min_duration: int = 5) -> list[Rule]:
    """Parse a rule file body: one rule per line, ``#`` starts a comment."""
    rules, seen = [], set()
    for n, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        rule = parse_rule(body, streams, line=n, min_duration=min_duration)
        if rule.name in seen:
            raise RuleSyntaxError(f"duplicate rule name {rule.name!r}", n, 1, raw)
        seen.add(rule.name)
        rules.append(rule)
    return rules


def load_rules(path, streams: Sequence[str] | None = None, min_duration: int = 5) -> list[Rule]:
    return parse_rules(Path(path).read_text(encoding="utf-8"), streams, min_duration)


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() and abs(x) < 1e15 else repr(float(x))


def pretty(node: Node) -> str:
    """Render an AST back to rule text; fully parenthesised binary operators."""
    if isinstance(node, Or):
        return f"({pretty(node.left)} ∨ {pretty(node.right)})"
    if isinstance(node, And):
        return f"({pretty(node.left)} ∧ {pretty(node.right)})"
    if isinstance(node, Not):
        inner = pretty(node.operand)
        return f"¬({inner})" if isinstance(node.operand, Not) else f"¬{inner}"
    if isinstance(node, Compare):
        unit = f" {node.unit}" if node.unit else ""
        return f"{node.stream} {node.op} {_fmt_num(node.value)}{unit}"
    if isinstance(node, Detector):
        args = "".join(f", {k}={_fmt_num(v)}" for k, v in node.params)
        return f"{node.name}({node.stream}{args})"
    if isinstance(node, EventPredicate):
        return node.event_type
    raise TypeError(f"not a rule node: {node!r}")


def format_rule(rule: Rule) -> str:
    return f"{rule.name} := {pretty(rule.expr)}"


# -- detectors --------------------------------------------------------------------

def _require_1hz(series: StreamSeries):
    if len(series) > 1 and np.any(np.diff(series.t) != 1):
        raise ValueError(f"stream {series.stream_id!r} is not on a 1 Hz grid; resample first")


def _as_window(window_s) -> int:
    if window_s <= 0:
        raise ValueError(f"window_s must be positive, got {window_s}")
    if window_s != int(window_s):
        raise ValueError("window_s must be a whole number of seconds")
    return int(window_s)


def spike_mask(values: np.ndarray, window_s: float = 10, delta: float = 15) -> np.ndarray:
    """``values[i] - min(values[i-w .. i]) >= delta`` on a 1 Hz array (window truncated at start)."""
    w = _as_window(window_s)
    v = np.asarray(values, dtype=float)
    if not v.size:
        return np.zeros(0, dtype=bool)
    padded = np.concatenate([np.full(w, np.inf), np.where(np.isnan(v), np.inf, v)])
    trailing_min = np.lib.stride_tricks.sliding_window_view(padded, w + 1).min(axis=1)
    with np.errstate(invalid="ignore"):
        return (v - trailing_min) >= delta


def climb_mask(values: np.ndarray, gain_m: float = 8, window_s: float = 60) -> np.ndarray:
    """``values[i] - values[max(i-w, first)] >= gain_m`` on a 1 Hz array.

    ``first`` is the first non-NaN index, so the window is truncated at the
    start of the data just as the spike detector's is.
    """
    w = _as_window(window_s)
    v = np.asarray(values, dtype=float)
    if not v.size:
        return np.zeros(0, dtype=bool)
    valid = np.flatnonzero(~np.isnan(v))
    first = int(valid[0]) if valid.size else 0
    ref = v[np.maximum(np.arange(v.size) - w, first)]
    with np.errstate(invalid="ignore"):
        return (v - ref) >= gain_m


def detect_spike(series: StreamSeries, window_s: float = 10, delta: float = 15) -> np.ndarray:
    _require_1hz(series)
    return spike_mask(series.values, window_s, delta)


def detect_climb(series: StreamSeries, gain_m: float = 8, window_s: float = 60) -> np.ndarray:
    _require_1hz(series)
    return climb_mask(series.values, gain_m, window_s)


def _detector_params(node: Detector) -> dict:
    params = dict(DETECTORS[node.name])
    params.update(node.params)
    return params


def _lookback(node: Node) -> int:
    if isinstance(node, (Or, And)):
        return max(_lookback(node.left), _lookback(node.right))
    if isinstance(node, Not):
        return _lookback(node.operand)
    if isinstance(node, Detector):
        return int(_detector_params(node)["window_s"])
    return 0


# -- evaluation -----------------------------------------------------------------

_OPS = {
    ">": np.greater, ">=": np.greater_equal, "<": np.less,
    "<=": np.less_equal, "==": np.equal,
}


def _truth(node: Node, grid: np.ndarray, cols: Mapping[str, np.ndarray],
           events: Sequence[Event]) -> np.ndarray:
    if isinstance(node, Or):
        return _truth(node.left, grid, cols, events) | _truth(node.right, grid, cols, events)
    if isinstance(node, And):
        return _truth(node.left, grid, cols, events) & _truth(node.right, grid, cols, events)
    if isinstance(node, Not):
        return ~_truth(node.operand, grid, cols, events)
    if isinstance(node, Compare):
        with np.errstate(invalid="ignore"):
            return _OPS[node.op](cols[node.stream], node.value)
    if isinstance(node, Detector):
        p = _detector_params(node)
        if node.name == "detect-spike":
            return spike_mask(cols[node.stream], p["window_s"], p["delta"])
        return climb_mask(cols[node.stream], p["gain_m"], p["window_s"])
    if isinstance(node, EventPredicate):
        out = np.zeros(grid.shape, dtype=bool)
        for e in events:
            if e.event_type == node.event_type:
                out |= (grid >= e.start) & (grid <= e.end)
        return out
    raise TypeError(f"not a rule node: {node!r}")


def truth_series(rule: Rule | Node, streams: Mapping[str, StreamSeries] | Sequence[StreamSeries],
                 events: Sequence[Event], window: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Per-second truth of a rule over ``window`` (inclusive); returns ``(grid, truth)``.

    Streams are held forward onto the 1 Hz grid; a stream has no value
    before its first sample, and comparisons there are false. Detector
    inputs are extended backwards by the detector window so that truth at
    ``t0`` sees the same history as it would mid-stream.
    """
    expr = rule.expr if isinstance(rule, Rule) else rule
    if not isinstance(streams, Mapping):
        streams = {s.stream_id: s for s in streams}
    t0, t1 = window
    if t1 < t0:
        raise ValueError("window end before start")
    missing = sorted(referenced_streams(expr) - set(streams))
    if missing:
        name = rule.name if isinstance(rule, Rule) else "<expr>"
        raise EvaluationError(f"rule {name}: referenced stream(s) absent: {', '.join(missing)}")
    back = _lookback(expr)
    full = np.arange(t0 - back, t1 + 1, dtype=np.int64)
    cols = {sid: hold_on_grid(streams[sid], full) for sid in referenced_streams(expr)}
    truth = _truth(expr, full, cols, events)
    return full[back:], truth[back:]


def runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as half-open index ranges ``[i, j)``."""
    m = np.asarray(mask, dtype=bool)
    if not m.size:
        return []
    d = np.diff(np.concatenate([[0], m.view(np.int8), [0]]))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def evaluate_rule(rule: Rule, streams, events: Sequence[Event], window: tuple[int, int],
                  min_duration: int | None = None) -> list[InterfaceEvent]:
    """Coalesce per-second truth into interface events.

    Each true second ``t`` covers ``[t, t+1)``, so a run of ``n`` true
    seconds yields an event with ``end - start == n``. Runs shorter than
    ``min_duration`` seconds are dropped. Attributes: ``duration`` and
    ``peak_<stream>`` for every compared stream.
    """
    min_duration = rule.min_duration if min_duration is None else min_duration
    if not isinstance(streams, Mapping):
        streams = {s.stream_id: s for s in streams}
    grid, truth = truth_series(rule, streams, events, window)
    compared = sorted(_compared_streams(rule.expr))
    held = {sid: hold_on_grid(streams[sid], grid) for sid in compared}
    out = []
    for i, j in runs(truth):
        if j - i < min_duration:
            continue
        attrs = {"duration": float(j - i)}
        for sid in compared:
            seg = held[sid][i:j]
            if np.any(~np.isnan(seg)):
                attrs[f"peak_{sid}"] = float(np.nanmax(seg))
        out.append(InterfaceEvent(rule.name, int(grid[i]), int(grid[j - 1]) + 1, attrs))
    return out


def _compared_streams(node: Node) -> set[str]:
    if isinstance(node, (Or, And)):
        return _compared_streams(node.left) | _compared_streams(node.right)
    if isinstance(node, Not):
        return _compared_streams(node.operand)
    if isinstance(node, Compare):
        return {node.stream}
    return set()
