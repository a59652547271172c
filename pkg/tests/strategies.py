"""Hypothesis strategies and random fixture builders shared across test modules."""

from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from hse.personicle import Event, StreamSeries
from hse.rules import And, Compare, Detector, EventPredicate, Not, Or

STREAMS = ("HR", "Power", "Altitude")
EVENT_TYPES = ("Cycling", "Running")

numbers = st.one_of(
    st.integers(-500, 500).map(float),
    st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False),
)
compare = st.builds(Compare, st.sampled_from(STREAMS), st.sampled_from([">", ">=", "<", "<=", "=="]), numbers,
                    st.sampled_from([None, "W", "bpm", "m"]))
detector = st.one_of(
    st.builds(Detector, st.just("detect-spike"), st.sampled_from(STREAMS),
              st.sampled_from([(), (("delta", 20.0),), (("window_s", 5.0), ("delta", 10.0))])),
    st.builds(Detector, st.just("detect-climb"), st.sampled_from(STREAMS),
              st.sampled_from([(), (("gain_m", 3.0),), (("window_s", 30.0),)])),
)
leaf = st.one_of(compare, detector, st.builds(EventPredicate, st.sampled_from(EVENT_TYPES)))
ast = st.recursive(
    leaf,
    lambda inner: st.one_of(st.builds(Or, inner, inner), st.builds(And, inner, inner), st.builds(Not, inner)),
    max_leaves=8,
)


def random_ast(rng: np.random.Generator, depth: int = 3):
    """A random expression over the fixture streams, using thresholds that fire sometimes."""
    r = rng.random()
    if depth == 0 or r < 0.35:
        k = rng.integers(3)
        if k == 0:
            s = STREAMS[rng.integers(3)]
            centre = {"HR": 140.0, "Power": 250.0, "Altitude": 210.0}[s]
            op = (">", ">=", "<", "<=")[rng.integers(4)]
            return Compare(s, op, float(round(centre + rng.normal(0, 20))))
        if k == 1:
            s = STREAMS[rng.integers(3)]
            if rng.random() < 0.5:
                return Detector("detect-spike", s, (("delta", float(rng.integers(5, 25))),))
            return Detector("detect-climb", s, (("gain_m", float(rng.integers(2, 10))),))
        return EventPredicate(EVENT_TYPES[rng.integers(2)])
    if r < 0.5:
        return Not(random_ast(rng, depth - 1))
    cls = Or if r < 0.75 else And
    return cls(random_ast(rng, depth - 1), random_ast(rng, depth - 1))


def random_fixture(rng: np.random.Generator, n: int, t0: int = 1_000_000):
    """Irregularly sampled HR/Power/Altitude streams plus a few Cycling/Running events."""
    streams = {}
    for name, centre, step in (("HR", 140.0, 4.0), ("Power", 250.0, 40.0), ("Altitude", 210.0, 1.0)):
        gaps = rng.choice([1, 1, 1, 2, 3], size=n)
        t = t0 + int(rng.integers(0, 20)) + np.cumsum(gaps) - gaps[0]
        v = centre + np.cumsum(rng.normal(0, step, n))
        v = np.round(v, 1)
        streams[name] = StreamSeries(name, "u", t, v)
    horizon = int(max(s.t[-1] for s in streams.values())) - t0
    events = []
    for i in range(int(rng.integers(0, 4))):
        a = t0 + int(rng.integers(0, horizon + 1))
        b = a + int(rng.integers(0, max(horizon // 3, 1) + 1))
        events.append(Event(EVENT_TYPES[rng.integers(2)], f"e{i}", a, b))
    return streams, events, (t0, t0 + horizon)


def as_samples(streams):
    return {k: list(zip(s.t.tolist(), s.values.tolist())) for k, s in streams.items()}


def as_spans(events):
    return [(e.event_type, e.start, e.end) for e in events]


def random_dag_block(rng: np.random.Generator, n: int = 50, p: float = 0.08):
    """A block of ``n`` nodes with random forward edges of every propagating transform kind."""
    from hse.gnb import GraphBlock, GraphEdge, GraphNode

    block = GraphBlock("dag")
    for i in range(n):
        block.add_node(GraphNode(f"n{i:02d}", attributes={"x": float(rng.uniform(0, 1)),
                                                          "y": float(rng.uniform(0, 1))}))
    k = 0
    for j in range(1, n):
        for i in range(j):
            if rng.random() >= p:
                continue
            kind = ("copy", "linear", "product", "weighted-sum", "signed-activation")[rng.integers(5)]
            params = {}
            if kind == "linear":
                params = {"a": float(rng.normal()), "b": float(rng.normal())}
            elif kind == "product":
                other = int(rng.integers(0, j))
                params = {"other": f"n{other:02d}.y"}
            target_attr = "x" if kind != "signed-activation" else "y"
            block.add_edge(GraphEdge(f"e{k}", f"n{i:02d}", f"n{j:02d}", "x", target_attr,
                                     {"kind": kind, "params": params}, float(rng.uniform(0.1, 0.9)),
                                     int(rng.choice([-1, 1]))))
            k += 1
    return block.validate()


def dependency_graph(block):
    """Node -> set of nodes it depends on (edge sources and product/ratio operands)."""
    deps = {nid: set() for nid in block.nodes}
    for e in block.edges:
        if e.source != e.target:
            deps[e.target].add(e.source)
        other = e.other_ref()
        if other and other[0] != e.target:
            deps[e.target].add(other[0])
    return deps


def random_topological_order(block, rng: np.random.Generator) -> list[str]:
    deps = {k: set(v) for k, v in dependency_graph(block).items()}
    order = []
    while deps:
        ready = sorted(k for k, v in deps.items() if not v)
        pick = ready[rng.integers(len(ready))]
        order.append(pick)
        del deps[pick]
        for v in deps.values():
            v.discard(pick)
    return order
