"""Graph network blocks: nested directed multigraphs with typed edge transforms.

A block holds nodes (attribute mappings), edges (transforms from a source
attribute to a target attribute) and global reducers that summarise the
block. A node may own a nested block; the nested block's globals become
attributes of the owning node.

One update cycle (:func:`update_block`):

1. time step: attributes with a time constant relax toward baseline;
2. inputs overwrite their attributes (event-derived priority);
3. edges propagate in topological order of the strongly-connected-component
   condensation; components with cycles iterate to a fixed point;
4. nested blocks update before the owning node's outgoing edges fire;
5. globals are recomputed.

Incoming edges on one target attribute combine as follows. Each edge
contributes ``sign * weight * f(source)`` where ``f`` is the transform.
If any of them is ``signed-activation`` the attribute becomes
``clamp(start + sum, 0, 1)`` with ``start`` its value when propagation
began; otherwise it becomes the plain sum.

Attributes pinned by an observation or input are never overwritten by
decay or propagation within the cycle in which they were pinned.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import networkx as nx

log = logging.getLogger(__name__)

LAYERS = ("event-interface", "molecular", "tissue", "organ", "system", "utility")
REDUCERS = ("sum", "mean", "min", "max", "weighted-sum")

# Observation priority; propagation and decay rank below all of these.
PRIORITY = {"event": 1, "biology": 2, "utility": 3}

# Declared knowledge constants; not given numerically in the source material.
CO_REST_L_PER_KG = 0.070
VO2MAX_SLOPE = 10.8
VO2MAX_INTERCEPT = 7.0

FIXED_POINT_ROUNDS = 10
FIXED_POINT_TOL = 1e-6


class GraphError(Exception):
    pass


_REQUIRED_PARAMS = {
    "copy": (),
    "linear": ("a", "b"),
    "product": ("other",),
    "ratio": ("other",),
    "weighted-sum": (),
    "signed-activation": (),
    "decay-to-baseline": (),
}


@dataclass
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _REQUIRED_PARAMS:
            raise GraphError(f"unknown transform kind {self.kind!r}")
        missing = [p for p in _REQUIRED_PARAMS[self.kind] if p not in self.params]
        if missing:
            raise GraphError(f"transform {self.kind} missing params {missing}")

    @classmethod
    def parse(cls, spec) -> "TransformSpec":
        if isinstance(spec, TransformSpec):
            return spec
        if isinstance(spec, str):
            return cls(spec)
        spec = dict(spec)
        return cls(spec.pop("kind"), spec.pop("params", spec))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass
class GraphNode:
    id: str
    layer: str = "system"
    attributes: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    tau_days: dict = field(default_factory=dict)
    nested_block: "GraphBlock | None" = None
    tags: set = field(default_factory=set)
    units: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.id or "." in self.id or "/" in self.id:
            raise GraphError(f"invalid node id {self.id!r} ('.' and '/' are reserved)")
        if self.layer not in LAYERS:
            raise GraphError(f"node {self.id}: unknown layer {self.layer!r}")
        self.tags = set(self.tags)
        for name in (*self.baseline, *self.tau_days):
            if name not in self.attributes:
                raise GraphError(f"node {self.id}: baseline/tau for unknown attribute {name!r}")
        for name, tau in self.tau_days.items():
            if not tau > 0:
                raise GraphError(f"node {self.id}: tau_days[{name}] must be positive")


@dataclass
class GraphEdge:
    id: str
    source: str
    target: str
    source_attr: str
    target_attr: str
    transform: TransformSpec = field(default_factory=lambda: TransformSpec("copy"))
    weight: float = 1.0
    sign: int = 1
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.transform = TransformSpec.parse(self.transform)
        if self.sign not in (1, -1):
            raise GraphError(f"edge {self.id}: sign must be +1 or -1")
        if not math.isfinite(self.weight):
            raise GraphError(f"edge {self.id}: weight must be finite")
        if isinstance(self.provenance, str):
            self.provenance = [self.provenance]

    @property
    def is_decay(self) -> bool:
        return self.transform.kind == "decay-to-baseline"

    def other_ref(self) -> tuple[str, str] | None:
        """(node, attr) of the second operand of product/ratio edges."""
        if self.transform.kind not in ("product", "ratio"):
            return None
        other = self.transform.params["other"]
        if "." in other:
            node, attr = other.split(".", 1)
            return node, attr
        return self.source, other


@dataclass
class GlobalReducer:
    reducer: str
    attr: str
    nodes: list | None = None
    tag: str | None = None
    weights: dict | None = None

    def __post_init__(self):
        if self.reducer not in REDUCERS:
            raise GraphError(f"unknown reducer {self.reducer!r}")
        if self.reducer == "weighted-sum" and not self.weights:
            raise GraphError("weighted-sum reducer needs weights")

    def select(self, block: "GraphBlock") -> list[str]:
        if self.nodes is not None:
            ids = list(self.nodes)
        elif self.weights is not None:
            ids = list(self.weights)
        elif self.tag is not None:
            ids = [n.id for n in block.nodes.values() if self.tag in n.tags]
        else:
            ids = [n.id for n in block.nodes.values() if self.attr in n.attributes]
        return sorted(ids)

    def apply(self, block: "GraphBlock") -> float:
        ids = self.select(block)
        vals = [block.nodes[i].attributes[self.attr] for i in ids]
        if self.reducer == "sum":
            return float(sum(vals))
        if self.reducer == "mean":
            return float(sum(vals) / len(vals))
        if self.reducer == "min":
            return float(min(vals))
        if self.reducer == "max":
            return float(max(vals))
        return float(sum(self.weights[i] * v for i, v in zip(ids, vals)))

    def to_dict(self) -> dict:
        d = {"reducer": self.reducer, "attr": self.attr}
        for k in ("nodes", "tag", "weights"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d


def _split_ref(ref) -> tuple[list[str], str]:
    """``"a/b.attr"`` or ``("a/b", "attr")`` -> (["a", "b"], "attr")."""
    if isinstance(ref, tuple):
        path, attr = ref
    else:
        if "." not in ref:
            raise GraphError(f"attribute reference {ref!r} must look like node.attr")
        path, attr = ref.rsplit(".", 1)
    return path.split("/"), attr


@dataclass
class GraphBlock:
    id: str
    nodes: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)
    global_reducers: dict = field(default_factory=dict)
    globals: dict = field(default_factory=dict)
    # inner "node.attr" <- parent "node.attr"; only meaningful for nested blocks
    imports: dict = field(default_factory=dict)
    pinned: dict = field(default_factory=dict)
    last_pinned: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def __post_init__(self):
        if isinstance(self.nodes, (list, tuple)):
            self.nodes = {n.id: n for n in self.nodes}

    # -- construction ---------------------------------------------------------
    def add_node(self, node: GraphNode) -> GraphNode:
        if node.id in self.nodes:
            raise GraphError(f"block {self.id}: duplicate node {node.id!r}")
        self.nodes[node.id] = node
        return node

    def add_edge(self, edge: GraphEdge) -> GraphEdge:
        if any(e.id == edge.id for e in self.edges):
            raise GraphError(f"block {self.id}: duplicate edge {edge.id!r}")
        self.edges.append(edge)
        if edge.is_decay:
            tau = edge.transform.params.get("tau_days")
            if tau is not None:
                node = self.nodes[edge.source]
                node.tau_days[edge.source_attr] = float(tau)
        return edge

    def validate(self) -> "GraphBlock":
        for e in self.edges:
            for nid, attr in ((e.source, e.source_attr), (e.target, e.target_attr)):
                if nid not in self.nodes:
                    raise GraphError(f"edge {e.id}: unknown node {nid!r}")
                if attr not in self.nodes[nid].attributes:
                    raise GraphError(f"edge {e.id}: node {nid} has no attribute {attr!r}")
            other = e.other_ref()
            if other and (other[0] not in self.nodes or other[1] not in self.nodes[other[0]].attributes):
                raise GraphError(f"edge {e.id}: unresolved operand {other[0]}.{other[1]}")
            if e.is_decay and (e.source != e.target or e.source_attr not in self.nodes[e.source].tau_days):
                raise GraphError(f"edge {e.id}: decay-to-baseline must be a self-edge on an attribute with tau_days")
        for name, r in self.global_reducers.items():
            ids = r.select(self)
            if not ids:
                raise GraphError(f"block {self.id}: global {name!r} selects no nodes")
            for i in ids:
                if i not in self.nodes or r.attr not in self.nodes[i].attributes:
                    raise GraphError(f"block {self.id}: global {name!r} cannot read {i}.{r.attr}")
        for inner in self.imports:
            self.resolve(inner)
        for n in self.nodes.values():
            if n.nested_block is not None:
                n.nested_block.validate()
                for outer in n.nested_block.imports.values():
                    self.resolve(outer)
        return self

    # -- addressing -----------------------------------------------------------
    def resolve(self, ref) -> tuple["GraphBlock", GraphNode, str]:
        path, attr = _split_ref(ref)
        block = self
        for i, nid in enumerate(path):
            if nid not in block.nodes:
                raise GraphError(f"unresolved node {'/'.join(path[:i + 1])!r} in block {self.id}")
            node = block.nodes[nid]
            if i < len(path) - 1:
                if node.nested_block is None:
                    raise GraphError(f"node {nid!r} has no nested block")
                block = node.nested_block
        if attr not in node.attributes:
            raise GraphError(f"node {'/'.join(path)!r} has no attribute {attr!r}")
        return block, node, attr

    def get(self, ref) -> float:
        _, node, attr = self.resolve(ref)
        return node.attributes[attr]

    def iter_blocks(self):
        yield self
        for n in self.nodes.values():
            if n.nested_block is not None:
                yield from n.nested_block.iter_blocks()

    def iter_nodes(self, prefix: str = ""):
        for nid, n in self.nodes.items():
            yield prefix + nid, n
            if n.nested_block is not None:
                yield from n.nested_block.iter_nodes(prefix + nid + "/")

    def attributes(self) -> dict[str, float]:
        """Flat ``path.attr -> value`` view over this block and all nested blocks."""
        return {f"{p}.{a}": v for p, n in self.iter_nodes() for a, v in sorted(n.attributes.items())}

    def copy(self) -> "GraphBlock":
        return copy.deepcopy(self)

    @property
    def converged(self) -> bool:
        return not any(f.startswith("non-converged") for b in self.iter_blocks() for f in b.flags)

    # -- serialisation ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "nodes": [_node_to_dict(n) for n in self.nodes.values()],
            "edges": [_edge_to_dict(e) for e in self.edges],
            "global_reducers": {k: r.to_dict() for k, r in self.global_reducers.items()},
            "globals": dict(self.globals),
            "imports": dict(self.imports),
            "pinned": sorted(self.last_pinned),
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GraphBlock":
        block = cls(d["id"])
        for nd in d.get("nodes", ()):
            block.add_node(_node_from_dict(nd))
        for ed in d.get("edges", ()):
            block.add_edge(_edge_from_dict(ed))
        block.global_reducers = {k: GlobalReducer(**v) for k, v in d.get("global_reducers", {}).items()}
        block.globals = dict(d.get("globals", {}))
        block.imports = dict(d.get("imports", {}))
        block.last_pinned = list(d.get("pinned", ()))
        block.flags = list(d.get("flags", ()))
        return block.validate()

    @classmethod
    def from_json(cls, text: str) -> "GraphBlock":
        return cls.from_dict(json.loads(text))


def _node_to_dict(n: GraphNode) -> dict:
    d = {"id": n.id, "layer": n.layer, "attributes": dict(n.attributes), "tags": sorted(n.tags)}
    for k in ("baseline", "tau_days", "units"):
        if getattr(n, k):
            d[k] = dict(getattr(n, k))
    if n.nested_block is not None:
        d["nested"] = n.nested_block.to_dict()
    return d


def _node_from_dict(d: Mapping) -> GraphNode:
    nested = d.get("nested")
    return GraphNode(
        d["id"], d.get("layer", "system"), {k: float(v) for k, v in d.get("attributes", {}).items()},
        dict(d.get("baseline", {})), dict(d.get("tau_days", {})),
        GraphBlock.from_dict(nested) if nested else None, set(d.get("tags", ())), dict(d.get("units", {})),
    )


def _edge_to_dict(e: GraphEdge) -> dict:
    return {
        "id": e.id, "source": e.source, "target": e.target, "source_attr": e.source_attr,
        "target_attr": e.target_attr, "transform": e.transform.to_dict(), "weight": e.weight,
        "sign": e.sign, "provenance": list(e.provenance),
    }


def _edge_from_dict(d: Mapping) -> GraphEdge:
    return GraphEdge(d["id"], d["source"], d["target"], d["source_attr"], d["target_attr"],
                     TransformSpec.parse(d.get("transform", "copy")), float(d.get("weight", 1.0)),
                     int(d.get("sign", 1)), list(d.get("provenance", [])) if not isinstance(
                         d.get("provenance"), str) else [d["provenance"]])


# -- cycle operations -------------------------------------------------------------

def apply_time_decay(node: GraphNode, dt_days: float, skip: Iterable[str] = ()) -> GraphNode:
    """Exponential relaxation of every attribute with a time constant toward its baseline."""
    skip = set(skip)
    for attr, tau in node.tau_days.items():
        if attr in skip:
            continue
        x = node.attributes[attr]
        b = node.baseline.get(attr, 0.0)
        node.attributes[attr] = x + (b - x) * (-math.expm1(-dt_days / tau))
    return node


def _pin(block: GraphBlock, node: GraphNode, attr: str, value: float, kind: str) -> bool:
    key = f"{node.id}.{attr}"
    level = PRIORITY[kind]
    held = block.pinned.get(key)
    if held is not None:
        held_level = PRIORITY[held]
        if held_level > level:
            block.log.append(f"ignored {kind} value for {key}: already pinned by {held}")
            return False
        if held_level == level:
            msg = f"re-observed {key} ({kind}); last write wins: {node.attributes[attr]!r} -> {value!r}"
            block.log.append(msg)
            log.info(msg)
    node.attributes[attr] = float(value)
    block.pinned[key] = kind
    return True


def set_observation(block: GraphBlock, ref, value: float, kind: str = "biology") -> GraphBlock:
    """Pin an observed value for the current cycle.

    Priority: utility observation > biology observation > event-derived
    input > decay/propagation. Within one priority the last write wins.
    """
    if kind not in ("biology", "utility"):
        raise GraphError(f"observation kind must be 'biology' or 'utility', got {kind!r}")
    owner, node, attr = block.resolve(ref)
    _pin(owner, node, attr, value, kind)
    return block


def _edge_value(e: GraphEdge, nodes: Mapping[str, GraphNode]) -> float:
    src = nodes[e.source].attributes[e.source_attr]
    kind, p = e.transform.kind, e.transform.params
    if kind == "linear":
        f = p["a"] * src + p["b"]
    elif kind in ("product", "ratio"):
        onode, oattr = e.other_ref()
        other = nodes[onode].attributes[oattr]
        scale = p.get("scale", 1.0)
        if kind == "product":
            f = scale * src * other
        elif other == 0:
            raise GraphError(f"edge {e.id}: division by zero ({onode}.{oattr} == 0)")
        else:
            f = scale * src / other
    else:  # copy, weighted-sum, signed-activation
        f = src
    return e.sign * e.weight * f


class _Plan:
    """Dependency structure of one block, cached per propagation."""

    def __init__(self, block: GraphBlock, order: Sequence[str] | None):
        g = nx.MultiDiGraph()
        g.add_nodes_from(block.nodes)
        self.incoming: dict[str, dict[str, list[GraphEdge]]] = {n: {} for n in block.nodes}
        for e in block.edges:
            if e.is_decay:
                continue
            g.add_edge(e.source, e.target)
            other = e.other_ref()
            if other:
                g.add_edge(other[0], e.target)
            self.incoming[e.target].setdefault(e.target_attr, []).append(e)
        for n in block.nodes.values():
            if n.nested_block is not None:
                for outer in n.nested_block.imports.values():
                    g.add_edge(_split_ref(outer)[0][0], n.id)
        cond = nx.condensation(g)
        members = cond.graph["mapping"]
        if order is not None:
            pos = {nid: i for i, nid in enumerate(order)}
            if set(pos) != set(block.nodes):
                raise GraphError("order must list every node exactly once")
            for u, v in g.edges():
                if u != v and members[u] != members[v] and pos[u] > pos[v]:
                    raise GraphError(f"order is not topological: {u} must precede {v}")
            comp_order = sorted(cond.nodes, key=lambda c: min(pos[m] for m in cond.nodes[c]["members"]))
        else:
            comp_order = list(nx.lexicographical_topological_sort(
                cond, key=lambda c: min(cond.nodes[c]["members"])))
        self.components = []
        for c in comp_order:
            ms = cond.nodes[c]["members"]
            cyclic = len(ms) > 1 or any(g.has_edge(m, m) for m in ms)
            ids = sorted(ms) if order is None else sorted(ms, key=lambda m: pos[m])
            self.components.append((ids, cyclic))


def _snapshot(block: GraphBlock) -> dict:
    return {nid: dict(n.attributes) for nid, n in block.nodes.items()}


def _compute_node(block: GraphBlock, plan: _Plan, nid: str, start: dict) -> dict[str, float]:
    new = {}
    for attr, edges in plan.incoming[nid].items():
        if f"{nid}.{attr}" in block.pinned:
            continue
        total = sum(_edge_value(e, block.nodes) for e in edges)
        if any(e.transform.kind == "signed-activation" for e in edges):
            total = min(max(start[nid][attr] + total, 0.0), 1.0)
        new[attr] = total
    return new


def _run_nested(parent: GraphBlock, node: GraphNode, rounds: int, tol: float) -> None:
    inner = node.nested_block
    for inner_ref, outer_ref in inner.imports.items():
        _, inode, iattr = inner.resolve(inner_ref)
        if f"{inode.id}.{iattr}" not in inner.pinned:
            inode.attributes[iattr] = parent.get(outer_ref)
    _propagate(inner, None, rounds, tol)
    _recompute_globals(inner)
    for name, value in inner.globals.items():
        if f"{node.id}.{name}" not in parent.pinned:
            node.attributes[name] = value


def _propagate(block: GraphBlock, order: Sequence[str] | None,
               rounds: int = FIXED_POINT_ROUNDS, tol: float = FIXED_POINT_TOL) -> None:
    plan = _Plan(block, order)
    start = block._start  # set by _begin
    for ids, cyclic in plan.components:
        if not cyclic:
            nid = ids[0]
            block.nodes[nid].attributes.update(_compute_node(block, plan, nid, start))
            if block.nodes[nid].nested_block is not None:
                _run_nested(block, block.nodes[nid], rounds, tol)
            continue
        converged = False
        for _ in range(rounds):
            before = {nid: dict(block.nodes[nid].attributes) for nid in ids}
            for nid in ids:  # Gauss-Seidel sweep: later members see this round's values
                block.nodes[nid].attributes.update(_compute_node(block, plan, nid, start))
                if block.nodes[nid].nested_block is not None:
                    _run_nested(block, block.nodes[nid], rounds, tol)
            change = max((abs(block.nodes[n].attributes[a] - before[n][a])
                          for n in ids for a in before[n]), default=0.0)
            if change < tol:
                converged = True
                break
        if not converged:
            flag = f"non-converged:{','.join(ids)}"
            block.flags.append(flag)
            warnings.warn(f"block {block.id}: {flag} after {rounds} rounds", RuntimeWarning, stacklevel=3)


def _recompute_globals(block: GraphBlock) -> None:
    block.globals = {name: r.apply(block) for name, r in sorted(block.global_reducers.items())}


def _begin(block: GraphBlock, dt_days: float) -> None:
    for b in block.iter_blocks():
        b.flags = []
        for nid, node in b.nodes.items():
            apply_time_decay(node, dt_days, skip=[a for a in node.tau_days if f"{nid}.{a}" in b.pinned])


def _finish(block: GraphBlock) -> None:
    for b in block.iter_blocks():
        b.last_pinned = sorted(b.pinned)
        b.pinned = {}
        b.__dict__.pop("_start", None)


def update_block(block: GraphBlock, inputs: Mapping | None = None, dt_days: float = 0.0,
                 order: Sequence[str] | None = None, rounds: int = FIXED_POINT_ROUNDS,
                 tol: float = FIXED_POINT_TOL) -> GraphBlock:
    """Run one update cycle in place and return ``block``.

    ``inputs`` maps ``"node.attr"`` (``"outer/inner.attr"`` for nested
    blocks) to values. ``order`` optionally fixes the node order used for
    propagation; it must be a topological order of the block's dependency
    graph (cycles may be listed in any internal order). Strongly connected
    components iterate to a fixed point for at most ``rounds`` sweeps
    (tolerance ``tol``); otherwise the block is flagged ``non-converged``.
    """
    resolved = []
    for ref, value in (inputs or {}).items():
        owner, node, attr = block.resolve(ref)  # raises before any mutation
        resolved.append((owner, node, attr, value))
    _begin(block, dt_days)
    for owner, node, attr, value in resolved:
        _pin(owner, node, attr, value, "event")
    for b in block.iter_blocks():
        b._start = _snapshot(b)
    _propagate(block, order, rounds, tol)
    _recompute_globals(block)
    _finish(block)
    return block


# -- domain helpers ------------------------------------------------------------------

@dataclass(frozen=True)
class GeneBalance:
    day: object
    healthy: float
    pathological: float

    @property
    def net(self) -> float:
        return self.healthy - self.pathological

    def __iter__(self):
        return iter((self.healthy, self.pathological, self.net))


def gene_balance(block: GraphBlock, day=None, attr: str = "activation") -> GeneBalance:
    """Summed activation of healthy- vs pathological-tagged gene nodes (all nesting levels)."""
    healthy = pathological = 0.0
    found = False
    for _, node in block.iter_nodes():
        if "healthy-gene" in node.tags:
            healthy += node.attributes.get(attr, 0.0)
            found = True
        if "pathological-gene" in node.tags:
            pathological += node.attributes.get(attr, 0.0)
            found = True
    if not found:
        warnings.warn(f"block {block.id}: no healthy-/pathological-gene tagged nodes", RuntimeWarning, stacklevel=2)
    return GeneBalance(day, healthy, pathological)


def estimate_vo2max_from_power(cp4_w: float, mass_kg: float, slope: float = VO2MAX_SLOPE,
                               intercept: float = VO2MAX_INTERCEPT) -> float:
    """VO2max (mL/kg/min) from best 4-minute power."""
    if mass_kg <= 0:
        raise ValueError(f"mass_kg must be positive, got {mass_kg}")
    if cp4_w < 0:
        raise ValueError(f"cp4_w must be non-negative, got {cp4_w}")
    return slope * cp4_w / mass_kg + intercept


def resting_cardiac_output(mass_kg: float, k: float = CO_REST_L_PER_KG) -> float:
    """Resting cardiac output in L/min."""
    if mass_kg <= 0:
        raise ValueError(f"mass_kg must be positive, got {mass_kg}")
    return k * mass_kg


def stroke_volume(co_l_min: float, hr_bpm: float) -> float:
    """Stroke volume in mL from cardiac output (L/min) and heart rate."""
    if hr_bpm <= 0:
        raise ValueError(f"heart rate must be positive, got {hr_bpm}")
    if co_l_min < 0:
        raise ValueError(f"cardiac output must be non-negative, got {co_l_min}")
    return 1000.0 * co_l_min / hr_bpm
