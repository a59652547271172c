"""Knowledge files, intent matching and block instantiation.

A knowledge file is a JSON document with the top-level arrays
``laminae``, ``utility_templates``, ``bio_nodes``, ``bio_edges``,
``genetic_modifiers`` and ``patches``. See ``docs/knowledge-schema.md``
and the bundled ``cycling_cardiac.json``.

Lamina dimensions may use a brace range, ``"cp_{1..18000}"``, which
expands to one dimension per integer.
"""

from __future__ import annotations

import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .gnb import GraphBlock, GraphEdge, GraphError, TransformSpec, _edge_from_dict, _node_from_dict


class KnowledgeError(Exception):
    pass


class SchemaError(KnowledgeError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


# -- domain types ------------------------------------------------------------------

@dataclass
class RegionOfInterest:
    label: str
    bounds: dict  # dimension -> (lo, hi); None means unbounded on that side
    attributes: dict = field(default_factory=dict)
    scales: dict = field(default_factory=dict)  # normaliser when a bound is open

    def __post_init__(self):
        clean = {}
        for dim, (lo, hi) in self.bounds.items():
            lo = -math.inf if lo is None else float(lo)
            hi = math.inf if hi is None else float(hi)
            if lo > hi:
                raise ValueError(f"region {self.label!r}: bound for {dim} has min {lo} > max {hi}")
            clean[dim] = (lo, hi)
        self.bounds = clean

    def span(self, dim: str) -> float:
        lo, hi = self.bounds[dim]
        width = hi - lo
        if math.isfinite(width) and width > 0:
            return width
        return float(self.scales.get(dim, 1.0))


@dataclass
class LaminaDefinition:
    name: str
    tags: set
    dimensions: list
    regions: list = field(default_factory=list)

    def region(self, label: str) -> RegionOfInterest:
        for r in self.regions:
            if r.label == label:
                return r
        raise KeyError(f"lamina {self.name!r} has no region {label!r}")


@dataclass(frozen=True)
class GeneticModifier:
    gene: str
    rsid: str
    genotype: str
    edge_pattern: tuple
    multiplier: float

    def __post_init__(self):
        if not self.multiplier > 0:
            raise ValueError(f"modifier {self.gene}/{self.rsid}: multiplier must be positive")

    def matches(self, genotypes: Mapping[str, str]) -> bool:
        have = genotypes.get(self.rsid)
        return have is not None and _norm_genotype(have) == _norm_genotype(self.genotype)


def _norm_genotype(g: str) -> str:
    return " ".join(sorted(g.upper().split()))


_SELECTOR_KEYS = ("edge_id", "source", "target", "source_attr", "target_attr", "source_tag", "target_tag")


@dataclass
class KnowledgePatch:
    selector: dict
    set: float | None = None
    multiply: float | None = None
    transform: dict | None = None
    provenance: str = ""

    def __post_init__(self):
        given = [k for k in ("set", "multiply", "transform") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"patch must carry exactly one of set/multiply/transform, got {given or 'none'}")
        bad = set(self.selector) - set(_SELECTOR_KEYS)
        if bad or not self.selector:
            raise ValueError(f"patch selector keys must be a nonempty subset of {_SELECTOR_KEYS}")
        if self.multiply is not None and not self.multiply > 0:
            raise ValueError("patch multiplier must be positive")

    def to_dict(self) -> dict:
        d = {"selector": dict(self.selector), "provenance": self.provenance}
        for k in ("set", "multiply", "transform"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "KnowledgePatch":
        return cls(dict(d["selector"]), d.get("set"), d.get("multiply"), d.get("transform"),
                   d.get("provenance", ""))


@dataclass
class UtilityTemplate:
    id: str
    pattern: re.Pattern
    node: dict
    edges: list
    provenance: str

    def match(self, dim: str):
        return self.pattern.fullmatch(dim)


@dataclass
class KnowledgeBase:
    laminae: dict = field(default_factory=dict)
    utility_templates: list = field(default_factory=list)
    bio_nodes: dict = field(default_factory=dict)  # id -> raw node dict
    bio_edges: list = field(default_factory=list)  # raw edge dicts
    genetic_modifiers: list = field(default_factory=list)
    patches: list = field(default_factory=list)

    def template_for(self, dim: str):
        for t in self.utility_templates:
            m = t.match(dim)
            if m:
                return t, m
        return None, None


# -- loading -------------------------------------------------------------------------

_RANGE_RE = re.compile(r"^(.*)\{(\d+)\.\.(\d+)\}(.*)$")


def expand_dimensions(dims: Iterable[str]) -> list[str]:
    out = []
    for d in dims:
        m = _RANGE_RE.match(d)
        if m:
            pre, a, b, post = m.group(1), int(m.group(2)), int(m.group(3)), m.group(4)
            out.extend(f"{pre}{i}{post}" for i in range(a, b + 1))
        else:
            out.append(d)
    return out


def _need(obj, key, path, kind=None):
    if not isinstance(obj, Mapping) or key not in obj:
        raise SchemaError(path, f"missing required field {key!r}")
    v = obj[key]
    if kind is not None and not isinstance(v, kind):
        raise SchemaError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}")
    return v


def _parse_lamina(d, path) -> LaminaDefinition:
    name = _need(d, "name", path, str)
    dims = expand_dimensions(_need(d, "dimensions", path, list))
    if not dims:
        raise SchemaError(f"{path}.dimensions", "must be nonempty")
    regions = []
    for j, r in enumerate(d.get("regions", [])):
        rpath = f"{path}.regions[{j}]"
        bounds = _need(r, "bounds", rpath, dict)
        for dim, b in bounds.items():
            if dim not in dims:
                raise SchemaError(f"{rpath}.bounds.{dim}", "dimension not listed by the lamina")
            if not (isinstance(b, list) and len(b) == 2):
                raise SchemaError(f"{rpath}.bounds.{dim}", "expected [min, max]")
        try:
            regions.append(RegionOfInterest(_need(r, "label", rpath, str), {k: tuple(v) for k, v in bounds.items()},
                                            dict(r.get("attributes", {})), dict(r.get("scales", {}))))
        except ValueError as exc:
            raise SchemaError(rpath, str(exc)) from None
    return LaminaDefinition(name, set(d.get("tags", [])), dims, regions)


def parse_knowledge(doc: Mapping, where: str = "knowledge") -> KnowledgeBase:
    if not isinstance(doc, Mapping):
        raise SchemaError(where, "top level must be a JSON object")
    known = {"laminae", "utility_templates", "bio_nodes", "bio_edges", "genetic_modifiers", "patches",
             "description", "version"}
    extra = set(doc) - known
    if extra:
        raise SchemaError(where, f"unknown top-level keys {sorted(extra)}")
    kb = KnowledgeBase()
    for i, d in enumerate(doc.get("laminae", [])):
        lam = _parse_lamina(d, f"{where}.laminae[{i}]")
        if lam.name in kb.laminae:
            raise SchemaError(f"{where}.laminae[{i}]", f"duplicate lamina name {lam.name!r}")
        kb.laminae[lam.name] = lam
    seen_templates = set()
    for i, d in enumerate(doc.get("utility_templates", [])):
        path = f"{where}.utility_templates[{i}]"
        tid = _need(d, "id", path, str)
        if tid in seen_templates:
            raise SchemaError(path, f"duplicate template id {tid!r}")
        seen_templates.add(tid)
        try:
            pattern = re.compile(_need(d, "pattern", path, str))
        except re.error as exc:
            raise SchemaError(f"{path}.pattern", str(exc)) from None
        kb.utility_templates.append(UtilityTemplate(tid, pattern, dict(d.get("node", {})),
                                                    list(d.get("edges", [])), d.get("provenance", "")))
    for i, d in enumerate(doc.get("bio_nodes", [])):
        path = f"{where}.bio_nodes[{i}]"
        nid = _need(d, "id", path, str)
        if nid in kb.bio_nodes:
            raise SchemaError(path, f"duplicate node id {nid!r}")
        try:
            _node_from_dict(d)
        except (GraphError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(path, str(exc)) from None
        kb.bio_nodes[nid] = d
    edge_ids = set()
    for i, d in enumerate(doc.get("bio_edges", [])):
        path = f"{where}.bio_edges[{i}]"
        eid = _need(d, "id", path, str)
        if eid in edge_ids:
            raise SchemaError(path, f"duplicate edge id {eid!r}")
        edge_ids.add(eid)
        for end in ("source", "target"):
            if _need(d, end, path, str) not in kb.bio_nodes:
                raise SchemaError(f"{path}.{end}", f"unknown node {d[end]!r}")
        if not d.get("provenance"):
            raise SchemaError(f"{path}.provenance", "every knowledge edge needs a provenance citation")
        try:
            _edge_from_dict(d)
        except (GraphError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(path, str(exc)) from None
        kb.bio_edges.append(d)
    for i, d in enumerate(doc.get("genetic_modifiers", [])):
        path = f"{where}.genetic_modifiers[{i}]"
        pattern = _need(d, "edge_pattern", path, list)
        if len(pattern) != 2:
            raise SchemaError(f"{path}.edge_pattern", "expected [source_tag, target_tag]")
        try:
            kb.genetic_modifiers.append(GeneticModifier(
                _need(d, "gene", path, str), _need(d, "rsid", path, str), _need(d, "genotype", path, str),
                tuple(pattern), float(_need(d, "multiplier", path))))
        except ValueError as exc:
            raise SchemaError(path, str(exc)) from None
    for i, d in enumerate(doc.get("patches", [])):
        try:
            kb.patches.append(KnowledgePatch.from_dict(d))
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"{where}.patches[{i}]", str(exc)) from None
    return kb


def load_knowledge(path) -> KnowledgeBase:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return KnowledgeBase()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(str(path), f"invalid JSON: {exc}") from None
    return parse_knowledge(doc, path.name)


def bundled_knowledge_path() -> Path:
    return Path(str(resources.files("hse") / "data" / "cycling_cardiac.json"))


def bundled_rules_path() -> Path:
    return Path(str(resources.files("hse") / "data" / "cardiac.rules"))


# -- initialisation steps ------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _tokens(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


def match_laminae(intent: str, base: KnowledgeBase) -> list[LaminaDefinition]:
    """Laminae sharing at least one word with ``intent``, best overlap first, ties by name."""
    want = _tokens(intent)
    scored = []
    for lam in base.laminae.values():
        have = _tokens(lam.name.replace("_", " ").replace("-", " ")).union(*(_tokens(t) for t in lam.tags))
        n = len(want & have)
        if n:
            scored.append((-n, lam.name, lam))
    return [lam for _, _, lam in sorted(scored, key=lambda x: (x[0], x[1]))]


def _fill(value, groups: Sequence[str]):
    if isinstance(value, str):
        return value.format(*groups)
    if isinstance(value, Mapping):
        return {k: _fill(v, groups) for k, v in value.items()}
    if isinstance(value, list):
        return [_fill(v, groups) for v in value]
    return value


def _weight(value) -> float:
    if isinstance(value, str):
        return float(Fraction(value))
    return float(value)


def _utility_parts(base: KnowledgeBase, dim: str) -> tuple[dict, list[dict]]:
    template, m = base.template_for(dim)
    if template is None:
        raise KnowledgeError(f"no utility template for dimension {dim!r}")
    groups = [m.group(0), *m.groups()]
    node = {"layer": "utility", "attributes": {"value": 0.0}, **_fill(template.node, groups), "id": dim}
    edges = []
    for k, e in enumerate(template.edges):
        e = _fill(e, groups)
        e.setdefault("id", f"{template.id}:{dim}:{k}")
        e["target"] = dim
        e.setdefault("target_attr", "value")
        e["weight"] = _weight(e.get("weight", 1.0))
        e.setdefault("provenance", template.provenance or f"utility template {template.id}")
        edges.append(e)
    return node, edges


def _dependencies(node: Mapping, edges: Iterable[Mapping]) -> set[str]:
    deps = set()
    for e in edges:
        deps.add(e["source"])
        t = TransformSpec.parse(e.get("transform", "copy"))
        if t.kind in ("product", "ratio") and "." in t.params["other"]:
            deps.add(t.params["other"].split(".", 1)[0])
    nested = node.get("nested")
    if nested:
        deps.update(ref.split(".", 1)[0].split("/")[0] for ref in nested.get("imports", {}).values())
    return deps


def instantiate(lamina: LaminaDefinition, base: KnowledgeBase, profile=None,
                max_depth: int | None = None) -> GraphBlock:
    """Build the block for ``lamina``: its utility nodes plus every biological
    node and edge that can reach them, with the profile's genetic modifiers applied.

    ``profile`` seeds ``body`` attributes that share a profile field name
    (``mass_kg``, ``hr_rest`` ...) and supplies ``genotypes``. ``max_depth``
    caps the expansion at that many edges upstream of the lamina's
    dimensions (``None`` expands the full closure); edges from nodes beyond
    the cap are dropped.
    """
    if max_depth is not None and max_depth < 0:
        raise ValueError(f"max_depth must be non-negative, got {max_depth}")
    unresolved = [d for d in lamina.dimensions if d not in base.bio_nodes and base.template_for(d)[0] is None]
    if unresolved:
        raise KnowledgeError(f"lamina {lamina.name!r}: unresolvable dimensions {unresolved}")

    raw_nodes: dict[str, dict] = {}
    incoming: dict[str, list[dict]] = {}

    def load(nid: str):
        if nid in base.bio_nodes:
            node = base.bio_nodes[nid]
            edges = [e for e in base.bio_edges if e["target"] == nid]
        else:
            node, edges = _utility_parts(base, nid)
        return node, edges

    queue = deque((d, 0) for d in dict.fromkeys(lamina.dimensions))
    while queue:
        nid, depth = queue.popleft()
        if nid in raw_nodes:
            continue
        if nid not in base.bio_nodes and base.template_for(nid)[0] is None:
            raise KnowledgeError(f"unresolvable node {nid!r} referenced while instantiating {lamina.name!r}")
        node, edges = load(nid)
        raw_nodes[nid] = node
        incoming[nid] = edges
        if max_depth is None or depth < max_depth:
            queue.extend((d, depth + 1) for d in sorted(_dependencies(node, edges) - set(raw_nodes)))

    loaded = set(raw_nodes)
    block = GraphBlock(f"hse:{lamina.name}")
    for nid in sorted(raw_nodes):
        node = raw_nodes[nid]
        nested = node.get("nested")
        if nested and nested.get("imports"):
            imports = {k: v for k, v in nested["imports"].items() if v.split(".", 1)[0].split("/")[0] in loaded}
            node = {**node, "nested": {**nested, "imports": imports}}
        block.add_node(_node_from_dict(node))
    edges = [e for nid in raw_nodes for e in incoming[nid] if _dependencies({}, [e]) <= loaded]
    for e in sorted(edges, key=lambda e: e["id"]):
        block.add_edge(_edge_from_dict(e))

    if profile is not None:
        body = block.nodes.get("body")
        if body is not None:
            for k, v in profile.to_dict().items():
                if k in body.attributes and isinstance(v, (int, float)):
                    body.attributes[k] = float(v)
        apply_genetic_modifiers(block, base.genetic_modifiers, profile.genotypes)
    return block.validate()


def _all_edges(block: GraphBlock):
    for b in block.iter_blocks():
        for e in b.edges:
            yield b, e


def apply_genetic_modifiers(block: GraphBlock, modifiers: Iterable[GeneticModifier],
                            genotypes: Mapping[str, str]) -> GraphBlock:
    for mod in sorted(modifiers, key=lambda m: (m.gene, m.rsid, m.edge_pattern)):
        if not mod.matches(genotypes):
            continue
        src_tag, tgt_tag = mod.edge_pattern
        for b, e in _all_edges(block):
            if src_tag in b.nodes[e.source].tags and tgt_tag in b.nodes[e.target].tags:
                e.weight *= mod.multiplier
                e.provenance.append(f"genetic modifier {mod.gene} {mod.rsid} {mod.genotype}: x{mod.multiplier}")
    return block


def select_edges(block: GraphBlock, selector: Mapping) -> list[GraphEdge]:
    hits = []
    for b, e in _all_edges(block):
        ok = True
        for k, v in selector.items():
            if k == "edge_id":
                ok = e.id == v
            elif k == "source_tag":
                ok = v in b.nodes[e.source].tags
            elif k == "target_tag":
                ok = v in b.nodes[e.target].tags
            else:
                ok = getattr(e, k) == v
            if not ok:
                break
        if ok:
            hits.append(e)
    return hits


def apply_patch(block: GraphBlock, patch: KnowledgePatch) -> GraphBlock:
    """Set or scale the weight (or replace the transform) of every selected edge."""
    edges = select_edges(block, patch.selector)
    if not edges:
        raise KnowledgeError(f"patch selector {patch.selector} matches no edge")
    for e in edges:
        if patch.set is not None:
            e.weight = float(patch.set)
        elif patch.multiply is not None:
            e.weight *= patch.multiply
        else:
            e.transform = TransformSpec.parse(patch.transform)
        e.provenance.append(patch.provenance or "knowledge patch")
    return block


def inverse_patches(block: GraphBlock, patch: KnowledgePatch) -> list[KnowledgePatch]:
    """Patches restoring the currently selected edges; compute before applying ``patch``."""
    out = []
    for e in select_edges(block, patch.selector):
        if patch.transform is not None:
            out.append(KnowledgePatch({"edge_id": e.id}, transform=e.transform.to_dict(),
                                      provenance=f"revert {patch.provenance}".strip()))
        else:
            out.append(KnowledgePatch({"edge_id": e.id}, set=e.weight,
                                      provenance=f"revert {patch.provenance}".strip()))
    return out


# -- regions -----------------------------------------------------------------------------

def _coords(state: Mapping[str, float], roi: RegionOfInterest) -> dict[str, float]:
    missing = sorted(d for d in roi.bounds if d not in state)
    if missing:
        raise KnowledgeError(f"state lacks dimension(s) required by region {roi.label!r}: {', '.join(missing)}")
    return {d: float(state[d]) for d in roi.bounds}


def distance_to_region(state: Mapping[str, float], roi: RegionOfInterest) -> float:
    """Largest per-dimension shortfall outside the box, each divided by the box span."""
    worst = 0.0
    for dim, x in _coords(state, roi).items():
        lo, hi = roi.bounds[dim]
        gap = lo - x if x < lo else (x - hi if x > hi else 0.0)
        worst = max(worst, gap / roi.span(dim))
    return worst


def region_membership(state: Mapping[str, float], roi: RegionOfInterest) -> bool:
    return all(roi.bounds[d][0] <= x <= roi.bounds[d][1] for d, x in _coords(state, roi).items())
