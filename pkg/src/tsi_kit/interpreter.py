"""Rule-based sign interpretation: clusters, spatial dependence, semantics, text.

The pipeline for one scene is

    cluster_signs -> spatial_dependence -> assemble_semantics -> generate_description

Signs are grouped by the guide panel containing their centre.  Inside a
cluster, pairwise directions and max-normalised distances drive the slot
binding rules, and a per-frame template turns the bound slots into one
sentence.  Nothing here depends on absolute pixel positions or scale, so
translating or uniformly scaling a scene leaves every output unchanged.

Templates, action phrases and the panel-class to frame map are data files
under ``tsi_kit/data`` and can be swapped for user-supplied ones.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

from .geometry import point_in_polygon
from .scene import PanelAnnotation, QuadBox, SceneRecord
from .textmetrics import (AUTO, FramelessDescription, SlotRules, SyntaxFrame,
                          extract_frame, frame_tokens, resolve_mode)

logger = logging.getLogger(__name__)

DIRECTIONS = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")
SLOTS = ("subject", "action", "route", "dest", "quantity", "vehicle")
ROUTE_RE = re.compile(r"[GS][0-9]+")
NUMBER_RE = re.compile(r"[0-9]+(?:\.[0-9]+)?")
_REL_TOL = 1e-9


class TemplateError(KeyError):
    pass


class InterpretationError(ValueError):
    pass


# -- grammar -------------------------------------------------------------------

def _read_json(path_or_name) -> dict:
    if isinstance(path_or_name, (str, Path)) and Path(path_or_name).exists():
        with open(path_or_name, encoding="utf-8") as fh:
            return json.load(fh)
    text = resources.files("tsi_kit.data").joinpath(str(path_or_name)).read_text(encoding="utf-8")
    return json.loads(text)


_TEMPLATE_TOKEN = re.compile(r"\[|\]|<[a-z_]+>|[^\[\]<]+|<")


def parse_template(template: str) -> list:
    """Split a template into literal strings and optional groups.

    Returns a list whose items are either ``str`` (always emitted) or a list
    of parts (an optional group); parts are literals or ``("slot", name)``.
    """
    out: list = []
    group = None
    for tok in _TEMPLATE_TOKEN.findall(template):
        if tok == "[":
            if group is not None:
                raise TemplateError(f"nested group in template {template!r}")
            group = []
        elif tok == "]":
            if group is None:
                raise TemplateError(f"unbalanced ']' in template {template!r}")
            out.append(group)
            group = None
        elif tok.startswith("<") and tok.endswith(">") and len(tok) > 2:
            part = ("slot", tok[1:-1])
            (group if group is not None else out).append(part)
        else:
            (group if group is not None else out).append(tok)
    if group is not None:
        raise TemplateError(f"unclosed '[' in template {template!r}")
    return out


@dataclass
class Grammar:
    """Templates, phrase tables and frame maps for one output language."""

    language: str
    templates: dict
    defaults: dict
    actions: dict
    subjects: dict
    panel_frames: dict
    orphan_frames: dict
    destinations: list = field(default_factory=list)
    vehicles: list = field(default_factory=list)
    dest_joiner: str = ", "
    subject_joiner: str = " and "
    clause_joiner: str = "; "
    quantity_format: str = "{value} {unit}"
    capitalize: bool = True

    def __post_init__(self):
        self._parsed = {k: parse_template(v) for k, v in self.templates.items()}
        self._vehicle_set = set(self.vehicles)

    @classmethod
    def load(cls, language: str = "en", templates=None, lexicon=None, frames=None) -> "Grammar":
        t = _read_json(templates or f"templates_{language}.json")
        lx = _read_json(lexicon or f"lexicon_{language}.json")
        fr = _read_json(frames or "frames.json")
        return cls(
            language=t.get("language", language),
            templates=dict(t["templates"]),
            defaults=dict(t.get("defaults", {})),
            actions=dict(lx.get("actions", {})),
            subjects={k: dict(v) for k, v in lx.get("subjects", {}).items()},
            panel_frames={int(k): v for k, v in fr["panel_frames"].items()},
            orphan_frames=dict(fr["orphan_frames"]),
            destinations=list(lx.get("destinations", [])),
            vehicles=list(lx.get("vehicles", [])),
            dest_joiner=t.get("dest_joiner", ", "),
            subject_joiner=t.get("subject_joiner", " and "),
            clause_joiner=t.get("clause_joiner", "; "),
            quantity_format=t.get("quantity_format", "{value} {unit}"),
            capitalize=bool(t.get("capitalize", False)),
        )

    def template(self, frame_type: str) -> list:
        try:
            return self._parsed[frame_type]
        except KeyError:
            raise TemplateError(f"no template for frame_type {frame_type!r}") from None

    def is_vehicle(self, text: str) -> bool:
        return text in self._vehicle_set

    def slot_rules(self) -> SlotRules:
        lexicon = {d: "dest" for d in self.destinations}
        lexicon.update({v: "vehicle" for v in self.vehicles})
        return SlotRules(lexicon=lexicon)


@lru_cache(maxsize=8)
def default_grammar(language: str = "en") -> Grammar:
    return Grammar.load(language)


# -- clusters --------------------------------------------------------------------

@dataclass(frozen=True)
class Member:
    """A recognised symbol or text with its position in the source scene."""

    kind: str
    label: str
    box: QuadBox
    index: int

    @property
    def center(self) -> tuple[float, float]:
        return self.box.center

    @property
    def key(self) -> tuple[str, int]:
        return (self.kind, self.index)


@dataclass(frozen=True)
class SignCluster:
    panel: PanelAnnotation | None
    members: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))


def _row_order(boxes: Sequence[QuadBox]) -> tuple[list[int], list[int]]:
    """Indices in reading order and the row index of each input box.

    Boxes join a row when their vertical overlap with the row's first box is
    at least half the shorter of the two heights.
    """
    if not boxes:
        return [], []
    info = []
    for i, b in enumerate(boxes):
        x0, y0, x1, y1 = b.bounds
        cx, cy = b.center
        info.append((cy, cx, i, y0, y1))
    info.sort()
    rows: list[list[tuple]] = []
    for item in info:
        if rows:
            anchor = rows[-1][0]
            ov = min(anchor[4], item[4]) - max(anchor[3], item[3])
            shorter = min(anchor[4] - anchor[3], item[4] - item[3])
            if shorter > 0 and ov >= 0.5 * shorter:
                rows[-1].append(item)
                continue
        rows.append([item])
    order, row_of = [], [0] * len(boxes)
    for r, row in enumerate(rows):
        for item in sorted(row, key=lambda t: (t[1], t[2])):
            order.append(item[2])
            row_of[item[2]] = r
    return order, row_of


def reading_order(cluster: SignCluster) -> list[Member]:
    """Members grouped into rows top-to-bottom, left-to-right within a row."""
    order, _ = _row_order([m.box for m in cluster.members])
    return [cluster.members[i] for i in order]


def scene_members(scene: SceneRecord) -> list[Member]:
    out = [Member("symbol", s.class_code, s.box, i) for i, s in enumerate(scene.symbols) if not s.ignored]
    out += [Member("text", t.transcription, t.box, i) for i, t in enumerate(scene.texts) if not t.ignored]
    return out


def cluster_signs(scene: SceneRecord) -> list[SignCluster]:
    """Group non-ignored signs by the smallest panel containing their centre.

    Clusters come one per panel (in panel order, possibly empty) followed by a
    singleton orphan cluster for each sign outside every panel.
    """
    panels = list(scene.panels)
    polys = [p.box.as_array() for p in panels]
    areas = [p.box.area for p in panels]
    groups: list[list[Member]] = [[] for _ in panels]
    orphans: list[SignCluster] = []
    for m in scene_members(scene):
        c = m.center
        hits = [k for k, poly in enumerate(polys) if point_in_polygon(c, poly)]
        if hits:
            groups[min(hits, key=lambda k: (areas[k], k))].append(m)
        else:
            orphans.append(SignCluster(None, (m,)))
    return [SignCluster(p, tuple(g)) for p, g in zip(panels, groups)] + orphans


# -- spatial dependence --------------------------------------------------------

@dataclass(frozen=True)
class Relation:
    i: int
    j: int
    direction: str
    distance: float


@dataclass(frozen=True)
class SpatialDependence:
    relations: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "_lookup", {(r.i, r.j): r for r in self.relations})

    def get(self, i: int, j: int) -> Relation | None:
        return self._lookup.get((i, j))

    def distance(self, i: int, j: int) -> float:
        r = self._lookup.get((i, j))
        return r.distance if r is not None else 0.0


def direction_bin(dx: float, dy: float) -> str:
    """8-way compass bin of an image-space vector (y down); ties go counter-clockwise."""
    angle = math.degrees(math.atan2(-dy, dx)) % 360.0
    return DIRECTIONS[int(math.floor((angle + 22.5) / 45.0)) % 8]


def spatial_dependence(cluster: SignCluster) -> SpatialDependence:
    """Direction bin and max-normalised centre distance for every ordered pair."""
    centers = [m.center for m in cluster.members]
    n = len(centers)
    if n < 2:
        return SpatialDependence(())
    dist = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = math.hypot(centers[j][0] - centers[i][0], centers[j][1] - centers[i][1])
    dmax = max(dist.values())
    rels = []
    for i in range(n):
        for j in range(i + 1, n):
            d = dist[i, j] / dmax if dmax > 0 else 1.0
            b = direction_bin(centers[j][0] - centers[i][0], centers[j][1] - centers[i][1])
            back = DIRECTIONS[(DIRECTIONS.index(b) + 4) % 8]
            rels.append(Relation(i, j, b, d))
            rels.append(Relation(j, i, back, d))
    rels.sort(key=lambda r: (r.i, r.j))
    return SpatialDependence(rels)


# -- semantics ---------------------------------------------------------------------

@dataclass
class Clause:
    action: str | None
    anchor: int | None
    dests: list = field(default_factory=list)


@dataclass
class SemanticGraph:
    """Frame type plus slot bindings for one cluster.

    ``bindings`` maps slot name to filler strings; ``source_members`` maps the
    same slot to the cluster member positions the fillers came from.
    ``clauses`` pairs each arrow's action with the destinations attached to it.
    """

    frame_type: str
    bindings: dict = field(default_factory=dict)
    source_members: dict = field(default_factory=dict)
    clauses: list = field(default_factory=list)
    unbound: list = field(default_factory=list)
    panel_id: int | None = None

    def bind(self, slot: str, filler: str, member: int) -> None:
        self.bindings.setdefault(slot, []).append(filler)
        self.source_members.setdefault(slot, []).append(member)

    @property
    def is_empty(self) -> bool:
        return not any(self.bindings.values())


def _type_letter(code: str) -> str:
    return code[:1]


def frame_type_for(cluster: SignCluster, grammar: Grammar) -> str:
    if cluster.panel is not None:
        try:
            return grammar.panel_frames[cluster.panel.panel_class]
        except KeyError:
            raise InterpretationError(f"no frame for panel_class {cluster.panel.panel_class}") from None
    symbols = [m for m in cluster.members if m.kind == "symbol"]
    if not symbols:
        raise InterpretationError("orphan cluster without a symbol has no frame")
    letter = _type_letter(symbols[0].label)
    try:
        return grammar.orphan_frames[letter]
    except KeyError:
        raise InterpretationError(f"no orphan frame for symbol type {letter!r}") from None


def _nearest(dep: SpatialDependence, src: int, targets: Sequence[int], rank: dict) -> int | None:
    best = None
    for t in targets:
        d = dep.distance(src, t)
        if best is None:
            best = (d, t)
            continue
        bd, bt = best
        if d < bd - _REL_TOL * max(bd, 1e-300):
            best = (d, t)
        elif abs(d - bd) <= _REL_TOL * max(bd, d, 1e-300) and rank[t] < rank[bt]:
            best = (d, t)
    return None if best is None else best[1]


def assemble_semantics(cluster: SignCluster, dep: SpatialDependence,
                       grammar: Grammar | None = None) -> SemanticGraph:
    """Bind cluster members to frame slots.

    Rules apply in priority order:

    1. route-code texts (G/S + digits) fill ``route``;
    2. arrow symbols open a clause with their action phrase, and each plain
       text in the same row or below joins the clause of its nearest such
       arrow; other symbols contribute their phrase to ``subject``;
    3. numeric texts next to a prohibition symbol with a unit fill
       ``quantity`` (nearest prohibition symbol supplies the unit);
    4. vehicle-type texts in a cluster with a prohibition symbol fill
       ``vehicle``;
    5. any text still unbound becomes a destination, in reading order.

    Nearest-neighbour ties go to the lower reading-order position.  Members
    no rule can place are listed in ``unbound``.
    """
    grammar = grammar or default_grammar()
    frame = frame_type_for(cluster, grammar)
    graph = SemanticGraph(frame, panel_id=cluster.panel.panel_id if cluster.panel else None)
    members = cluster.members
    order, row_of = _row_order([m.box for m in members])
    rank = {pos: r for r, pos in enumerate(order)}
    symbols = [p for p in order if members[p].kind == "symbol"]
    texts = [p for p in order if members[p].kind == "text"]
    bound: set[int] = set()

    # 1. routes
    for p in texts:
        if ROUTE_RE.fullmatch(members[p].label.strip()):
            graph.bind("route", members[p].label.strip(), p)
            bound.add(p)

    # 2. arrows and other symbols
    arrows = []
    prohibitions = []
    for p in symbols:
        code = members[p].label
        letter = _type_letter(code)
        if letter == "a":
            if code in grammar.actions:
                arrows.append(p)
                graph.clauses.append(Clause(grammar.actions[code], p))
                graph.bind("action", grammar.actions[code], p)
            else:
                graph.unbound.append((p, f"no action phrase for {code!r}"))
            continue
        subj = grammar.subjects.get(code)
        if subj is None:
            graph.unbound.append((p, f"no phrase for symbol {code!r}"))
            continue
        graph.bind("subject", subj["phrase"], p)
        if letter == "p":
            prohibitions.append(p)

    def reserved(p: int) -> bool:
        label = members[p].label.strip()
        return bool(NUMBER_RE.fullmatch(label)) or grammar.is_vehicle(label)

    clause_of = {c.anchor: c for c in graph.clauses}
    for p in texts:
        if p in bound or (prohibitions and reserved(p)):
            continue
        above = [a for a in arrows if row_of[a] <= row_of[p]]
        a = _nearest(dep, p, above, rank)
        if a is not None:
            clause_of[a].dests.append(p)
            bound.add(p)

    # 3. quantities
    for p in texts:
        if p in bound or not prohibitions or not NUMBER_RE.fullmatch(members[p].label.strip()):
            continue
        q = _nearest(dep, p, prohibitions, rank)
        unit = grammar.subjects[members[q].label].get("unit")
        if unit:
            value = members[p].label.strip()
            graph.bind("quantity", grammar.quantity_format.format(value=value, unit=unit), p)
            bound.add(p)

    # 4. vehicle types
    for p in texts:
        if p in bound or not prohibitions or not grammar.is_vehicle(members[p].label.strip()):
            continue
        graph.bind("vehicle", members[p].label.strip(), p)
        bound.add(p)

    # 5. remaining texts
    loose = [p for p in texts if p not in bound]
    if not graph.clauses:
        graph.clauses.append(Clause(None, None, []))
    graph.clauses[0].dests.extend(loose)
    for c in graph.clauses:
        c.dests.sort(key=lambda p: rank[p])
    for c in graph.clauses:
        for p in c.dests:
            graph.bind("dest", members[p].label.strip(), p)
    if graph.clauses == [Clause(None, None, [])]:
        graph.clauses = []
    return graph


# -- description -------------------------------------------------------------------

@dataclass(frozen=True)
class Description:
    text: str
    frame: SyntaxFrame
    panel_id: int | None = None


def _render_template(parts: list, values: dict) -> list[tuple[str, str]]:
    """Fill a parsed template; returns ``(kind, value)`` pieces.

    ``values`` maps a slot to either a literal string (skeleton words such as
    an action phrase) or a list of fillers (slot markers in the frame).  An
    optional group is dropped when any slot inside it is empty.
    """
    pieces: list[tuple[str, str, str]] = []

    def emit(part) -> None:
        if isinstance(part, str):
            pieces.append(("text", part, ""))
            return
        v = values.get(part[1])
        if isinstance(v, str):
            pieces.append(("text", v, ""))
        else:
            fillers, joiner = v
            for k, f in enumerate(fillers):
                if k:
                    pieces.append(("text", joiner, ""))
                pieces.append(("slot", f, part[1]))

    def present(part) -> bool:
        if isinstance(part, str):
            return True
        v = values.get(part[1])
        return bool(v) if isinstance(v, str) else bool(v and v[0])

    for item in parts:
        if isinstance(item, list):
            if all(present(p) for p in item):
                for p in item:
                    emit(p)
        elif present(item):
            emit(item)
        else:
            raise TemplateError(f"required slot {item[1]!r} is empty")
    return _normalise(pieces)


def _normalise(pieces: list[tuple[str, str, str]]) -> list[tuple[str, str, str]]:
    merged: list[list] = []
    for kind, value, slot in pieces:
        if kind == "text" and merged and merged[-1][0] == "text":
            merged[-1][1] += value
        else:
            merged.append([kind, value, slot])
    for m in merged:
        if m[0] == "text":
            m[1] = re.sub(r"\s+", " ", m[1])
    if merged and merged[0][0] == "text":
        merged[0][1] = merged[0][1].lstrip()
    if merged and merged[-1][0] == "text":
        merged[-1][1] = merged[-1][1].rstrip()
    return [tuple(m) for m in merged if m[1] != ""]


def _capitalize(pieces: list) -> list:
    if pieces and pieces[0][0] == "text" and pieces[0][1][:1].islower():
        kind, value, slot = pieces[0]
        pieces = [(kind, value[:1].upper() + value[1:], slot)] + pieces[1:]
    return pieces


def render_graph(graph: SemanticGraph, cluster: SignCluster,
                 grammar: Grammar) -> list[tuple[str, str, str]]:
    """Pieces ``(kind, value, slot)`` of the description for ``graph``."""
    parts = grammar.template(graph.frame_type)
    members = cluster.members
    if graph.is_empty:
        if graph.frame_type not in grammar.defaults:
            raise TemplateError(f"no default sentence for frame_type {graph.frame_type!r}")
        return [("text", grammar.defaults[graph.frame_type], "")]
    subjects = graph.bindings.get("subject", [])
    shared = {
        "subject": grammar.subject_joiner.join(subjects),
        "route": (graph.bindings.get("route", []), grammar.dest_joiner),
        "quantity": (graph.bindings.get("quantity", []), grammar.dest_joiner),
        "vehicle": (graph.bindings.get("vehicle", []), grammar.dest_joiner),
    }
    clauses = graph.clauses or [Clause(None, None, [])]
    out: list = []
    for k, clause in enumerate(clauses):
        values = dict(shared) if k == 0 else {}
        values["action"] = clause.action or ""
        values["dest"] = ([members[p].label.strip() for p in clause.dests], grammar.dest_joiner)
        pieces = _render_template(parts, values)
        if grammar.capitalize:
            pieces = _capitalize(pieces)
        if k:
            out.append(("text", grammar.clause_joiner, ""))
        out += pieces
    return out


def generate_description(graph: SemanticGraph, cluster: SignCluster,
                         grammar: Grammar | None = None, mode: str = AUTO) -> Description:
    """Fill the frame's template; the frame is built from the template, not re-parsed."""
    grammar = grammar or default_grammar()
    pieces = render_graph(graph, cluster, grammar)
    text = "".join(v for _, v, _ in pieces)
    if not text:
        raise InterpretationError("empty description")
    frame = SyntaxFrame(frame_tokens([(k, s if k == "slot" else v) for k, v, s in pieces],
                                     resolve_mode(text, mode)))
    return Description(text, frame, graph.panel_id)


def read_slots(text: str, slot_rules: SlotRules) -> dict[str, list[str]]:
    """Slot fillers found in a description, in order of appearance."""
    out: dict[str, list[str]] = {}
    for start, end, slot in slot_rules.spans(text):
        out.setdefault(slot, []).append(text[start:end])
    return out


# -- scene level -------------------------------------------------------------------

@dataclass
class Interpretation:
    descriptions: list
    diagnostics: list = field(default_factory=list)
    graphs: list = field(default_factory=list)


def _cluster_anchor(cluster: SignCluster) -> QuadBox:
    return cluster.panel.box if cluster.panel is not None else cluster.members[0].box


def interpret_clusters(scene: SceneRecord, grammar: Grammar | None = None,
                       mode: str = AUTO) -> Interpretation:
    grammar = grammar or default_grammar()
    clusters = cluster_signs(scene)
    order, _ = _row_order([_cluster_anchor(c) for c in clusters])
    result = Interpretation([])
    for k in order:
        cluster = clusters[k]
        try:
            graph = assemble_semantics(cluster, spatial_dependence(cluster), grammar)
            desc = generate_description(graph, cluster, grammar, mode)
        except (InterpretationError, TemplateError, FramelessDescription) as exc:
            where = (f"panel {cluster.panel.panel_id}" if cluster.panel is not None
                     else f"orphan {cluster.members[0].kind} {cluster.members[0].index}")
            result.diagnostics.append({"image_id": scene.image_id, "cluster": where,
                                       "error": str(exc).strip("'\"")})
            continue
        result.descriptions.append(desc)
        result.graphs.append(graph)
        for p, reason in graph.unbound:
            m = cluster.members[p]
            result.diagnostics.append({"image_id": scene.image_id,
                                       "cluster": f"panel {graph.panel_id}",
                                       "error": f"unbound {m.kind} {m.index}: {reason}"})
    return result


def interpret_scene(scene: SceneRecord, grammar: Grammar | None = None,
                    mode: str = AUTO) -> list[Description]:
    """Descriptions for every interpretable cluster, in panel reading order."""
    result = interpret_clusters(scene, grammar, mode)
    for d in result.diagnostics:
        logger.debug("%s %s: %s", d["image_id"], d["cluster"], d["error"])
    return result.descriptions


def check_description(desc: Description, slot_rules: SlotRules, mode: str = AUTO) -> bool:
    """True when re-extracting the frame from the text reproduces ``desc.frame``."""
    try:
        return extract_frame(desc.text, slot_rules, mode) == desc.frame
    except FramelessDescription:
        return False
