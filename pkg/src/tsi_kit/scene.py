"""Annotation data model, JSON Lines corpus format, validation and splitting.

A scene holds the three sign kinds of one road image (symbols, texts and guide
panels) plus one natural-language description per panel.  All coordinates are
stored quantized to 6 decimals so that ``parse_scene(serialize_scene(s)) == s``
holds exactly.
"""
from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

IGNORE_TRANSCRIPTION = "###"
SYMBOL_LETTERS = ("w", "i", "p", "a")
PANEL_CLASSES = range(1, 8)
CLASS_CODE_RE = re.compile(r"^([a-z])([1-9][0-9]*)$")

_DECIMALS = 6


class SceneParseError(ValueError):
    """Malformed JSON syntax in a corpus line."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


class SceneValidationError(ValueError):
    """A record is syntactically valid JSON but violates the schema."""

    def __init__(self, field_name: str, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{field_name}: {message}")
        self.field = field_name
        self.line = line


class Point2D(tuple):
    """An (x, y) pixel coordinate."""

    __slots__ = ()

    def __new__(cls, x: float, y: float):
        return super().__new__(cls, (float(x), float(y)))

    def __getnewargs__(self):
        return (self[0], self[1])

    @property
    def x(self) -> float:
        return self[0]

    @property
    def y(self) -> float:
        return self[1]


def _q(v: float) -> float:
    r = round(float(v), _DECIMALS)
    return 0.0 if r == 0 else r


@dataclass(frozen=True)
class QuadBox:
    """Four corner points, clockwise in image coordinates (y pointing down)."""

    corners: tuple

    def __post_init__(self):
        pts = tuple(Point2D(_q(x), _q(y)) for x, y in self.corners)
        if len(pts) != 4:
            raise ValueError(f"QuadBox needs 4 corners, got {len(pts)}")
        if not all(math.isfinite(c) for p in pts for c in p):
            raise ValueError("QuadBox corners must be finite")
        object.__setattr__(self, "corners", pts)

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float) -> "QuadBox":
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.corners, dtype=float)

    @property
    def signed_area(self) -> float:
        """Shoelace area; positive for clockwise order in image coordinates."""
        a = self.as_array()
        x, y = a[:, 0], a[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    @property
    def area(self) -> float:
        return abs(self.signed_area)

    @property
    def center(self) -> Point2D:
        from .geometry import polygon_centroid

        cx, cy = polygon_centroid(self.as_array())
        return Point2D(cx, cy)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.corners]
        ys = [p[1] for p in self.corners]
        return min(xs), min(ys), max(xs), max(ys)

    def is_simple(self) -> bool:
        from .geometry import segments_intersect

        c = self.corners
        # a quad can only self-intersect through its two pairs of opposite edges
        return not (
            segments_intersect(c[0], c[1], c[2], c[3])
            or segments_intersect(c[1], c[2], c[3], c[0])
        )

    def map(self, fn) -> "QuadBox":
        return QuadBox(tuple(fn(x, y) for x, y in self.corners))


@dataclass(frozen=True)
class SymbolAnnotation:
    box: QuadBox
    class_code: str
    ignored: bool = False


@dataclass(frozen=True)
class TextAnnotation:
    box: QuadBox
    transcription: str
    ignored: bool | None = None

    def __post_init__(self):
        if self.ignored is None:
            object.__setattr__(self, "ignored", self.transcription == IGNORE_TRANSCRIPTION)


@dataclass(frozen=True)
class PanelAnnotation:
    box: QuadBox
    panel_class: int
    panel_id: int


@dataclass(frozen=True)
class DescriptionAnnotation:
    panel_id: int
    text: str


@dataclass(frozen=True)
class SceneRecord:
    image_id: str
    width: int
    height: int
    symbols: tuple = ()
    texts: tuple = ()
    panels: tuple = ()
    descriptions: tuple = ()

    def __post_init__(self):
        for name in ("symbols", "texts", "panels", "descriptions"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def panel_by_id(self, panel_id: int) -> PanelAnnotation | None:
        for p in self.panels:
            if p.panel_id == panel_id:
                return p
        return None

    def map_boxes(self, fn) -> "SceneRecord":
        """Apply a point map ``fn(x, y) -> (x, y)`` to every box."""
        return SceneRecord(
            self.image_id,
            self.width,
            self.height,
            tuple(SymbolAnnotation(s.box.map(fn), s.class_code, s.ignored) for s in self.symbols),
            tuple(TextAnnotation(t.box.map(fn), t.transcription, t.ignored) for t in self.texts),
            tuple(PanelAnnotation(p.box.map(fn), p.panel_class, p.panel_id) for p in self.panels),
            self.descriptions,
        )


def load_vocab(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise SceneValidationError("vocab", "expected a JSON object")
    data.pop("schema_version", None)
    return {str(k): str(v) for k, v in data.items()}


@dataclass
class Corpus:
    scenes: list = field(default_factory=list)
    symbol_vocab: dict = field(default_factory=dict)
    panel_vocab: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def vocab_violations(self) -> list[str]:
        out = []
        for scene in self.scenes:
            for s in scene.symbols:
                if self.symbol_vocab and s.class_code not in self.symbol_vocab:
                    out.append(f"{scene.image_id}: symbol class {s.class_code!r} not in vocab")
            for p in scene.panels:
                if self.panel_vocab and str(p.panel_class) not in self.panel_vocab:
                    out.append(f"{scene.image_id}: panel class {p.panel_class} not in vocab")
        return out


# -- serialization ---------------------------------------------------------

def _enc(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.{_DECIMALS}f}"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=True)
    if value is None:
        return "null"
    if isinstance(value, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_enc(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_enc(v) for v in value) + "]"
    raise TypeError(f"cannot encode {type(value).__name__}")


def canonical_json(value) -> str:
    """Encode with fixed float formatting and ASCII escaping; key order as given."""
    return _enc(value)


def _box_obj(box: QuadBox) -> list:
    return [[p[0], p[1]] for p in box.corners]


def scene_to_obj(scene: SceneRecord) -> dict:
    return {
        "image_id": scene.image_id,
        "width": scene.width,
        "height": scene.height,
        "symbols": [
            {"box": _box_obj(s.box), "class_code": s.class_code, "ignored": s.ignored}
            for s in scene.symbols
        ],
        "texts": [
            {"box": _box_obj(t.box), "transcription": t.transcription, "ignored": t.ignored}
            for t in scene.texts
        ],
        "panels": [
            {"box": _box_obj(p.box), "panel_class": p.panel_class, "panel_id": p.panel_id}
            for p in scene.panels
        ],
        "descriptions": [{"panel_id": d.panel_id, "text": d.text} for d in scene.descriptions],
    }


def serialize_scene(scene: SceneRecord) -> bytes:
    """One canonical JSON line (no trailing newline), UTF-8 encoded."""
    return canonical_json(scene_to_obj(scene)).encode("utf-8")


_SCENE_KEYS = ("image_id", "width", "height", "symbols", "texts", "panels", "descriptions")
_ENTRY_KEYS = {
    "symbols": ("box", "class_code", "ignored"),
    "texts": ("box", "transcription", "ignored"),
    "panels": ("box", "panel_class", "panel_id"),
    "descriptions": ("panel_id", "text"),
}


def _warn_unknown(obj: dict, known: Iterable[str], where: str, line: int | None) -> None:
    extra = sorted(set(obj) - set(known))
    if extra:
        logger.warning("%s%s: ignoring unknown field(s) %s",
                       f"line {line}: " if line is not None else "", where, ", ".join(extra))


def _require(obj: dict, key: str, types, where: str, line: int | None):
    if key not in obj:
        raise SceneValidationError(f"{where}.{key}", "missing", line)
    val = obj[key]
    if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise SceneValidationError(f"{where}.{key}", f"expected {types}, got bool", line)
    if not isinstance(val, types):
        raise SceneValidationError(f"{where}.{key}", f"wrong type {type(val).__name__}", line)
    return val


def _parse_box(raw, where: str, line: int | None) -> QuadBox:
    if not isinstance(raw, list) or len(raw) != 4:
        raise SceneValidationError(where, "box must be a list of 4 [x, y] pairs", line)
    pts = []
    for p in raw:
        if (not isinstance(p, list) or len(p) != 2
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in p)):
            raise SceneValidationError(where, "box corner must be [x, y] numbers", line)
        if not all(math.isfinite(c) for c in p):
            raise SceneValidationError(where, "box corner must be finite", line)
        pts.append((p[0], p[1]))
    return QuadBox(tuple(pts))


def scene_from_obj(obj, line: int | None = None, extra_entry_keys: Sequence[str] = ()) -> SceneRecord:
    if not isinstance(obj, dict):
        raise SceneValidationError("record", "expected a JSON object", line)
    _warn_unknown(obj, _SCENE_KEYS, "record", line)
    image_id = _require(obj, "image_id", str, "record", line)
    width = _require(obj, "width", int, "record", line)
    height = _require(obj, "height", int, "record", line)
    if width <= 0 or height <= 0:
        raise SceneValidationError("record.width/height", "must be positive", line)
    lists = {}
    for key in ("symbols", "texts", "panels", "descriptions"):
        raw = obj.get(key, [])
        if not isinstance(raw, list):
            raise SceneValidationError(f"record.{key}", "expected a list", line)
        for i, entry in enumerate(raw):
            if not isinstance(entry, dict):
                raise SceneValidationError(f"{key}[{i}]", "expected an object", line)
            _warn_unknown(entry, _ENTRY_KEYS[key] + tuple(extra_entry_keys), f"{key}[{i}]", line)
        lists[key] = raw

    symbols = []
    for i, e in enumerate(lists["symbols"]):
        where = f"symbols[{i}]"
        code = _require(e, "class_code", str, where, line)
        if not CLASS_CODE_RE.match(code):
            raise SceneValidationError(f"{where}.class_code", f"{code!r} is not letter+integer", line)
        ignored = e.get("ignored", False)
        if not isinstance(ignored, bool):
            raise SceneValidationError(f"{where}.ignored", "expected boolean", line)
        symbols.append(SymbolAnnotation(_parse_box(e.get("box"), f"{where}.box", line), code, ignored))

    texts = []
    for i, e in enumerate(lists["texts"]):
        where = f"texts[{i}]"
        tr = _require(e, "transcription", str, where, line)
        ignored = e.get("ignored")
        if ignored is not None and not isinstance(ignored, bool):
            raise SceneValidationError(f"{where}.ignored", "expected boolean", line)
        texts.append(TextAnnotation(_parse_box(e.get("box"), f"{where}.box", line), tr, ignored))

    panels = []
    for i, e in enumerate(lists["panels"]):
        where = f"panels[{i}]"
        pc = _require(e, "panel_class", int, where, line)
        if pc not in PANEL_CLASSES:
            raise SceneValidationError(f"{where}.panel_class", "panel_class out of range", line)
        pid = _require(e, "panel_id", int, where, line)
        panels.append(PanelAnnotation(_parse_box(e.get("box"), f"{where}.box", line), pc, pid))

    descriptions = []
    for i, e in enumerate(lists["descriptions"]):
        where = f"descriptions[{i}]"
        pid = _require(e, "panel_id", int, where, line)
        text = _require(e, "text", str, where, line)
        descriptions.append(DescriptionAnnotation(pid, text))

    return SceneRecord(image_id, width, height, symbols, texts, panels, descriptions)


def _loads(data, line: int | None):
    if isinstance(data, (bytes, bytearray)):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SceneParseError(f"invalid UTF-8: {exc.reason}", line, exc.start) from None
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise SceneParseError(exc.msg, line if line is not None else exc.lineno, exc.pos) from None


def parse_scene(data: bytes | str, line: int | None = None) -> SceneRecord:
    """Parse one corpus line into a SceneRecord.

    Raises SceneParseError on malformed JSON and SceneValidationError on
    schema problems (missing keys, wrong types, panel_class outside 1..7).
    Scene-level rules are left to :func:`validate_scene`.
    """
    return scene_from_obj(_loads(data, line), line)


def read_corpus(path, symbol_vocab: dict | None = None, panel_vocab: dict | None = None) -> Corpus:
    scenes = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if raw.strip():
                scenes.append(parse_scene(raw, line=lineno))
    return Corpus(scenes, dict(symbol_vocab or {}), dict(panel_vocab or {}))


def write_corpus(path, scenes: Iterable[SceneRecord]) -> None:
    with open(path, "wb") as fh:
        for scene in scenes:
            fh.write(serialize_scene(scene) + b"\n")


# -- validation ------------------------------------------------------------

def _box_violations(box: QuadBox, where: str, width: int, height: int) -> list[str]:
    out = []
    if box.area <= 0:
        out.append(f"{where}: degenerate box (zero area)")
    elif not box.is_simple():
        out.append(f"{where}: self-intersecting box")
    elif box.signed_area < 0:
        out.append(f"{where}: corners not clockwise")
    for x, y in box.corners:
        if not (0 <= x <= width and 0 <= y <= height):
            out.append(f"{where}: box outside image")
            break
    return out


def validate_scene(scene: SceneRecord) -> list[str]:
    """Return a list of rule violations, each naming the entity and the rule."""
    out: list[str] = []
    w, h = scene.width, scene.height
    if w <= 0 or h <= 0:
        out.append("scene: non-positive image size")
    for i, s in enumerate(scene.symbols):
        where = f"symbols[{i}]"
        out += _box_violations(s.box, where, w, h)
        m = CLASS_CODE_RE.match(s.class_code)
        if not m:
            out.append(f"{where}: class_code {s.class_code!r} is not letter+integer")
        elif m.group(1) not in SYMBOL_LETTERS:
            out.append(f"{where}: unknown symbol type letter {m.group(1)!r}")
    for i, t in enumerate(scene.texts):
        where = f"texts[{i}]"
        out += _box_violations(t.box, where, w, h)
        if t.ignored != (t.transcription == IGNORE_TRANSCRIPTION):
            out.append(f"{where}: ignored flag inconsistent with transcription")
    ids = Counter(p.panel_id for p in scene.panels)
    for i, p in enumerate(scene.panels):
        where = f"panels[{i}]"
        out += _box_violations(p.box, where, w, h)
        if p.panel_class not in PANEL_CLASSES:
            out.append(f"{where}: panel_class out of range")
        if ids[p.panel_id] > 1:
            out.append(f"{where}: duplicate panel_id {p.panel_id}")
    for i, d in enumerate(scene.descriptions):
        if d.panel_id not in ids:
            out.append(f"descriptions[{i}]: dangling panel reference {d.panel_id}")
    return out


# -- statistics and splitting ---------------------------------------------

@dataclass
class CategoryHistogram:
    symbol_counts: dict = field(default_factory=dict)
    panel_counts: dict = field(default_factory=dict)
    n_scenes: int = 0
    n_texts: int = 0
    n_ignored_texts: int = 0
    text_chars: int = 0
    description_chars: int = 0
    mean_area: dict = field(default_factory=lambda: {"symbol": 0.0, "text": 0.0, "panel": 0.0})

    def panel_frequencies(self) -> dict[int, float]:
        total = sum(self.panel_counts.values())
        if not total:
            return {c: 0.0 for c in PANEL_CLASSES}
        return {c: self.panel_counts.get(c, 0) / total for c in PANEL_CLASSES}

    def to_dict(self) -> dict:
        return {
            "n_scenes": self.n_scenes,
            "symbol_counts": dict(sorted(self.symbol_counts.items())),
            "panel_counts": {str(k): v for k, v in sorted(self.panel_counts.items())},
            "n_texts": self.n_texts,
            "n_ignored_texts": self.n_ignored_texts,
            "text_chars": self.text_chars,
            "description_chars": self.description_chars,
            "mean_area": dict(self.mean_area),
        }


def corpus_stats(corpus: Corpus | Iterable[SceneRecord]) -> CategoryHistogram:
    """Per-category counts over non-ignored signs, character totals and mean areas."""
    scenes = corpus.scenes if isinstance(corpus, Corpus) else list(corpus)
    sym = Counter()
    pan = Counter()
    areas = defaultdict(list)
    hist = CategoryHistogram(n_scenes=len(scenes))
    for scene in scenes:
        for s in scene.symbols:
            if not s.ignored:
                sym[s.class_code] += 1
                areas["symbol"].append(s.box.area)
        for t in scene.texts:
            if t.ignored:
                hist.n_ignored_texts += 1
                continue
            hist.n_texts += 1
            hist.text_chars += len(t.transcription)
            areas["text"].append(t.box.area)
        for p in scene.panels:
            pan[p.panel_class] += 1
            areas["panel"].append(p.box.area)
        hist.description_chars += sum(len(d.text) for d in scene.descriptions)
    hist.symbol_counts = dict(sym)
    hist.panel_counts = dict(pan)
    hist.mean_area = {k: (float(np.mean(areas[k])) if areas[k] else 0.0)
                      for k in ("symbol", "text", "panel")}
    return hist


def _stratum(scene: SceneRecord) -> int:
    """Dominant panel class of a scene (ties to the smaller class); 0 without panels."""
    counts = Counter(p.panel_class for p in scene.panels)
    if not counts:
        return 0
    return min(counts, key=lambda c: (-counts[c], c))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def frequency_gaps(train: Iterable[SceneRecord], test: Iterable[SceneRecord]) -> dict[int, float]:
    fa = corpus_stats(list(train)).panel_frequencies()
    fb = corpus_stats(list(test)).panel_frequencies()
    return {c: abs(fa[c] - fb[c]) for c in PANEL_CLASSES}


def split_corpus(corpus: Corpus, test_fraction: float, seed: int,
                 tolerance: float = 0.05) -> tuple[Corpus, Corpus]:
    """Stratified random train/test split over scene panel classes.

    ``|test| == round(test_fraction * N)``.  Scenes are stratified by their
    dominant panel class and quotas are assigned by largest remainder; if the
    per-class relative frequency gap still exceeds ``tolerance`` a bounded
    swap search tries to close it, and a warning names any class that stays
    out of tolerance.
    """
    n = len(corpus.scenes)
    if n < 2:
        raise ValueError("split_corpus needs at least 2 scenes")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    n_test = min(max(_round_half_up(test_fraction * n), 1), n - 1)
    rng = np.random.default_rng(seed)

    strata: dict[int, list[int]] = defaultdict(list)
    for i, scene in enumerate(corpus.scenes):
        strata[_stratum(scene)].append(i)
    keys = sorted(strata)
    for k in keys:
        members = strata[k]
        strata[k] = [members[j] for j in rng.permutation(len(members))]

    exact = {k: len(strata[k]) * n_test / n for k in keys}
    quota = {k: int(math.floor(exact[k])) for k in keys}
    short = n_test - sum(quota.values())
    for k in sorted(keys, key=lambda k: (-(exact[k] - quota[k]), k))[:short]:
        quota[k] += 1

    test_idx = set()
    for k in keys:
        test_idx.update(strata[k][:quota[k]])

    test_idx = _refine_split(corpus.scenes, test_idx, tolerance, rng)

    train = [s for i, s in enumerate(corpus.scenes) if i not in test_idx]
    test = [s for i, s in enumerate(corpus.scenes) if i in test_idx]
    gaps = frequency_gaps(train, test)
    bad = [c for c, g in gaps.items() if g > tolerance]
    if bad:
        logger.warning("split tolerance %.3f not met for panel classes %s", tolerance, bad)
    return (Corpus(train, dict(corpus.symbol_vocab), dict(corpus.panel_vocab)),
            Corpus(test, dict(corpus.symbol_vocab), dict(corpus.panel_vocab)))


def _refine_split(scenes, test_idx: set, tolerance: float, rng, max_rounds: int = 200) -> set:
    counts = [Counter(p.panel_class for p in s.panels) for s in scenes]
    classes = list(PANEL_CLASSES)

    def gap_of(test: set) -> float:
        a, b = Counter(), Counter()
        for i, c in enumerate(counts):
            (b if i in test else a).update(c)
        ta, tb = sum(a.values()) or 1, sum(b.values()) or 1
        return max(abs(a[k] / ta - b[k] / tb) for k in classes)

    current = gap_of(test_idx)
    if current <= tolerance:
        return test_idx
    test_idx = set(test_idx)
    for _ in range(max_rounds):
        test_list = sorted(test_idx)
        train_list = [i for i in range(len(scenes)) if i not in test_idx]
        i = test_list[int(rng.integers(len(test_list)))]
        j = train_list[int(rng.integers(len(train_list)))]
        cand = (test_idx - {i}) | {j}
        g = gap_of(cand)
        if g < current:
            test_idx, current = cand, g
            if current <= tolerance:
                break
    return test_idx
