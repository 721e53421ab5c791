"""Seeded synthetic scenes and controlled prediction noise.

Scene ``i`` of a corpus is generated from ``mix(seed, i)`` alone, so a corpus
is byte-identical whatever the worker count.  Each panel gets a grid layout
of symbols and texts built for its frame type, and the ground-truth
descriptions are produced by running the interpreter on the clean scene.

``perturb_predictions`` turns annotations into degraded predictions by
applying drop, jitter, label confusion, character substitution and
spurious insertion, in that order, and logs every edit.
"""
from __future__ import annotations

import json
import logging
import string
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .detection import Prediction
from .interpreter import Grammar, default_grammar, interpret_scene, reading_order, cluster_signs
from .scene import (Corpus, DescriptionAnnotation, PanelAnnotation, QuadBox, SceneParseError,
                    SceneRecord, SymbolAnnotation, TextAnnotation, IGNORE_TRANSCRIPTION,
                    PANEL_CLASSES, _box_obj, _parse_box, canonical_json)
from .textmetrics import has_cjk, is_cjk

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
# panel classes from most to least frequent under the long-tailed draw
PANEL_RANK = (3, 4, 1, 2, 6, 5, 7)
DEFAULT_ROUTES = ("G70", "G30", "G5", "G65", "G40", "G85", "G310", "S1", "S2", "S107")
QUANTITY_VALUES = {"km/h": ("20", "30", "40", "60", "80", "100", "120"),
                   "t": ("10", "20", "30", "40", "55"),
                   "m": ("2", "2.5", "3", "3.5", "4.5", "5")}
MAX_PLACEMENT_ATTEMPTS = 100


def mix(seed: int, index: int) -> int:
    """splitmix64 finaliser applied to ``seed + (index + 1) * golden``."""
    z = (int(seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class GeneratorConfig:
    n_scenes: int = 100
    seed: int = 0
    width: int = 3840
    height: int = 2160
    panels_per_scene: tuple = (1, 3)
    members_per_panel: tuple = (1, 7)
    language: str = "en"
    zipf_s: float = 1.2
    routes: tuple = DEFAULT_ROUTES
    destinations: tuple | None = None
    vehicles: tuple | None = None
    ignore_rate: float = 0.05
    empty_panel_rate: float = 0.02
    layout_jitter: float = 0.08

    def __post_init__(self):
        for name in ("panels_per_scene", "members_per_panel"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be a nonempty range, got {(lo, hi)}")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be >= 0")
        if not 0 <= self.layout_jitter < 0.2:
            raise ValueError("layout_jitter must be in [0, 0.2)")
        object.__setattr__(self, "routes", tuple(self.routes))
        for name in ("destinations", "vehicles"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(v))

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generator options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


@dataclass
class GeneratedScene:
    scene: SceneRecord
    oracle: dict


# -- layout --------------------------------------------------------------------

def _zipf_choice(rng, items: Sequence, s: float):
    w = np.arange(1, len(items) + 1, dtype=float) ** -s
    return items[int(rng.choice(len(items), p=w / w.sum()))]


def _codes(grammar: Grammar, letter: str) -> list[str]:
    pool = list(grammar.actions) if letter == "a" else [c for c in grammar.subjects if c[0] == letter]
    return sorted(pool, key=lambda c: int(c[1:]))


def _frame_rows(frame: str, rng, grammar: Grammar, cfg: GeneratorConfig) -> list[list[tuple[str, str]]]:
    """Grid rows of ``(kind, label)`` cells for one panel of ``frame``."""
    dests = list(cfg.destinations or grammar.destinations)
    vehicles = list(cfg.vehicles or grammar.vehicles)
    lo, hi = cfg.members_per_panel
    target = int(rng.integers(lo, hi + 1))
    order = [dests[i] for i in rng.permutation(len(dests))]

    def take(k: int) -> list[tuple[str, str]]:
        k = max(0, min(k, len(order)))
        out = [("text", order.pop()) for _ in range(k)]
        return out

    def route() -> tuple[str, str]:
        return ("text", str(cfg.routes[int(rng.integers(len(cfg.routes)))]))

    if frame in ("guidance", "highway", "scenic"):
        with_route = {"highway": 1.0, "guidance": 0.5, "scenic": 0.3}[frame] > rng.random()
        n_arrows = int(rng.integers(1, 4))
        n_arrows = max(1, min(n_arrows, target - int(with_route)))
        rows = [[("symbol", _zipf_choice(rng, _codes(grammar, "a"), cfg.zipf_s))] for _ in range(n_arrows)]
        if with_route:
            rows[0].append(route())
        n_dest = max(0, target - n_arrows - int(with_route))
        for k, cell in enumerate(take(n_dest)):
            rows[k % n_arrows].append(cell)
        return rows
    if frame == "prohibition":
        code = _zipf_choice(rng, _codes(grammar, "p"), cfg.zipf_s)
        row = [("symbol", code)]
        unit = grammar.subjects[code].get("unit")
        if unit and rng.random() < 0.9:
            vals = QUANTITY_VALUES.get(unit, ("10",))
            row.append(("text", vals[int(rng.integers(len(vals)))]))
        if vehicles and rng.random() < 0.4:
            row.append(("text", vehicles[int(rng.integers(len(vehicles)))]))
        rows = [row]
        if rng.random() < 0.2:
            rows.append(take(1))
        return rows
    if frame == "warning":
        rows = [[("symbol", _zipf_choice(rng, _codes(grammar, "w"), cfg.zipf_s))]]
        if rng.random() < 0.3:
            rows.append(take(1))
        return rows
    if frame == "notice":
        return [[("symbol", _zipf_choice(rng, _codes(grammar, "i"), cfg.zipf_s))]
                + take(max(1, min(2, target - 1)))]
    if frame == "dynamic":
        rows = [[route(), ("symbol", _zipf_choice(rng, _codes(grammar, "w"), cfg.zipf_s))]]
        if rng.random() < 0.3:
            rows.append(take(1))
        return rows
    raise ValueError(f"no layout for frame_type {frame!r}")


def _cell_width(kind: str, label: str, unit: float) -> float:
    if kind == "symbol":
        return unit
    n_cjk = sum(1 for c in label if is_cjk(c))
    return max(unit, 0.7 * unit * n_cjk + 0.38 * unit * (len(label) - n_cjk))


@dataclass
class _PanelPlan:
    frame_class: int
    rows: list
    unit: float
    ignored: bool

    def size(self) -> tuple[float, float]:
        u = self.unit
        pad = 0.4 * u
        if not any(self.rows):
            return 4 * u, 2 * u
        widths = [sum(_cell_width(k, l, u) for k, l in row) + 0.3 * u * (len(row) - 1) for row in self.rows]
        return max(widths) + 2 * pad, 2 * pad + u + 1.5 * u * (len(self.rows) - 1)


def _overlaps(a, b, margin: float) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or
                a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _r(v: float) -> float:
    return round(float(v), 1)


def generate_scene(config: GeneratorConfig, scene_seed: int, image_id: str = "scene",
                   grammar: Grammar | None = None) -> GeneratedScene:
    """One scene with non-overlapping panels, grid layouts and GT descriptions."""
    grammar = grammar or default_grammar(config.language)
    rng = np.random.default_rng(scene_seed)
    lo, hi = config.panels_per_scene
    n_panels = int(rng.integers(lo, hi + 1))
    W, H = config.width, config.height
    margin = 0.01 * min(W, H)

    placed: list[tuple[_PanelPlan, tuple]] = []
    for _ in range(n_panels):
        pclass = _zipf_choice(rng, PANEL_RANK, config.zipf_s)
        frame = grammar.panel_frames[pclass]
        rows = [] if rng.random() < config.empty_panel_rate else _frame_rows(frame, rng, grammar, config)
        rows = [r for r in rows if r]
        plan = _PanelPlan(pclass, rows, float(rng.uniform(50, 110)), rng.random() < config.ignore_rate)
        if plan.ignored and rows:
            rows[-1].append(("text", IGNORE_TRANSCRIPTION))
        spot = None
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            pw, ph = plan.size()
            if pw > W - 2 * margin or ph > H - 2 * margin:
                plan.unit *= 0.8
                continue
            x0 = float(rng.uniform(margin, W - margin - pw))
            y0 = float(rng.uniform(margin, H - margin - ph))
            rect = (x0, y0, x0 + pw, y0 + ph)
            if all(not _overlaps(rect, other, margin) for _, other in placed):
                spot = rect
                break
        if spot is None:
            logger.warning("%s: no room for panel %d after %d attempts; placing %d panels",
                           image_id, len(placed) + 1, MAX_PLACEMENT_ATTEMPTS, len(placed))
            break
        placed.append((plan, spot))

    symbols, texts, panels, clusters = [], [], [], []
    jit = config.layout_jitter
    for pid, (plan, (x0, y0, x1, y1)) in enumerate(placed, start=1):
        u = plan.unit
        panels.append(PanelAnnotation(QuadBox.from_xyxy(_r(x0), _r(y0), _r(x1), _r(y1)),
                                      plan.frame_class, pid))
        members = []
        for r, row in enumerate(plan.rows):
            cy = y0 + 0.4 * u + 0.5 * u + 1.5 * u * r
            x = x0 + 0.4 * u
            for kind, label in row:
                w = _cell_width(kind, label, u)
                h = u if kind == "symbol" else 0.7 * u
                dx = 0.0 if kind == "symbol" and label[0] == "a" else float(rng.uniform(-jit, jit)) * u
                dy = float(rng.uniform(-jit, jit)) * u
                box = QuadBox.from_xyxy(_r(x + dx), _r(cy - h / 2 + dy), _r(x + w + dx), _r(cy + h / 2 + dy))
                if kind == "symbol":
                    members.append(["symbol", len(symbols)])
                    symbols.append(SymbolAnnotation(box, label))
                else:
                    t = TextAnnotation(box, label)
                    if not t.ignored:
                        members.append(["text", len(texts)])
                    texts.append(t)
                x += w + 0.3 * u
        clusters.append({"panel_id": pid, "members": members})

    scene = SceneRecord(image_id, W, H, symbols, texts, panels, ())
    descs = interpret_scene(scene, grammar)
    scene = SceneRecord(image_id, W, H, symbols, texts, panels,
                        tuple(DescriptionAnnotation(d.panel_id, d.text) for d in descs))
    return GeneratedScene(scene, {"image_id": image_id, "clusters": clusters})


def scene_id(index: int) -> str:
    return f"syn_{index:06d}"


def _generate_one(args) -> GeneratedScene:
    config, i = args
    return generate_scene(config, mix(config.seed, i), scene_id(i))


def generate_scenes(config: GeneratorConfig, workers: int = 1) -> list[GeneratedScene]:
    """All scenes with their hidden oracle records, in index order."""
    jobs = [(config, i) for i in range(config.n_scenes)]
    if workers <= 1 or len(jobs) < 2:
        return [_generate_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_generate_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def generate_corpus(config: GeneratorConfig, workers: int = 1) -> Corpus:
    return Corpus([g.scene for g in generate_scenes(config, workers)])


def oracle_order(scene: SceneRecord) -> list[list[list]]:
    """Reading-order member keys per cluster, as recorded in oracle files."""
    return [[[m.kind, m.index] for m in reading_order(c)] for c in cluster_signs(scene)]


# -- noise -------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseProfile:
    drop_rate: float = 0.0
    spurious_rate: float = 0.0
    jitter_sigma: float = 0.0
    class_confusion_rate: float = 0.0
    char_sub_rate: float = 0.0

    def __post_init__(self):
        for name in ("drop_rate", "class_confusion_rate", "char_sub_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if self.spurious_rate < 0:
            raise ValueError("spurious_rate must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseProfile":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown noise options: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    @classmethod
    def load(cls, path) -> "NoiseProfile":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def __le__(self, other: "NoiseProfile") -> bool:
        return all(getattr(self, k) <= getattr(other, k) for k in self.__dataclass_fields__)


ZERO_NOISE = NoiseProfile()


@dataclass
class PerturbationLog:
    """Edits applied to one scene; sign ids look like ``"text:3"``."""

    image_id: str
    dropped: list = field(default_factory=list)
    jittered: list = field(default_factory=list)
    label_flips: list = field(default_factory=list)
    char_edits: list = field(default_factory=list)
    spurious: list = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not (self.dropped or self.jittered or self.label_flips or self.char_edits or self.spurious)

    def to_dict(self) -> dict:
        return asdict(self)


def _sign_list(scene: SceneRecord) -> list[tuple[str, Prediction]]:
    out = [(f"symbol:{i}", Prediction(s.box, "symbol", s.class_code)) for i, s in enumerate(scene.symbols)]
    out += [(f"text:{i}", Prediction(t.box, "text", t.transcription)) for i, t in enumerate(scene.texts)]
    out += [(f"panel:{i}", Prediction(p.box, "panel", str(p.panel_class))) for i, p in enumerate(scene.panels)]
    return out


def _cjk_pool(grammar: Grammar) -> list[str]:
    zh = default_grammar("zh") if grammar.language != "zh" else grammar
    chars = {c for d in zh.destinations + zh.vehicles for c in d if is_cjk(c)}
    return sorted(chars)


def _substitute(ch: str, rng, cjk_pool: list[str]) -> str:
    if ch.isdigit():
        pool = string.digits
    elif ch in string.ascii_lowercase:
        pool = string.ascii_lowercase
    elif ch in string.ascii_uppercase:
        pool = string.ascii_uppercase
    elif is_cjk(ch):
        pool = cjk_pool
    else:
        pool = string.ascii_lowercase
    pool = [c for c in pool if c != ch]
    return pool[int(rng.integers(len(pool)))]


def perturb_predictions(scene: SceneRecord, profile: NoiseProfile, seed: int,
                        grammar: Grammar | None = None) -> tuple[list[Prediction], PerturbationLog]:
    """Degraded predictions for ``scene`` and the log of what was changed.

    Steps run in the fixed order drop, jitter, confuse, substitute, insert.
    Ignored ("###") texts are never relabelled.  A zero profile returns the
    annotations unchanged.
    """
    grammar = grammar or default_grammar("zh" if any(has_cjk(t.transcription) for t in scene.texts) else "en")
    rng = np.random.default_rng(seed)
    log = PerturbationLog(scene.image_id)
    signs = _sign_list(scene)

    if profile.drop_rate > 0:
        keep = rng.random(len(signs)) >= profile.drop_rate
        log.dropped = [sid for (sid, _), k in zip(signs, keep) if not k]
        signs = [s for s, k in zip(signs, keep) if k]

    if profile.jitter_sigma > 0:
        out = []
        for sid, p in signs:
            noise = rng.normal(0.0, profile.jitter_sigma, size=(4, 2))
            box = QuadBox(tuple((x + n[0], y + n[1]) for (x, y), n in zip(p.box.corners, noise)))
            if box != p.box:
                log.jittered.append(sid)
            out.append((sid, Prediction(box, p.kind, p.label, p.score)))
        signs = out

    symbol_codes = sorted(set(grammar.actions) | set(grammar.subjects), key=lambda c: (c[0], int(c[1:])))
    if profile.class_confusion_rate > 0:
        out = []
        for sid, p in signs:
            if p.kind != "text" and rng.random() < profile.class_confusion_rate:
                pool = symbol_codes if p.kind == "symbol" else [str(c) for c in PANEL_CLASSES]
                pool = [c for c in pool if c != p.label]
                new = pool[int(rng.integers(len(pool)))]
                log.label_flips.append([sid, p.label, new])
                p = Prediction(p.box, p.kind, new, p.score)
            out.append((sid, p))
        signs = out

    if profile.char_sub_rate > 0:
        cjk_pool = _cjk_pool(grammar)
        out = []
        for sid, p in signs:
            if p.kind == "text" and p.label != IGNORE_TRANSCRIPTION:
                chars = list(p.label)
                hits = rng.random(len(chars)) < profile.char_sub_rate
                for pos in np.flatnonzero(hits):
                    new = _substitute(chars[pos], rng, cjk_pool)
                    log.char_edits.append([sid, int(pos), chars[pos], new])
                    chars[pos] = new
                p = Prediction(p.box, p.kind, "".join(chars), p.score)
            out.append((sid, p))
        signs = out

    preds = [p for _, p in signs]
    if profile.spurious_rate > 0:
        k = int(rng.poisson(profile.spurious_rate))
        for _ in range(k):
            p = _spurious(scene, rng, grammar, symbol_codes)
            if p is not None:
                log.spurious.append([len(preds), p.kind, p.label])
                preds.append(p)
    return preds, log


def _spurious(scene: SceneRecord, rng, grammar: Grammar, symbol_codes: list[str]) -> Prediction | None:
    kind = ("symbol", "text", "panel")[int(rng.integers(3))]
    same = {"symbol": scene.symbols, "text": scene.texts, "panel": scene.panels}[kind]
    sizes = [a.box.bounds for a in same] or [a.box.bounds for a in (*scene.symbols, *scene.texts, *scene.panels)]
    if sizes:
        b = sizes[int(rng.integers(len(sizes)))]
        w, h = b[2] - b[0], b[3] - b[1]
    else:
        w = h = 64.0
    if w >= scene.width or h >= scene.height:
        return None
    blockers = [a.box.bounds for a in (scene.panels if kind == "panel" else (*scene.symbols, *scene.texts))]
    for _ in range(50):
        x0 = float(rng.uniform(0, scene.width - w))
        y0 = float(rng.uniform(0, scene.height - h))
        rect = (x0, y0, x0 + w, y0 + h)
        if all(not _overlaps(rect, o, 0.0) for o in blockers):
            break
    else:
        return None
    if kind == "symbol":
        label = symbol_codes[int(rng.integers(len(symbol_codes)))]
    elif kind == "text":
        label = grammar.destinations[int(rng.integers(len(grammar.destinations)))]
    else:
        label = str(int(rng.integers(1, 8)))
    box = QuadBox.from_xyxy(_r(rect[0]), _r(rect[1]), _r(rect[2]), _r(rect[3]))
    return Prediction(box, kind, label)


def predictions_to_scene(image_id: str, preds: Sequence[Prediction],
                         width: int = 0, height: int = 0) -> SceneRecord:
    """Predictions re-packed as an annotation scene (panel ids by position)."""
    symbols = [SymbolAnnotation(p.box, p.label) for p in preds if p.kind == "symbol"]
    texts = [TextAnnotation(p.box, p.label) for p in preds if p.kind == "text"]
    panels = [PanelAnnotation(p.box, int(p.label), k)
              for k, p in enumerate((p for p in preds if p.kind == "panel"), start=1)]
    return SceneRecord(image_id, width, height, symbols, texts, panels, ())


# -- prediction files ---------------------------------------------------------------

def prediction_to_obj(p: Prediction) -> dict:
    return {"kind": p.kind, "label": p.label, "score": p.score, "box": _box_obj(p.box)}


def serialize_predictions(image_id: str, preds: Iterable[Prediction]) -> bytes:
    obj = {"image_id": image_id, "predictions": [prediction_to_obj(p) for p in preds]}
    return canonical_json(obj).encode("ascii")


def parse_predictions(obj: dict, line: int | None = None) -> tuple[str, list[Prediction]]:
    if not isinstance(obj, dict) or not isinstance(obj.get("image_id"), str):
        raise SceneParseError("prediction record needs a string image_id", line)
    raw = obj.get("predictions")
    if not isinstance(raw, list):
        raise SceneParseError("prediction record needs a predictions list", line)
    out = []
    for k, entry in enumerate(raw):
        where = f"predictions[{k}]"
        if not isinstance(entry, dict):
            raise SceneParseError(f"{where}: expected an object", line)
        box = _parse_box(entry.get("box"), where, line)
        try:
            out.append(Prediction(box, str(entry.get("kind")), str(entry.get("label")),
                                  float(entry.get("score", 1.0))))
        except (TypeError, ValueError) as exc:
            raise SceneParseError(f"{where}: {exc}", line) from None
    return obj["image_id"], out


def write_jsonl(path, lines: Iterable[bytes]) -> None:
    with open(path, "wb") as fh:
        for b in lines:
            fh.write(b + b"\n")


def log_line(log: PerturbationLog) -> bytes:
    return canonical_json(log.to_dict()).encode("ascii")
