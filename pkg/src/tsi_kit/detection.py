"""Box matching, precision/recall/F-measure and category-aware recognition scores."""
from __future__ import annotations

import logging
import math
import re
import unicodedata
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import as_polygon, polygon_area, signed_area
from .scene import IGNORE_TRANSCRIPTION, QuadBox, SceneRecord

logger = logging.getLogger(__name__)

KINDS = ("symbol", "text", "panel")
DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Prediction:
    box: QuadBox
    kind: str
    label: str
    score: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if not 0 <= self.score <= 1:
            raise ValueError("score must be in [0, 1]")
        if self.kind == "panel" and not re.fullmatch(r"[1-7]", self.label):
            raise ValueError(f"panel label must be a class 1..7, got {self.label!r}")
        if self.kind == "symbol" and not re.fullmatch(r"[a-z][1-9][0-9]*", self.label):
            raise ValueError(f"symbol label must be letter+integer, got {self.label!r}")


@dataclass(frozen=True)
class GroundTruth:
    box: QuadBox
    label: str
    ignored: bool = False


def scene_ground_truth(scene: SceneRecord, kind: str) -> list[GroundTruth]:
    if kind == "symbol":
        return [GroundTruth(s.box, s.class_code, s.ignored) for s in scene.symbols]
    if kind == "text":
        return [GroundTruth(t.box, t.transcription, t.ignored) for t in scene.texts]
    if kind == "panel":
        return [GroundTruth(p.box, str(p.panel_class)) for p in scene.panels]
    raise ValueError(f"unknown kind {kind!r}")


def scene_predictions(scene: SceneRecord) -> list[Prediction]:
    """Treat an annotated scene as a perfect prediction set (score 1)."""
    preds = [Prediction(s.box, "symbol", s.class_code) for s in scene.symbols]
    preds += [Prediction(t.box, "text", t.transcription) for t in scene.texts]
    preds += [Prediction(p.box, "panel", str(p.panel_class)) for p in scene.panels]
    return preds


# -- polygon intersection ----------------------------------------------------

def _ccw(p: np.ndarray) -> np.ndarray:
    return p if signed_area(p) > 0 else p[::-1]


def _is_convex(p: np.ndarray) -> bool:
    n = len(p)
    signs = set()
    for i in range(n):
        a, b, c = p[i], p[(i + 1) % n], p[(i + 2) % n]
        cr = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cr != 0:
            signs.add(cr > 0)
    return len(signs) <= 1


def _clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman; both polygons with positive signed area."""
    out = [tuple(p) for p in subject]
    m = len(clip)
    for i in range(m):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % m]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
    return np.asarray(out, dtype=float).reshape(-1, 2)


def _triangulate(p: np.ndarray) -> list[np.ndarray]:
    """Ear clipping for a simple polygon with positive signed area."""
    idx = list(range(len(p)))
    tris = []
    guard = 0
    while len(idx) > 3 and guard < 10 * len(p):
        guard += 1
        for k in range(len(idx)):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = p[i0], p[i1], p[i2]
            if (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]) <= 0:
                continue
            tri = np.array([a, b, c])
            if any(_inside_tri(p[j], tri) for j in idx if j not in (i0, i1, i2)):
                continue
            tris.append(tri)
            idx.pop(k)
            break
    tris.append(p[idx])
    return tris


def _inside_tri(pt, tri) -> bool:
    a, b, c = tri
    d1 = (b[0] - a[0]) * (pt[1] - a[1]) - (b[1] - a[1]) * (pt[0] - a[0])
    d2 = (c[0] - b[0]) * (pt[1] - b[1]) - (c[1] - b[1]) * (pt[0] - b[0])
    d3 = (a[0] - c[0]) * (pt[1] - c[1]) - (a[1] - c[1]) * (pt[0] - c[0])
    return d1 >= 0 and d2 >= 0 and d3 >= 0


def _convex_pieces(p: np.ndarray) -> list[np.ndarray]:
    p = _ccw(p)
    return [p] if _is_convex(p) else _triangulate(p)


def polygon_intersection_area(a, b) -> float:
    pa, pb = as_polygon(a), as_polygon(b)
    if polygon_area(pa) == 0 or polygon_area(pb) == 0:
        return 0.0
    total = 0.0
    for x in _convex_pieces(pa):
        for y in _convex_pieces(pb):
            clipped = _clip_convex(x, y)
            if len(clipped) >= 3:
                total += polygon_area(clipped)
    return total


def iou(a, b) -> float:
    """Intersection over union of two quadrilaterals (convex polygon clipping)."""
    pa, pb = as_polygon(a), as_polygon(b)
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    if area_a == 0 or area_b == 0:
        warnings.warn("iou: degenerate box, returning 0.0", RuntimeWarning, stacklevel=2)
        return 0.0
    inter = polygon_intersection_area(pa, pb)
    union = area_a + area_b - inter
    return min(max(inter / union, 0.0), 1.0)


def _bounds(p: np.ndarray):
    return p[:, 0].min(), p[:, 1].min(), p[:, 0].max(), p[:, 1].max()


def iou_matrix(gt_boxes: Sequence, pred_boxes: Sequence) -> np.ndarray:
    g = [as_polygon(b) for b in gt_boxes]
    p = [as_polygon(b) for b in pred_boxes]
    gb = [_bounds(x) for x in g]
    pb = [_bounds(x) for x in p]
    out = np.zeros((len(g), len(p)))
    for i, (gi, bi) in enumerate(zip(g, gb)):
        for j, (pj, bj) in enumerate(zip(p, pb)):
            if bi[0] > bj[2] or bj[0] > bi[2] or bi[1] > bj[3] or bj[1] > bi[3]:
                continue
            out[i, j] = iou(gi, pj)
    return out


# -- matching ------------------------------------------------------------------

@dataclass
class MatchOutcome:
    pairs: list = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ignored_matches: int = 0

    def __add__(self, other: "MatchOutcome") -> "MatchOutcome":
        return MatchOutcome([], self.tp + other.tp, self.fp + other.fp,
                            self.fn + other.fn, self.ignored_matches + other.ignored_matches)


def _greedy(ious: np.ndarray, rows: list[int], threshold: float) -> list[tuple[int, int, float]]:
    cand = [(-ious[i, j], i, j) for i in rows for j in range(ious.shape[1]) if ious[i, j] >= threshold]
    cand.sort()
    used_g, used_p, pairs = set(), set(), []
    for neg, i, j in cand:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        pairs.append((i, j, -neg))
    return pairs


def match_detections(gt: Sequence[GroundTruth], pred: Sequence[Prediction],
                     iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> MatchOutcome:
    """One-to-one greedy matching by descending IoU.

    Ties break on (lower gt index, lower pred index).  Non-ignored ground truth
    is matched first; a leftover prediction overlapping an ignored ground-truth
    box at or above the threshold is counted in ``ignored_matches`` instead of
    as a false positive.  Ignored ground truth never counts as a miss.

    Greedy matching maximises the number of matches whenever the ground-truth
    boxes do not overlap each other, since then no prediction can clear a 0.5
    threshold against two of them.
    """
    ious = iou_matrix([g.box for g in gt], [p.box for p in pred])
    cared = [i for i, g in enumerate(gt) if not g.ignored]
    pairs = _greedy(ious, cared, iou_threshold)
    matched_p = {j for _, j, _ in pairs}
    ignored_rows = [i for i, g in enumerate(gt) if g.ignored]
    ignored = 0
    for j in range(len(pred)):
        if j in matched_p:
            continue
        if any(ious[i, j] >= iou_threshold for i in ignored_rows):
            ignored += 1
    tp = len(pairs)
    return MatchOutcome(pairs, tp, len(pred) - tp - ignored, len(cared) - tp, ignored)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f_measure: float

    def as_percent(self) -> dict:
        return {"precision": round(100 * self.precision, 2), "recall": round(100 * self.recall, 2),
                "f_measure": round(100 * self.f_measure, 2)}


def prf(outcome: MatchOutcome) -> PRF:
    tp, fp, fn = outcome.tp, outcome.fp, outcome.fn
    if tp + fp == 0 and tp + fn == 0:
        return PRF(1.0, 1.0, 1.0)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f)


def cross_entropy(prob: Sequence[float], target_index: int) -> float:
    """Negative log-likelihood of the target class, probability floored at 1e-12."""
    p = np.asarray(prob, dtype=float)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("prob must be a non-empty vector")
    if not 0 <= target_index < len(p):
        raise IndexError(f"target_index {target_index} out of range for {len(p)} classes")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities must sum to 1")
    return float(-math.log(max(float(p[target_index]), 1e-12)))


def one_hot_decode(prob: Sequence[float], categories: Sequence[str]) -> str:
    """Map a category probability vector to its most likely label."""
    return categories[int(np.argmax(prob))]


# -- recognition ---------------------------------------------------------------

def normalize_text(s: str) -> str:
    return unicodedata.normalize("NFC", s).strip()


def char_class(ch: str) -> str:
    if "0" <= ch <= "9":
        return "numeral"
    if ("一" <= ch <= "鿿") or ("㐀" <= ch <= "䶿") or ("\U00020000" <= ch <= "\U0002a6df"):
        return "chinese"
    if ("a" <= ch <= "z") or ("A" <= ch <= "Z"):
        return "english"
    return "other"


CHAR_CLASSES = ("numeral", "chinese", "english", "other")


def aligned_matches(ref: str, hyp: str) -> list[bool]:
    """For each reference character, whether a minimal edit script keeps it unchanged."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=int)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + cost)
    keep = [False] * n
    i, j = n, m
    while i > 0 and j > 0:
        if ref[i - 1] == hyp[j - 1] and d[i, j] == d[i - 1, j - 1]:
            keep[i - 1] = True
            i, j = i - 1, j - 1
        elif d[i, j] == d[i - 1, j - 1] + 1:
            i, j = i - 1, j - 1
        elif d[i, j] == d[i - 1, j] + 1:
            i -= 1
        else:
            j -= 1
    return keep


@dataclass
class RecognitionTable:
    """Per-class correct/total counts; combine per-scene tables with ``+``."""

    correct: Counter = field(default_factory=Counter)
    total: Counter = field(default_factory=Counter)
    char_correct: Counter = field(default_factory=Counter)
    char_total: Counter = field(default_factory=Counter)
    outcome: MatchOutcome = field(default_factory=MatchOutcome)

    def __add__(self, other: "RecognitionTable") -> "RecognitionTable":
        return RecognitionTable(self.correct + other.correct, self.total + other.total,
                                self.char_correct + other.char_correct,
                                self.char_total + other.char_total, self.outcome + other.outcome)

    @property
    def overall(self) -> float:
        n = sum(self.total.values())
        return 100.0 * sum(self.correct.values()) / n if n else 100.0

    def per_class(self) -> dict[str, float]:
        return {k: 100.0 * self.correct[k] / self.total[k] for k in sorted(self.total)}

    def per_char_class(self) -> dict[str, float]:
        return {k: 100.0 * self.char_correct[k] / self.char_total[k]
                for k in CHAR_CLASSES if self.char_total[k]}

    def prf(self) -> PRF:
        """Recognition P/R/F where a true positive also needs the right label."""
        ok = sum(self.correct.values())
        o = self.outcome
        return prf(MatchOutcome([], ok, o.tp + o.fp - ok, o.tp + o.fn - ok, o.ignored_matches))


def recognition_accuracy(gt: Sequence[GroundTruth], pred: Sequence[Prediction],
                         iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                         kind: str | None = None) -> RecognitionTable:
    """Label accuracy over box-matched pairs, normalised by ground-truth counts.

    Per class: correctly labelled matched pairs over all non-ignored ground
    truth of that class.  Texts compare after NFC normalisation and trimming;
    for texts the per-character-class table counts reference characters kept
    by a minimal edit alignment (unmatched boxes contribute all characters as
    errors).
    """
    kind = kind or (pred[0].kind if pred else None)
    outcome = match_detections(gt, pred, iou_threshold)
    table = RecognitionTable(outcome=outcome)
    hyp_of = {i: pred[j].label for i, j, _ in outcome.pairs}
    for i, g in enumerate(gt):
        if g.ignored:
            continue
        key = "text" if kind == "text" else g.label
        table.total[key] += 1
        hyp = hyp_of.get(i)
        if kind == "text":
            ref_n = normalize_text(g.label)
            if hyp is not None and normalize_text(hyp) == ref_n:
                table.correct[key] += 1
            keep = aligned_matches(ref_n, normalize_text(hyp)) if hyp is not None else [False] * len(ref_n)
            for ch, ok in zip(ref_n, keep):
                c = char_class(ch)
                table.char_total[c] += 1
                table.char_correct[c] += int(ok)
        elif hyp is not None and hyp == g.label:
            table.correct[key] += 1
    return table


# -- scene-level aggregation -------------------------------------------------

def evaluate_detection(gt_scenes: Iterable[SceneRecord], pred_sets: Iterable[Sequence[Prediction]],
                       iou_threshold: float | dict = DEFAULT_IOU_THRESHOLD) -> dict[str, MatchOutcome]:
    totals = {k: MatchOutcome() for k in KINDS}
    for scene, preds in zip(gt_scenes, pred_sets):
        for kind in KINDS:
            thr = iou_threshold[kind] if isinstance(iou_threshold, dict) else iou_threshold
            o = match_detections(scene_ground_truth(scene, kind), [p for p in preds if p.kind == kind], thr)
            totals[kind] = totals[kind] + o
    return totals


def evaluate_recognition(gt_scenes: Iterable[SceneRecord], pred_sets: Iterable[Sequence[Prediction]],
                         iou_threshold: float | dict = DEFAULT_IOU_THRESHOLD) -> dict[str, RecognitionTable]:
    totals = {k: RecognitionTable() for k in KINDS}
    for scene, preds in zip(gt_scenes, pred_sets):
        for kind in KINDS:
            thr = iou_threshold[kind] if isinstance(iou_threshold, dict) else iou_threshold
            t = recognition_accuracy(scene_ground_truth(scene, kind),
                                     [p for p in preds if p.kind == kind], thr, kind=kind)
            totals[kind] = totals[kind] + t
    return totals


def overall_accuracy(tables: dict[str, RecognitionTable]) -> float:
    """Micro-average label accuracy across kinds."""
    c = sum(sum(t.correct.values()) for t in tables.values())
    n = sum(sum(t.total.values()) for t in tables.values())
    return 100.0 * c / n if n else 100.0


def detection_report(outcomes: dict[str, MatchOutcome]) -> dict:
    out = {}
    for kind, o in outcomes.items():
        out[kind] = {"tp": o.tp, "fp": o.fp, "fn": o.fn, "ignored_matches": o.ignored_matches,
                     **prf(o).as_percent()}
    return out


def recognition_report(tables: dict[str, RecognitionTable]) -> dict:
    out = {}
    for kind, t in tables.items():
        entry = {"OA": round(t.overall, 2),
                 "per_class": {k: round(v, 2) for k, v in t.per_class().items()},
                 **t.prf().as_percent()}
        if kind == "text":
            entry["per_char_class"] = {k: round(v, 2) for k, v in t.per_char_class().items()}
        out[kind] = entry
    out["OA"] = round(overall_accuracy(tables), 2)
    return out


def render_detection_table(report: dict) -> str:
    """Aligned plain-text table: one column group per kind."""
    head = f"{'':10s}" + "".join(f"{k:>30s}" for k in KINDS)
    sub = f"{'metric':10s}" + "".join(f"{'Precision':>10s}{'Recall':>10s}{'F-measure':>10s}" for _ in KINDS)
    row = f"{'score':10s}" + "".join(
        f"{report[k]['precision']:>10.2f}{report[k]['recall']:>10.2f}{report[k]['f_measure']:>10.2f}"
        for k in KINDS)
    return "\n".join([head, sub, row])


def render_recognition_table(report: dict) -> str:
    lines = []
    for kind in KINDS:
        entry = report[kind]
        cols = list(entry["per_class"].items())
        if kind == "text":
            cols = [({"numeral": "N", "chinese": "C", "english": "E", "other": "O"}[k], v)
                    for k, v in entry.get("per_char_class", {}).items()]
        cols.append(("OA", entry["OA"]))
        lines.append(kind)
        lines.append("".join(f"{k:>8s}" for k, _ in cols))
        lines.append("".join(f"{v:>8.2f}" for _, v in cols))
    lines.append(f"overall OA {report['OA']:.2f}")
    return "\n".join(lines)
