"""End-to-end evaluation glue: loading prediction files, pairing descriptions,
and scoring one noise condition.

Prediction inputs may be prediction records (``{"image_id", "predictions"}``)
or annotation scenes, which are read as perfect predictions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

from .detection import (DEFAULT_IOU_THRESHOLD, Prediction, evaluate_detection,
                        evaluate_recognition, match_detections, overall_accuracy, prf,
                        scene_ground_truth, scene_predictions)
from .interpreter import Grammar, default_grammar, interpret_clusters
from .scene import SceneParseError, SceneRecord, _loads, scene_from_obj
from .synth import NoiseProfile, mix, parse_predictions, perturb_predictions, predictions_to_scene
from .textmetrics import AUTO, MetricScores, SlotRules, score_corpus


class ImageIdMismatch(ValueError):
    pass


def read_jsonl(path) -> list[tuple[int, object]]:
    out = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if raw.strip():
                out.append((lineno, _loads(raw, lineno)))
    return out


def record_kind(obj) -> str:
    if isinstance(obj, dict):
        if "predictions" in obj:
            return "predictions"
        if "symbols" in obj or "panels" in obj:
            return "scene"
        if "text" in obj and "image_id" in obj:
            return "description"
    return "unknown"


def load_prediction_sets(path) -> dict[str, list[Prediction]]:
    """image_id -> predictions, from prediction records or scene records."""
    out: dict[str, list[Prediction]] = {}
    for line, obj in read_jsonl(path):
        kind = record_kind(obj)
        if kind == "predictions":
            image_id, preds = parse_predictions(obj, line)
        elif kind == "scene":
            scene = scene_from_obj(obj, line)
            image_id, preds = scene.image_id, scene_predictions(scene)
        else:
            raise SceneParseError("expected a prediction or scene record", line)
        if image_id in out:
            raise SceneParseError(f"duplicate image_id {image_id!r}", line)
        out[image_id] = preds
    return out


def align(scenes: Sequence[SceneRecord], pred_sets: dict) -> list:
    """Prediction sets in scene order; the two image_id sets must be equal."""
    gt_ids = [s.image_id for s in scenes]
    if set(gt_ids) != set(pred_sets) or len(set(gt_ids)) != len(gt_ids):
        missing = sorted(set(gt_ids) - set(pred_sets))[:5]
        extra = sorted(set(pred_sets) - set(gt_ids))[:5]
        raise ImageIdMismatch(f"image_id sets differ (missing {missing}, unexpected {extra})")
    return [pred_sets[i] for i in gt_ids]


def reference_descriptions(scene: SceneRecord, grammar: Grammar, mode: str = AUTO) -> list[tuple]:
    """``(panel_id, text)`` for the scene's stored descriptions, or interpreted ones."""
    if scene.descriptions:
        return [(d.panel_id, d.text) for d in scene.descriptions]
    return [(d.panel_id, d.text) for d in interpret_clusters(scene, grammar, mode).descriptions]


def pair_descriptions(gt: SceneRecord, pred_scene: SceneRecord, grammar: Grammar,
                      mode: str = AUTO, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list[tuple[str, str]]:
    """``(candidate, reference)`` pairs for one scene.

    Predicted panels are matched to ground-truth panels by box IoU; a
    reference whose panel has no match (or whose match produced no text) is
    paired with an empty candidate.  Orphan descriptions pair in order.
    Descriptions of unmatched predicted panels have no reference and are not
    scored.
    """
    refs = reference_descriptions(gt, grammar, mode)
    cands = interpret_clusters(pred_scene, grammar, mode).descriptions
    outcome = match_detections(scene_ground_truth(gt, "panel"),
                               [Prediction(p.box, "panel", str(p.panel_class)) for p in pred_scene.panels],
                               iou_threshold)
    gt_to_pred = {gt.panels[i].panel_id: pred_scene.panels[j].panel_id for i, j, _ in outcome.pairs}
    by_panel = {d.panel_id: d.text for d in cands if d.panel_id is not None}
    orphans = [d.text for d in cands if d.panel_id is None]
    pairs = []
    k = 0
    for panel_id, text in refs:
        if panel_id is None:
            cand = orphans[k] if k < len(orphans) else ""
            k += 1
        else:
            cand = by_panel.get(gt_to_pred.get(panel_id), "")
        pairs.append((cand, text))
    return pairs


def pair_description_files(gt_rows: Sequence[dict], pred_rows: Sequence[dict]) -> list[tuple[str, str]]:
    """Pair description records on ``(image_id, panel_id)``; missing candidates are empty."""
    cand = {}
    for r in pred_rows:
        cand.setdefault((r["image_id"], r.get("panel_id")), []).append(r["text"])
    pairs = []
    for r in gt_rows:
        queue = cand.get((r["image_id"], r.get("panel_id")), [])
        pairs.append((queue.pop(0) if queue else "", r["text"]))
    return pairs


def evaluate_interpretation(gt_scenes: Sequence[SceneRecord], pred_scenes: Sequence[SceneRecord],
                            slot_rules: SlotRules, grammar: Grammar | None = None, mode: str = AUTO,
                            iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> MetricScores:
    grammar = grammar or default_grammar()
    pairs = []
    for gt, pred in zip(gt_scenes, pred_scenes):
        pairs += pair_descriptions(gt, pred, grammar, mode, iou_threshold)
    return score_corpus([c for c, _ in pairs], [r for _, r in pairs], slot_rules, mode)


@dataclass(frozen=True)
class ConditionScores:
    """Mean detection F-measure (over kinds), recognition OA and text metrics."""

    f_measure: float
    overall_accuracy: float
    metrics: MetricScores


def evaluate_condition(scenes: Sequence[SceneRecord], profile: NoiseProfile, seed: int,
                       grammar: Grammar | None = None, slot_rules: SlotRules | None = None,
                       mode: str = AUTO, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> ConditionScores:
    """Perturb every scene with ``profile`` and score the whole pipeline."""
    grammar = grammar or default_grammar()
    slot_rules = slot_rules or grammar.slot_rules()
    pred_sets = [perturb_predictions(s, profile, mix(seed, i), grammar)[0] for i, s in enumerate(scenes)]
    det = evaluate_detection(scenes, pred_sets, iou_threshold)
    rec = evaluate_recognition(scenes, pred_sets, iou_threshold)
    pred_scenes = [predictions_to_scene(s.image_id, p, s.width, s.height) for s, p in zip(scenes, pred_sets)]
    metrics = evaluate_interpretation(scenes, pred_scenes, slot_rules, grammar, mode, iou_threshold)
    f = sum(prf(o).f_measure for o in det.values()) / len(det)
    return ConditionScores(f, overall_accuracy(rec), metrics)


def dumps(obj) -> str:
    """Stable, human-readable JSON for reports."""
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
