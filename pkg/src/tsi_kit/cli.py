"""``tsi-kit`` command line.

Exit codes: 0 success, 2 usage/config/malformed input, 3 I/O error,
4 data mismatch (image_id sets differ, or nothing could be interpreted).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .detection import (DEFAULT_IOU_THRESHOLD, detection_report, evaluate_detection,
                        evaluate_recognition, recognition_report, render_detection_table,
                        render_recognition_table)
from .interpreter import Grammar, default_grammar, interpret_clusters
from .pipeline import (ImageIdMismatch, align, dumps, evaluate_interpretation,
                       load_prediction_sets, pair_description_files, read_jsonl, record_kind)
from .scene import (SceneParseError, SceneValidationError, canonical_json, corpus_stats, read_corpus,
                    scene_from_obj, split_corpus, frequency_gaps, write_corpus)
from .synth import (GeneratorConfig, NoiseProfile, generate_scenes, log_line, mix,
                    perturb_predictions, predictions_to_scene, serialize_predictions, write_jsonl)
from .textmetrics import MODE_ALIASES, SlotRules, score_corpus

logger = logging.getLogger("tsi_kit")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISMATCH = 0, 2, 3, 4
CONFIG_ENV = "TSI_KIT_CONFIG"
DEFAULT_TEST_FRACTION = 666 / 2682


class ConfigError(ValueError):
    pass


class InterpretFailure(RuntimeError):
    pass


# -- config -----------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path}: expected a JSON object")
    return data


def _setting(args, cfg: dict, name: str, default=None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(canonical_json(payload).encode("ascii")).hexdigest()[:16]


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _provenance(args, settings: dict, inputs: list) -> dict:
    block = {"tool": "tsi-kit", "version": __version__, "command": args.command,
             "settings": settings, "config_hash": _config_hash(settings),
             "inputs": [{"name": Path(p).name, "sha256": _file_digest(p)} for p in inputs]}
    if getattr(args, "stamp", False):
        block["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return block


def _grammar(args, cfg) -> Grammar:
    language = _setting(args, cfg, "language", "en")
    tpl = cfg.get("templates")
    lex = cfg.get("lexicon")
    if tpl or lex or cfg.get("frames"):
        return Grammar.load(language, tpl, lex, cfg.get("frames"))
    return default_grammar(language)


def _slot_rules(args, cfg, grammar: Grammar) -> SlotRules:
    path = getattr(args, "slot_rules", None) or cfg.get("slot_rules")
    return SlotRules.load(path) if path else grammar.slot_rules()


def _mode(args, cfg) -> str:
    mode = _setting(args, cfg, "tokenizer", "auto")
    if mode not in MODE_ALIASES:
        raise ConfigError(f"unknown tokenizer {mode!r}")
    return MODE_ALIASES[mode]


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))


# -- subcommands -------------------------------------------------------------------

def cmd_gen(args, cfg) -> int:
    gen_cfg = dict(cfg.get("generator", {}))
    if args.scenes is not None:
        gen_cfg["n_scenes"] = args.scenes
    seed = _setting(args, cfg, "seed")
    if seed is None:
        raise ConfigError("gen needs --seed")
    gen_cfg["seed"] = seed
    gen_cfg.setdefault("language", _setting(args, cfg, "language", "en"))
    try:
        config = GeneratorConfig.from_dict(gen_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generator config: {exc}") from None
    out = _outdir(args.output)
    grammar = default_grammar(config.language)
    generated = generate_scenes(config, _setting(args, cfg, "workers", 1))
    write_corpus(out / "corpus.jsonl", [g.scene for g in generated])
    write_jsonl(out / "oracle.jsonl", [canonical_json(g.oracle).encode("ascii") for g in generated])
    from importlib import resources
    for name, target in (("symbols.json", "symbol_vocab.json"), ("panels.json", "panel_vocab.json")):
        (out / target).write_bytes(resources.files("tsi_kit.data").joinpath(name).read_bytes())
    (out / "slot_rules.json").write_text(grammar.slot_rules().to_json() + "\n", encoding="utf-8")
    _write_json(out / "generator_config.json", config.to_dict())
    logger.info("wrote %d scenes to %s", len(generated), out)
    return EXIT_OK


def cmd_split(args, cfg) -> int:
    seed = _setting(args, cfg, "seed")
    if seed is None:
        raise ConfigError("split needs --seed")
    corpus = read_corpus(_require_file(args.corpus))
    out = _outdir(args.output)
    train, test = split_corpus(corpus, args.test_fraction, seed, args.tolerance)
    write_corpus(out / "train.jsonl", train.scenes)
    write_corpus(out / "test.jsonl", test.scenes)
    gaps = frequency_gaps(train.scenes, test.scenes)
    settings = {"seed": seed, "test_fraction": args.test_fraction, "tolerance": args.tolerance}
    _write_json(out / "split_report.json", {
        "train": len(train), "test": len(test),
        "panel_frequency_gap": {str(k): round(v, 6) for k, v in gaps.items()},
        "train_stats": corpus_stats(train).to_dict(), "test_stats": corpus_stats(test).to_dict(),
        "provenance": _provenance(args, settings, [args.corpus])})
    print(f"train {len(train)}  test {len(test)}  max gap {max(gaps.values()):.4f}")
    return EXIT_OK


def _noise_profile(args, cfg) -> NoiseProfile:
    data = dict(cfg.get("noise", {}))
    if args.noise:
        with open(_require_file(args.noise), encoding="utf-8") as fh:
            data.update(json.load(fh))
    for name in NoiseProfile.__dataclass_fields__:
        v = getattr(args, name, None)
        if v is not None:
            data[name] = v
    try:
        return NoiseProfile.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"noise profile: {exc}") from None


def _perturb_one(job):
    scene, profile, seed, language = job
    preds, log = perturb_predictions(scene, profile, seed, default_grammar(language))
    return serialize_predictions(scene.image_id, preds), log_line(log)


def _pool_map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def cmd_perturb(args, cfg) -> int:
    seed = _setting(args, cfg, "seed")
    if seed is None:
        raise ConfigError("perturb needs --seed")
    profile = _noise_profile(args, cfg)
    corpus = read_corpus(_require_file(args.corpus))
    out = _outdir(args.output)
    language = _setting(args, cfg, "language", "en")
    jobs = [(s, profile, mix(seed, i), language) for i, s in enumerate(corpus.scenes)]
    results = _pool_map(_perturb_one, jobs, _setting(args, cfg, "workers", 1))
    write_jsonl(out / "predictions.jsonl", [p for p, _ in results])
    write_jsonl(out / "perturbation_log.jsonl", [lg for _, lg in results])
    _write_json(out / "noise_profile.json", profile.to_dict())
    return EXIT_OK


def _load_scenes_any(path) -> list:
    """Scenes from a corpus file or from a prediction file."""
    scenes = []
    for line, obj in read_jsonl(_require_file(path)):
        kind = record_kind(obj)
        if kind == "scene":
            scenes.append(scene_from_obj(obj, line))
        elif kind == "predictions":
            from .synth import parse_predictions
            image_id, preds = parse_predictions(obj, line)
            scenes.append(predictions_to_scene(image_id, preds))
        else:
            raise SceneParseError("expected a scene or prediction record", line)
    return scenes


def _interpret_one(job):
    scene, grammar, mode = job
    result = interpret_clusters(scene, grammar, mode)
    rows = [canonical_json({"image_id": scene.image_id, "panel_id": d.panel_id, "text": d.text})
            for d in result.descriptions]
    diags = [canonical_json(d) for d in result.diagnostics]
    return rows, diags, bool(result.descriptions) or not result.diagnostics


def cmd_interpret(args, cfg) -> int:
    grammar = _grammar(args, cfg)
    mode = _mode(args, cfg)
    scenes = _load_scenes_any(args.input)
    results = _pool_map(_interpret_one, [(s, grammar, mode) for s in scenes],
                        _setting(args, cfg, "workers", 1))
    out = Path(args.output)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, [r.encode("ascii") for rows, _, _ in results for r in rows])
    diag_path = out.with_name(out.name + ".diagnostics.jsonl")
    write_jsonl(diag_path, [d.encode("ascii") for _, diags, _ in results for d in diags])
    if scenes and not any(ok for _, _, ok in results):
        raise InterpretFailure("no scene could be interpreted; see " + str(diag_path))
    return EXIT_OK


def _iou(args, cfg) -> float:
    v = float(_setting(args, cfg, "iou_thresh", DEFAULT_IOU_THRESHOLD))
    if not 0 < v <= 1:
        raise ConfigError("--iou-thresh must be in (0, 1]")
    return v


def _eval_inputs(args):
    gt = read_corpus(_require_file(args.gt)).scenes
    preds = align(gt, load_prediction_sets(_require_file(args.pred)))
    return gt, preds


def _emit(args, report: dict, table: str) -> None:
    if args.output:
        out = Path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out, report)
        out.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    print(table)


def _det_section(gt, preds, thr):
    rep = detection_report(evaluate_detection(gt, preds, thr))
    return rep, render_detection_table(rep)


def _rec_section(gt, preds, thr):
    rep = recognition_report(evaluate_recognition(gt, preds, thr))
    return rep, render_recognition_table(rep)


def _render_metrics(rep: dict) -> str:
    keys = ("R1", "R2", "Rl", "B4", "SA")
    names = ("R-1", "R-2", "R-l", "B-4", "SA")
    return "".join(f"{n:>8s}" for n in names) + "\n" + "".join(f"{rep[k]:>8.2f}" for k in keys)


def _interp_section(args, cfg, thr):
    grammar = _grammar(args, cfg)
    mode = _mode(args, cfg)
    rules = _slot_rules(args, cfg, grammar)
    gt_rows = read_jsonl(_require_file(args.gt))
    pred_rows = read_jsonl(_require_file(args.pred))
    if gt_rows and record_kind(gt_rows[0][1]) == "description":
        pairs = _description_pairs(gt_rows, pred_rows)
        scores = score_corpus([c for c, _ in pairs], [r for _, r in pairs], rules, mode)
    else:
        gt = read_corpus(args.gt).scenes
        if pred_rows and record_kind(pred_rows[0][1]) == "description":
            from .pipeline import reference_descriptions
            refs = [{"image_id": s.image_id, "panel_id": pid, "text": t}
                    for s in gt for pid, t in reference_descriptions(s, grammar, mode)]
            pairs = _description_pairs([(0, r) for r in refs], pred_rows, {s.image_id for s in gt})
            scores = score_corpus([c for c, _ in pairs], [r for _, r in pairs], rules, mode)
        else:
            pred_sets = align(gt, load_prediction_sets(args.pred))
            pred_scenes = [predictions_to_scene(s.image_id, p, s.width, s.height)
                           for s, p in zip(gt, pred_sets)]
            scores = evaluate_interpretation(gt, pred_scenes, rules, grammar, mode, thr)
    rep = scores.as_report()
    return rep, _render_metrics(rep)


def _description_pairs(gt_rows, pred_rows, gt_ids=None):
    for line, r in list(gt_rows) + list(pred_rows):
        if record_kind(r) != "description":
            raise SceneParseError("expected a description record {image_id, panel_id, text}", line)
    gt_ids = gt_ids if gt_ids is not None else {r["image_id"] for _, r in gt_rows}
    pred_ids = {r["image_id"] for _, r in pred_rows}
    if not pred_ids <= gt_ids:
        raise ImageIdMismatch(f"descriptions for unknown image_ids {sorted(pred_ids - gt_ids)[:5]}")
    return pair_description_files([r for _, r in gt_rows], [r for _, r in pred_rows])


def _eval_settings(args, cfg) -> dict:
    return {"iou_thresh": _iou(args, cfg), "tokenizer": _setting(args, cfg, "tokenizer", "auto"),
            "language": _setting(args, cfg, "language", "en")}


def cmd_eval_det(args, cfg) -> int:
    thr = _iou(args, cfg)
    gt, preds = _eval_inputs(args)
    rep, table = _det_section(gt, preds, thr)
    _emit(args, {"detection": rep, "provenance": _provenance(args, _eval_settings(args, cfg),
                                                             [args.gt, args.pred])}, table)
    return EXIT_OK


def cmd_eval_rec(args, cfg) -> int:
    thr = _iou(args, cfg)
    gt, preds = _eval_inputs(args)
    rep, table = _rec_section(gt, preds, thr)
    _emit(args, {"recognition": rep, "provenance": _provenance(args, _eval_settings(args, cfg),
                                                               [args.gt, args.pred])}, table)
    return EXIT_OK


def cmd_eval_interp(args, cfg) -> int:
    thr = _iou(args, cfg)
    rep, table = _interp_section(args, cfg, thr)
    _emit(args, {"interpretation": rep, "provenance": _provenance(args, _eval_settings(args, cfg),
                                                                  [args.gt, args.pred])}, table)
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    thr = _iou(args, cfg)
    gt, preds = _eval_inputs(args)
    det, det_t = _det_section(gt, preds, thr)
    rec, rec_t = _rec_section(gt, preds, thr)
    interp, interp_t = _interp_section(args, cfg, thr)
    report = {"detection": det, "recognition": rec, "interpretation": interp,
              "provenance": _provenance(args, _eval_settings(args, cfg), [args.gt, args.pred])}
    table = "\n\n".join(["Detection", det_t, "Recognition", rec_t, "Interpretation", interp_t])
    _emit(args, report, table)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (gen/perturb/split)")
    common.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    common.add_argument("--workers", type=int, help="worker processes; never changes outputs")
    common.add_argument("--tokenizer", choices=["auto", "cjk", "ws"])
    common.add_argument("--iou-thresh", dest="iou_thresh", type=float)
    common.add_argument("--language", choices=["en", "zh"])
    common.add_argument("--stamp", action="store_true", help="add a timestamp to report provenance")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tsi-kit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--scenes", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("split", parents=[common], help="stratified train/test split")
    p.add_argument("corpus")
    p.add_argument("--test-fraction", type=float, default=DEFAULT_TEST_FRACTION)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("perturb", parents=[common], help="inject detector/recognizer noise")
    p.add_argument("corpus")
    p.add_argument("--noise", help="noise profile JSON")
    for name in NoiseProfile.__dataclass_fields__:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("interpret", parents=[common], help="describe every sign cluster")
    p.add_argument("input", help="corpus or prediction file")
    p.add_argument("-o", "--output", required=True, help="descriptions JSON Lines")
    p.set_defaults(func=cmd_interpret)

    for name, func, help_ in (("eval-det", cmd_eval_det, "detection P/R/F"),
                              ("eval-rec", cmd_eval_rec, "recognition accuracy"),
                              ("eval-interp", cmd_eval_interp, "R-1/R-2/R-l/B-4/SA"),
                              ("report", cmd_report, "all evaluations in one report")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("gt")
        p.add_argument("pred")
        p.add_argument("--slot-rules", dest="slot_rules")
        p.add_argument("-o", "--output", help="JSON report path (a .txt table is written beside it)")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, SceneParseError, SceneValidationError) as exc:
        print(f"tsi-kit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ImageIdMismatch, InterpretFailure) as exc:
        print(f"tsi-kit: error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"tsi-kit: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"tsi-kit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
