import math

import pytest

from tsi_kit.detection import scene_predictions
from tsi_kit.scene import serialize_scene, validate_scene
from tsi_kit.synth import (ZERO_NOISE, GeneratorConfig, NoiseProfile, generate_scenes, mix, parse_predictions,
                           perturb_predictions, predictions_to_scene, serialize_predictions)

import json


def test_mix_is_stable_and_spreads():
    assert mix(0, 0) == mix(0, 0)
    assert len({mix(7, i) for i in range(1000)}) == 1000
    assert mix(1, 0) != mix(0, 1)
    assert 0 <= mix(2**70, 3) < 2**64


def test_generation_deterministic_and_worker_independent():
    cfg = GeneratorConfig(n_scenes=24, seed=5)
    a = [serialize_scene(g.scene) for g in generate_scenes(cfg)]
    b = [serialize_scene(g.scene) for g in generate_scenes(cfg, workers=3)]
    assert a == b
    c = [serialize_scene(g.scene) for g in generate_scenes(GeneratorConfig(n_scenes=24, seed=6))]
    assert a != c


def test_prefix_stable():
    small = generate_scenes(GeneratorConfig(n_scenes=5, seed=3))
    big = generate_scenes(GeneratorConfig(n_scenes=10, seed=3))
    assert [g.scene for g in small] == [g.scene for g in big[:5]]


def test_zero_scenes():
    assert generate_scenes(GeneratorConfig(n_scenes=0)) == []


def test_generated_scenes_validate(corpus_100):
    for scene in corpus_100:
        validate_scene(scene)
        assert scene.panels
        ids = [p.panel_id for p in scene.panels]
        assert ids == list(range(1, len(ids) + 1))


def test_config_round_trip_and_unknown_keys():
    cfg = GeneratorConfig(n_scenes=3, seed=9)
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        GeneratorConfig.from_dict({"n_scene": 3})


def test_zero_profile_is_identity(corpus_100):
    for i, scene in enumerate(corpus_100):
        preds, log = perturb_predictions(scene, ZERO_NOISE, i)
        assert preds == scene_predictions(scene)
        assert log.is_empty


def test_drop_everything(corpus_100):
    for i, scene in enumerate(corpus_100[:20]):
        preds, log = perturb_predictions(scene, NoiseProfile(drop_rate=1.0), i)
        assert preds == []
        assert len(log.dropped) == len(scene.symbols) + len(scene.texts) + len(scene.panels)


def test_drop_rate_within_binomial_bound(corpus_100):
    rate = 0.3
    n = dropped = 0
    # two independent passes so the sample holds well over 1000 signs
    for i, scene in enumerate(corpus_100 + corpus_100):
        _, log = perturb_predictions(scene, NoiseProfile(drop_rate=rate), mix(1, i))
        n += len(scene.symbols) + len(scene.texts) + len(scene.panels)
        dropped += len(log.dropped)
    assert n >= 1000
    assert abs(dropped - rate * n) <= 3 * math.sqrt(n * rate * (1 - rate))


def test_confusion_rate_within_binomial_bound(corpus_100):
    rate = 0.2
    n = flips = 0
    for i, scene in enumerate(corpus_100):
        _, log = perturb_predictions(scene, NoiseProfile(class_confusion_rate=rate), mix(2, i))
        n += len(scene.symbols) + len(scene.panels)
        flips += len(log.label_flips)
        assert all(old != new for _, old, new in log.label_flips)
    assert abs(flips - rate * n) <= 3 * math.sqrt(n * rate * (1 - rate))


def test_log_explains_every_change(corpus_100):
    prof = NoiseProfile(0.1, 0.5, 2.0, 0.1, 0.05)
    for i, scene in enumerate(corpus_100[:40]):
        preds, log = perturb_predictions(scene, prof, mix(3, i))
        orig = {f"{p.kind}:{k}": p for p, k in _indexed(scene)}
        survivors = [sid for sid in orig if sid not in set(log.dropped)]
        assert len(preds) == len(survivors) + len(log.spurious)
        flips = {sid: new for sid, _, new in log.label_flips}
        edits = {}
        for sid, pos, old, new in log.char_edits:
            edits.setdefault(sid, []).append((pos, old, new))
        for sid, p in zip(survivors, preds):
            o = orig[sid]
            assert p.kind == o.kind
            assert (p.box != o.box) == (sid in log.jittered)
            label = list(o.label)
            for pos, old, new in edits.get(sid, []):
                assert label[pos] == old
                label[pos] = new
            assert p.label == flips.get(sid, "".join(label))
        for idx, kind, label in log.spurious:
            assert preds[idx].kind == kind and preds[idx].label == label


def _indexed(scene):
    from tsi_kit.detection import Prediction
    out = [(Prediction(s.box, "symbol", s.class_code), i) for i, s in enumerate(scene.symbols)]
    out += [(Prediction(t.box, "text", t.transcription), i) for i, t in enumerate(scene.texts)]
    out += [(Prediction(p.box, "panel", str(p.panel_class)), i) for i, p in enumerate(scene.panels)]
    return out


def test_ignored_text_never_edited(corpus_100):
    prof = NoiseProfile(char_sub_rate=1.0)
    for i, scene in enumerate(corpus_100):
        _, log = perturb_predictions(scene, prof, i)
        for sid, *_ in log.char_edits:
            assert scene.texts[int(sid.split(":")[1])].transcription != "###"


def test_perturbation_deterministic(corpus_100):
    prof = NoiseProfile(0.1, 1.0, 3.0, 0.1, 0.1)
    a = perturb_predictions(corpus_100[0], prof, 42)
    b = perturb_predictions(corpus_100[0], prof, 42)
    assert a[0] == b[0] and a[1] == b[1]


def test_noise_profile_checks(tmp_path):
    with pytest.raises(ValueError):
        NoiseProfile(drop_rate=1.5)
    with pytest.raises(ValueError):
        NoiseProfile(jitter_sigma=-1)
    with pytest.raises(ValueError):
        NoiseProfile.from_dict({"dropout": 0.1})
    p = tmp_path / "n.json"
    p.write_text(json.dumps({"drop_rate": 0.1, "jitter_sigma": 2}), encoding="utf-8")
    prof = NoiseProfile.load(p)
    assert prof == NoiseProfile(drop_rate=0.1, jitter_sigma=2.0)
    assert ZERO_NOISE <= prof and not prof <= ZERO_NOISE


def test_prediction_file_round_trip(corpus_100):
    scene = corpus_100[0]
    preds, _ = perturb_predictions(scene, NoiseProfile(0.1, 1.0, 1.0, 0.1, 0.1), 1)
    line = serialize_predictions(scene.image_id, preds)
    image_id, back = parse_predictions(json.loads(line))
    assert image_id == scene.image_id
    assert [(p.kind, p.label) for p in back] == [(p.kind, p.label) for p in preds]
    for p, q in zip(back, preds):
        for (x0, y0), (x1, y1) in zip(p.box.corners, q.box.corners):
            assert abs(x0 - x1) <= 1e-6 and abs(y0 - y1) <= 1e-6


def test_predictions_to_scene_keeps_everything(corpus_100):
    scene = corpus_100[1]
    back = predictions_to_scene(scene.image_id, scene_predictions(scene), scene.width, scene.height)
    assert back.symbols == scene.symbols and back.texts == scene.texts
    assert [(p.box, p.panel_class) for p in back.panels] == [(p.box, p.panel_class) for p in scene.panels]
