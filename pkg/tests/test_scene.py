import json
import logging
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from tsi_kit.scene import (Corpus, DescriptionAnnotation, PanelAnnotation, QuadBox, SceneParseError,
                           SceneRecord, SceneValidationError, SymbolAnnotation, TextAnnotation,
                           corpus_stats, frequency_gaps, parse_scene, read_corpus, serialize_scene,
                           split_corpus, validate_scene, write_corpus)


def box(x0, y0, x1, y1):
    return QuadBox.from_xyxy(x0, y0, x1, y1)


def minimal(**kw):
    obj = {"image_id": "img", "width": 100, "height": 50, "symbols": [], "texts": [],
           "panels": [], "descriptions": []}
    obj.update(kw)
    return json.dumps(obj)


def test_minimal_record_has_empty_lists():
    s = parse_scene(minimal())
    assert s.symbols == () and s.texts == () and s.panels == () and s.descriptions == ()
    assert (s.width, s.height) == (100, 50)


def test_hash_text_is_ignored():
    raw = minimal(panels=[{"box": [[0, 0], [10, 0], [10, 10], [0, 10]], "panel_class": 3, "panel_id": 1}],
                  texts=[{"box": [[1, 1], [5, 1], [5, 3], [1, 3]], "transcription": "###"}])
    s = parse_scene(raw)
    assert s.texts[0].ignored is True


def test_panel_class_out_of_range():
    raw = minimal(panels=[{"box": [[0, 0], [10, 0], [10, 10], [0, 10]], "panel_class": 8, "panel_id": 1}])
    with pytest.raises(SceneValidationError, match="panel_class out of range"):
        parse_scene(raw)


def test_malformed_json_reports_position():
    with pytest.raises(SceneParseError) as err:
        parse_scene(b'{"image_id": "x",', line=7)
    assert "line 7" in str(err.value)


def test_missing_field_names_field():
    with pytest.raises(SceneValidationError, match="width"):
        parse_scene(json.dumps({"image_id": "x", "height": 3}))


def test_unknown_fields_warn(caplog):
    with caplog.at_level(logging.WARNING):
        parse_scene(minimal(camera="front"))
    assert "camera" in caplog.text


def test_empty_scene_serializes_to_one_canonical_line():
    s = SceneRecord("e", 10, 10)
    out = serialize_scene(s)
    assert b"\n" not in out
    assert out == b'{"image_id":"e","width":10,"height":10,"symbols":[],"texts":[],"panels":[],"descriptions":[]}'


def test_chinese_transcription_round_trips_byte_identically():
    s = SceneRecord("c", 100, 100, texts=[TextAnnotation(box(1, 1, 20, 10), "西安北站")])
    once = serialize_scene(s)
    assert once.isascii()
    again = serialize_scene(parse_scene(once))
    assert once == again
    assert parse_scene(once).texts[0].transcription == "西安北站"


def test_floats_have_six_decimals():
    s = SceneRecord("f", 100, 100, symbols=[SymbolAnnotation(box(1.5, 2, 3, 4), "a1")])
    assert b"1.500000" in serialize_scene(s)


def test_panel_ids_preserved_in_order():
    panels = [PanelAnnotation(box(10 * k, 0, 10 * k + 5, 5), 1 + k, pid) for k, pid in enumerate((9, 2, 5))]
    s = parse_scene(serialize_scene(SceneRecord("p", 100, 100, panels=panels)))
    assert [p.panel_id for p in s.panels] == [9, 2, 5]


def test_validate_box_outside_image():
    s = SceneRecord("v", 100, 100, symbols=[SymbolAnnotation(QuadBox(((0, 0), (101, 0), (101, 5), (0, 5))), "a1")])
    assert any("box outside image" in v for v in validate_scene(s))


def test_validate_dangling_panel_reference():
    s = SceneRecord("v", 100, 100, descriptions=[DescriptionAnnotation(3, "Go straight")])
    assert any("dangling panel reference" in v for v in validate_scene(s))


def test_validate_unknown_symbol_letter():
    s = SceneRecord("v", 100, 100, symbols=[SymbolAnnotation(box(0, 0, 5, 5), "x3")])
    assert any("unknown symbol type letter" in v for v in validate_scene(s))


def test_validate_counterclockwise_box():
    ccw = QuadBox(((0, 0), (0, 5), (5, 5), (5, 0)))
    s = SceneRecord("v", 100, 100, symbols=[SymbolAnnotation(ccw, "a1")])
    assert any("clockwise" in v for v in validate_scene(s))


def test_validate_duplicate_panel_id():
    s = SceneRecord("v", 100, 100, panels=[PanelAnnotation(box(0, 0, 5, 5), 1, 1),
                                            PanelAnnotation(box(10, 0, 15, 5), 2, 1)])
    assert any("duplicate panel_id" in v for v in validate_scene(s))


def test_generated_scenes_validate(corpus_100):
    assert all(validate_scene(s) == [] for s in corpus_100)


def test_generated_scenes_round_trip(corpus_100):
    for s in corpus_100:
        assert parse_scene(serialize_scene(s)) == s


coord = st.floats(0, 1000, allow_nan=False, allow_infinity=False)


@st.composite
def scenes(draw):
    def rect():
        x0, y0 = draw(coord), draw(coord)
        return box(x0, y0, x0 + draw(st.floats(1, 50)), y0 + draw(st.floats(1, 50)))
    syms = draw(st.lists(st.builds(SymbolAnnotation, st.just(None), st.sampled_from(["a1", "p12", "w3", "i4"]),
                                   st.booleans()), max_size=4))
    syms = [SymbolAnnotation(rect(), s.class_code, s.ignored) for s in syms]
    texts = [TextAnnotation(rect(), t) for t in draw(st.lists(st.text(max_size=8), max_size=4))]
    n_p = draw(st.integers(0, 3))
    panels = [PanelAnnotation(rect(), draw(st.integers(1, 7)), k) for k in range(n_p)]
    return SceneRecord(draw(st.text(min_size=1, max_size=6)), 1100, 1100, syms, texts, panels)


@settings(max_examples=150, deadline=None)
@given(scenes())
def test_parse_serialize_identity(scene):
    once = serialize_scene(scene)
    back = parse_scene(once)
    assert back == scene
    assert serialize_scene(back) == once


def test_stats_empty_corpus():
    h = corpus_stats(Corpus([]))
    assert h.n_scenes == 0 and sum(h.symbol_counts.values()) == 0 and sum(h.panel_counts.values()) == 0


def test_stats_counts_symbols():
    s = SceneRecord("s", 100, 100, symbols=[SymbolAnnotation(box(0, 0, 5, 5), "a1"),
                                             SymbolAnnotation(box(10, 0, 15, 5), "a1")])
    assert corpus_stats([s]).symbol_counts["a1"] == 2


def test_stats_match_recount_of_file(tmp_path, corpus_100):
    path = tmp_path / "c.jsonl"
    write_corpus(path, corpus_100)
    sym, pan, chars = Counter(), Counter(), 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            sym.update(e["class_code"] for e in obj["symbols"] if not e["ignored"])
            pan.update(e["panel_class"] for e in obj["panels"])
            chars += sum(len(e["transcription"]) for e in obj["texts"] if not e["ignored"])
    h = corpus_stats(read_corpus(path))
    assert dict(h.symbol_counts) == dict(sym)
    assert dict(h.panel_counts) == dict(pan)
    assert h.text_chars == chars
    assert h.n_scenes == 100


def test_split_two_identical_scenes():
    s = SceneRecord("a", 10, 10, panels=[PanelAnnotation(box(0, 0, 5, 5), 3, 1)])
    train, test = split_corpus(Corpus([s, s]), 0.5, seed=0)
    assert len(train) == 1 and len(test) == 1


def test_split_100_scenes_quarter(corpus_100):
    train, test = split_corpus(Corpus(corpus_100), 0.25, seed=3)
    assert len(test) == 25 and len(train) == 75
    gaps = frequency_gaps(train.scenes, test.scenes)
    assert max(gaps.values()) <= 0.05


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_split_is_partition_and_deterministic(seed, frac):
    corpus = _small_corpus()
    a_train, a_test = split_corpus(corpus, frac, seed)
    b_train, b_test = split_corpus(corpus, frac, seed)
    ids = [s.image_id for s in corpus.scenes]
    tr, te = [s.image_id for s in a_train], [s.image_id for s in a_test]
    assert sorted(tr + te) == sorted(ids) and not set(tr) & set(te)
    assert len(te) == int(frac * len(ids) + 0.5) or len(te) in (1, len(ids) - 1)
    assert tr == [s.image_id for s in b_train] and te == [s.image_id for s in b_test]


_CACHE = {}


def _small_corpus():
    if "c" not in _CACHE:
        from tsi_kit.synth import GeneratorConfig, generate_corpus
        _CACHE["c"] = generate_corpus(GeneratorConfig(n_scenes=40, seed=5))
    return _CACHE["c"]


def test_split_warns_when_tolerance_unreachable(caplog):
    a = SceneRecord("a", 10, 10, panels=[PanelAnnotation(box(0, 0, 5, 5), 1, 1)])
    b = SceneRecord("b", 10, 10, panels=[PanelAnnotation(box(0, 0, 5, 5), 7, 1)])
    with caplog.at_level(logging.WARNING):
        train, test = split_corpus(Corpus([a, b]), 0.5, seed=1)
    assert len(train) == len(test) == 1
    assert "not met" in caplog.text


def test_corpus_vocab_violations():
    s = SceneRecord("a", 10, 10, symbols=[SymbolAnnotation(box(0, 0, 5, 5), "a9")])
    c = Corpus([s], symbol_vocab={"a1": "straight"})
    assert c.vocab_violations()
