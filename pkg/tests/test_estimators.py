import numpy as np
import pytest
from sklearn.base import clone

from tsi_kit.estimators import ShrinkMaskCodec, SignInterpreter


def test_interpreter_params_and_clone():
    est = SignInterpreter(language="zh", tokenizer="cjk")
    assert est.get_params()["language"] == "zh"
    est.set_params(language="en")
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "grammar_")


def test_interpreter_predict_and_score(corpus_100):
    X = corpus_100[:20]
    y = [[d.text for d in s.descriptions] for s in X]
    est = SignInterpreter().fit(X)
    assert est.predict(X) == y
    assert est.score(X, y) == 1.0
    # a missing prediction scores against an empty candidate
    shorter = [r + ["Go straight to Baoji"] for r in y]
    assert est.score(X, shorter) < 1.0


def test_codec_round_trip():
    codec = ShrinkMaskCodec()
    rects = [np.array([[0, 0], [w, 0], [w, h], [0, h]], float) + off
             for w, h, off in [(40, 20, 0), (100, 30, 7.5), (25, 25, -3)]]
    kernels = codec.fit_transform(rects)
    for k, r in zip(kernels, rects):
        assert np.ptp(np.asarray(k)[:, 0]) < np.ptp(r[:, 0])
    back = codec.inverse_transform(kernels)
    for b, r in zip(back, rects):
        assert np.allclose(np.asarray(b), r, atol=1e-6)


def test_codec_params():
    codec = ShrinkMaskCodec(n_points=200, refine=False)
    assert clone(codec).get_params() == {"n_points": 200, "max_spacing": 2.0, "refine": False}
