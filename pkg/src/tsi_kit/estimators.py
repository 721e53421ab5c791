"""scikit-learn style wrappers around the interpreter and the shrink-mask codec."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .geometry import expand_contour, expand_offset, sample_dense_contour, shrink_contour, shrink_offset
from .interpreter import Grammar, interpret_scene
from .textmetrics import AUTO, score_corpus


class SignInterpreter(BaseEstimator):
    """Scenes in, descriptions out.

    There is nothing to learn; ``fit`` only loads the grammar so that
    ``get_params``/``set_params`` and pipelines behave as usual.
    """

    def __init__(self, language="en", tokenizer=AUTO, templates=None, lexicon=None, frames=None):
        self.language = language
        self.tokenizer = tokenizer
        self.templates = templates
        self.lexicon = lexicon
        self.frames = frames

    def fit(self, X=None, y=None):
        self.grammar_ = Grammar.load(self.language, self.templates, self.lexicon, self.frames)
        self.slot_rules_ = self.grammar_.slot_rules()
        return self

    def _check_fitted(self):
        if not hasattr(self, "grammar_"):
            self.fit()

    def predict(self, X):
        """One list of description strings per scene."""
        self._check_fitted()
        return [[d.text for d in interpret_scene(s, self.grammar_, self.tokenizer)] for s in X]

    def score(self, X, y):
        """Soft accuracy of flattened predictions against reference lists ``y``."""
        pred = self.predict(X)
        cands, refs = [], []
        for p, r in zip(pred, y):
            r = list(r)
            cands += (list(p) + [""] * len(r))[:len(r)]
            refs += r
        return score_corpus(cands, refs, self.slot_rules_, self.tokenizer).soft_accuracy


class ShrinkMaskCodec(BaseEstimator, TransformerMixin):
    """Encode boxes as shrunk kernels and decode them back.

    ``transform`` maps each polygon to its kernel using the polar minimum
    distance offset; ``inverse_transform`` expands kernels by their own
    expansion offset.
    """

    def __init__(self, n_points=None, max_spacing=2.0, refine=True):
        self.n_points = n_points
        self.max_spacing = max_spacing
        self.refine = refine

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        out = []
        for poly in X:
            c = sample_dense_contour(poly, self.n_points, self.max_spacing)
            out.append(shrink_contour(poly, shrink_offset(c, self.refine)))
        return out

    def inverse_transform(self, X):
        out = []
        for kernel in X:
            c = sample_dense_contour(np.asarray(kernel, dtype=float), self.n_points, self.max_spacing)
            out.append(expand_contour(kernel, expand_offset(c, self.refine)))
        return out
