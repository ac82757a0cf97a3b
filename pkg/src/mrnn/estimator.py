"""Scikit-learn style estimator wrapping the captioning pipeline.

``MRNNCaptioner`` follows the estimator contract (``get_params`` /
``set_params`` consistent with ``__init__``, ``fit`` returns self, fitted
state in trailing-underscore attributes) without depending on scikit-learn
itself, so ``sklearn.base.clone`` and friends work when that library is
around.
"""

from __future__ import annotations

import inspect

import numpy as np

from .corpus import (CaptionedExample, DatasetSplit, ImageFeatureStore,
                     build_vocabulary)
from .evaluation import corpus_perplexity
from .inference import GenerationConfig, generate
from .model import ModelConfig
from .training import TrainConfig, train
from .validation import as_feature_matrix, check_captions, check_is_fitted


class MRNNCaptioner:
    """Caption generator trained on (image feature vector, caption) pairs.

    ``fit`` takes X of shape (n_captions, feature_dim) and y, a caption
    string per row; images with several captions simply contribute several
    rows with the same feature vector.  ``predict`` greedily decodes one
    caption per row of X; ``score`` returns the negative log2 corpus
    perplexity (higher is better).
    """

    def __init__(self, variant="mrnn", d_e1=128, d_e2=128, d_r=256, d_m=512,
                 learning_rate=0.05, lambda_reg=1e-5, batch_size=16, epochs=10,
                 clip_norm=5.0, seed=0, min_count=1, max_length=50,
                 precision="float64"):
        self.variant = variant
        self.d_e1 = d_e1
        self.d_e2 = d_e2
        self.d_r = d_r
        self.d_m = d_m
        self.learning_rate = learning_rate
        self.lambda_reg = lambda_reg
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip_norm = clip_norm
        self.seed = seed
        self.min_count = min_count
        self.max_length = max_length
        self.precision = precision

    @classmethod
    def _param_names(cls) -> list[str]:
        return [p for p in inspect.signature(cls.__init__).parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "MRNNCaptioner":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"invalid parameter {name!r} for {type(self).__name__}")
            setattr(self, name, value)
        return self

    def _dataset(self, X: np.ndarray, captions: list[str], vocab):
        store = ImageFeatureStore(X.shape[1])
        split = DatasetSplit()
        for i, (row, text) in enumerate(zip(X, captions)):
            image_id = f"x{i:06d}"
            store.add(image_id, row)
            tokens = vocab.encode(text)
            if not tokens:
                raise ValueError(f"caption {i} tokenizes to nothing: {text!r}")
            split.train.append(CaptionedExample(image_id, tokens, text))
        return split, store

    def fit(self, X, y) -> "MRNNCaptioner":
        X = as_feature_matrix(X)
        captions = check_captions(y, len(X))
        self.vocab_ = build_vocabulary(captions, min_count=self.min_count)
        split, store = self._dataset(X, captions, self.vocab_)
        config = TrainConfig(
            model=ModelConfig(vocab_size=self.vocab_.size, d_i=X.shape[1],
                              variant=self.variant, d_e1=self.d_e1, d_e2=self.d_e2,
                              d_r=self.d_r, d_m=self.d_m),
            learning_rate=self.learning_rate, lambda_reg=self.lambda_reg,
            batch_size=self.batch_size, epochs=self.epochs,
            clip_norm=self.clip_norm, seed=self.seed, precision=self.precision)
        self.params_, self.report_ = train(config, split, store)
        return self

    def predict(self, X) -> list[str]:
        """One greedily decoded caption string per feature row."""
        check_is_fitted(self, "params_")
        X = as_feature_matrix(X)
        gcfg = GenerationConfig(mode="greedy", max_length=self.max_length)
        return [" ".join(generate(self.params_, self.vocab_, row, gcfg)) for row in X]

    def perplexity(self, X, y) -> float:
        check_is_fitted(self, "params_")
        X = as_feature_matrix(X)
        captions = check_captions(y, len(X))
        split, store = self._dataset(X, captions, self.vocab_)
        return corpus_perplexity(self.params_, split.train, store)

    def score(self, X, y) -> float:
        """Negative log2 corpus perplexity, so higher is better."""
        return -float(np.log2(self.perplexity(X, y)))
