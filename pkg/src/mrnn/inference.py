"""Sentence generation, perplexity scoring and the two retrieval directions.

All operations are pure given read-only parameters.  Rankings break ties by
candidate id so results never depend on input order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import END_INDEX, START_INDEX, ImageFeatureStore, Vocabulary
from .model import ModelParams, forward_step, forward_sentence, sentence_inputs_targets
from .numerics import Rng

LN2 = math.log(2.0)


@dataclass(frozen=True)
class GenerationConfig:
    """Decoding knobs.

    ``force_length`` implements the length-matched protocol used for BLEU:
    the end sign is suppressed until exactly that many tokens have been
    emitted, then generation stops regardless of the end sign.
    """
    mode: str = "greedy"
    max_length: int = 50
    prefix: list[int] | None = None
    seed: int = 0
    force_length: int | None = None

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown generation mode {self.mode!r}")
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")


@dataclass
class RetrievalResult:
    """Ranked (candidate id, score) pairs; best candidate first."""
    direction: str
    ranked: list[tuple]

    def ids(self) -> list:
        return [cid for cid, _ in self.ranked]


def _pick(y: np.ndarray, mode: str, rng: Rng | None, ban_end: bool) -> int:
    if ban_end:
        y = y.copy()
        y[END_INDEX] = 0.0
        total = y.sum()
        if total == 0.0:  # all mass sat on the end sign: fall back to uniform
            y[:] = 1.0
            y[END_INDEX] = 0.0
            total = y.sum()
        y = y / total
    if mode == "greedy":
        return int(np.argmax(y))  # argmax takes the lowest index on ties
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(y), u), len(y) - 1))


def generate(params: ModelParams, vocab: Vocabulary, image_feature,
             gcfg: GenerationConfig = GenerationConfig()) -> list[str]:
    """Decode a caption for one image feature vector.

    Starts from the start sign (plus any prefix tokens, which are echoed in
    the output), then repeatedly emits the argmax or a sampled token until
    the end sign or the length cap.  The framing start/end signs are not
    part of the returned sequence.
    """
    rng = Rng(gcfg.seed) if gcfg.mode == "sample" else None
    limit = gcfg.force_length if gcfg.force_length is not None else gcfg.max_length

    r = np.zeros(params.config.d_r, dtype=params.dtype)
    y, r, _ = forward_step(params, START_INDEX, r, image_feature)
    out: list[int] = []
    for w in gcfg.prefix or []:
        out.append(w)
        y, r, _ = forward_step(params, w, r, image_feature)
    while len(out) < limit:
        w = _pick(y, gcfg.mode, rng, ban_end=gcfg.force_length is not None)
        if w == END_INDEX:
            break
        out.append(w)
        if len(out) >= limit:
            break
        y, r, _ = forward_step(params, w, r, image_feature)
    return vocab.decode(out)


def sentence_log2prob(params: ModelParams, tokens: list[int],
                      image_feature) -> tuple[float, float]:
    """(log2 probability, perplexity) of a token sequence given an image.

    Both count the end-sign prediction, so a sentence with L content tokens
    spans L+1 positions and log2prob == -(L+1) * log2(ppl).
    """
    trace = forward_sentence(params, tokens, image_feature)
    _, targets = sentence_inputs_targets(tokens)
    log2p = sum(float(np.log2(step.y[t])) for step, t in zip(trace.steps, targets))
    ppl = 2.0 ** (-log2p / len(targets))
    return log2p, ppl


def retrieve_images(params: ModelParams, query_tokens: list[int],
                    store: ImageFeatureStore) -> RetrievalResult:
    """Rank all stored images by perplexity with the query sentence (low = good)."""
    if len(store) == 0:
        raise ValueError("feature store is empty")
    scored = []
    for image_id in store.ids():
        _, ppl = sentence_log2prob(params, query_tokens, store.get(image_id))
        scored.append((image_id, ppl))
    scored.sort(key=lambda pair: (pair[1], pair[0]))
    return RetrievalResult("text_to_image", scored)


def log2_sum_exp2(values: list[float]) -> float:
    """log2(sum(2**v)) computed stably."""
    top = max(values)
    if top == -math.inf:
        return -math.inf
    return top + math.log2(sum(2.0 ** (v - top) for v in values))


def marginal_log2prob(params: ModelParams, tokens: list[int],
                      norm_images: list[np.ndarray]) -> float:
    """log2 of the mean sentence probability over a set of images.

    Approximates the unconditional sentence probability with images sampled
    from the training set, each weighted equally.
    """
    if not norm_images:
        raise ValueError("norm_images must be non-empty")
    logs = [sentence_log2prob(params, tokens, feat)[0] for feat in norm_images]
    return log2_sum_exp2(logs) - math.log2(len(logs))


def retrieve_sentences(params: ModelParams, query_feature, candidates: list[list[int]],
                       norm_images: list[np.ndarray],
                       candidate_ids: list | None = None) -> RetrievalResult:
    """Rank candidate sentences for one image by normalized probability.

    The score is log2 P(w|I) - log2 mean_k P(w|I'_k): conditioning gain over
    the sampled-image marginal, which de-biases generically probable
    sentences.  Higher is better.
    """
    if not candidates:
        raise ValueError("no candidate sentences")
    if candidate_ids is None:
        candidate_ids = list(range(len(candidates)))
    scored = []
    for cid, tokens in zip(candidate_ids, candidates):
        log2p, _ = sentence_log2prob(params, tokens, query_feature)
        scored.append((cid, log2p - marginal_log2prob(params, tokens, norm_images)))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return RetrievalResult("image_to_text", scored)
