"""BLEU, corpus perplexity, R@K / median rank, recall curves, shortlists."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import CaptionedExample, ImageFeatureStore, Vocabulary
from .inference import GenerationConfig, generate, sentence_log2prob
from .model import ModelParams


@dataclass
class BleuScore:
    b1: float
    b2: float
    b3: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.b1, self.b2, self.b3)


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list[list], references: list[list[list]],
         n_max: int = 3, cumulative: bool = True) -> BleuScore:
    """Corpus-level BLEU with clipped modified n-gram precision.

    ``references[i]`` is the list of reference sentences for candidate i.
    Cumulative B-n is the geometric mean of orders 1..n times the brevity
    penalty; with ``cumulative=False`` B-n uses order n's precision alone.
    Under the length-matched generation protocol the brevity penalty is
    inert (candidate length equals reference length).
    """
    if len(candidates) != len(references) or not candidates:
        raise ValueError("candidates and references must align and be non-empty")
    matched = np.zeros(n_max)
    total = np.zeros(n_max)
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand_len += len(cand)
        # Effective reference length: closest to the candidate, shorter on ties.
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, n_max + 1):
            counts = _ngrams(cand, n)
            limits = Counter()
            for ref in refs:
                for gram, c in _ngrams(ref, n).items():
                    limits[gram] = max(limits[gram], c)
            matched[n - 1] += sum(min(c, limits[gram]) for gram, c in counts.items())
            total[n - 1] += sum(counts.values())

    precisions = [matched[n] / total[n] if total[n] else 0.0 for n in range(n_max)]
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    scores = []
    for n in range(1, n_max + 1):
        ps = precisions[:n] if cumulative else [precisions[n - 1]]
        if min(ps) == 0.0:
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in ps) / len(ps)))
    scores += [0.0] * (3 - len(scores))
    return BleuScore(*scores[:3])


def corpus_perplexity(params: ModelParams, examples: list[CaptionedExample],
                      features: ImageFeatureStore | None) -> float:
    """Word-weighted perplexity: 2 ** (total -log2 prob / total positions)."""
    if not examples:
        raise ValueError("corpus_perplexity needs at least one example")
    total_log2 = 0.0
    total_words = 0
    for ex in examples:
        feat = None if params.config.variant == "baseline" else features.get(ex.image_id)
        log2p, _ = sentence_log2prob(params, ex.tokens, feat)
        total_log2 += log2p
        total_words += len(ex.tokens) + 1
    return 2.0 ** (-total_log2 / total_words)


# ---------------------------------------------------------------------------
# retrieval metrics

@dataclass
class RetrievalMetrics:
    r_at: dict[int, float]
    med_r: int
    ranks: list[int]


@dataclass
class RecallCurve:
    points: list[tuple[float, float]]


def _ranked_candidates(scores_row: np.ndarray, candidate_ids: list) -> list[int]:
    """Column indices ordered by descending score, candidate id on ties."""
    return sorted(range(len(candidate_ids)),
                  key=lambda j: (-scores_row[j], candidate_ids[j]))


def first_groundtruth_rank(scores_row: np.ndarray, gt: set, candidate_ids: list) -> int:
    order = _ranked_candidates(scores_row, candidate_ids)
    for pos, j in enumerate(order, start=1):
        if candidate_ids[j] in gt:
            return pos
    raise ValueError("query has no groundtruth candidate in the candidate set")


def retrieval_eval(scores: np.ndarray, groundtruth: dict[int, set],
                   ks: tuple[int, ...] = (1, 5, 10),
                   candidate_ids: list | None = None) -> RetrievalMetrics:
    """R@K and median rank of the first retrieved groundtruth item.

    ``scores`` is queries x candidates with higher meaning more relevant;
    ``groundtruth`` maps query row -> set of candidate ids.  The median is
    the lower median, so it is always an attained integer rank.
    """
    scores = np.asarray(scores)
    n_q, n_c = scores.shape
    if candidate_ids is None:
        candidate_ids = list(range(n_c))
    ranks = [first_groundtruth_rank(scores[q], groundtruth[q], candidate_ids)
             for q in range(n_q)]
    r_at = {k: 100.0 * sum(r <= k for r in ranks) / n_q for k in ks}
    med_r = sorted(ranks)[(n_q - 1) // 2]
    return RetrievalMetrics(r_at, med_r, ranks)


def recall_curve(scores: np.ndarray, groundtruth: dict[int, set],
                 fractions: list[float],
                 candidate_ids: list | None = None) -> RecallCurve:
    """Mean number of groundtruth items inside the top ceil(f * C) retrieved."""
    scores = np.asarray(scores)
    n_q, n_c = scores.shape
    if candidate_ids is None:
        candidate_ids = list(range(n_c))
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    points = []
    orders = [_ranked_candidates(scores[q], candidate_ids) for q in range(n_q)]
    for f in fractions:
        top = math.ceil(f * n_c)
        mean = sum(sum(candidate_ids[j] in groundtruth[q] for j in orders[q][:top])
                   for q in range(n_q)) / n_q
        points.append((f, mean))
    return RecallCurve(points)


def shortlist(query_ids: list[str], store: ImageFeatureStore,
              size: int = 100) -> dict[str, list[str]]:
    """Per-query nearest-neighbor image ids in feature space.

    The query's own image is always part of its shortlist (distance zero).
    """
    all_ids = store.ids()
    if len(all_ids) < size:
        raise ValueError(f"store has {len(all_ids)} images, shortlist needs {size}")
    out = {}
    for qid in query_ids:
        qvec = store.get(qid)
        dists = [(float(np.linalg.norm(store.get(cid) - qvec)), cid) for cid in all_ids]
        dists.sort()
        out[qid] = [cid for _, cid in dists[:size]]
    return out


# ---------------------------------------------------------------------------
# generation protocol for BLEU

def generation_bleu(params: ModelParams, vocab: Vocabulary,
                    examples: list[CaptionedExample], features: ImageFeatureStore,
                    length_matched: bool = True, max_length: int = 50,
                    cumulative: bool = True) -> tuple[BleuScore, dict[str, list[str]]]:
    """Greedy-caption every image and score against its reference captions.

    With ``length_matched`` the decoder emits exactly as many words as the
    image's first reference (end sign suppressed until then); otherwise it
    stops at the end sign or ``max_length``.
    """
    refs_by_image: dict[str, list[list[str]]] = {}
    for ex in examples:
        refs_by_image.setdefault(ex.image_id, []).append(vocab.decode(ex.tokens))
    candidates = []
    references = []
    generated = {}
    for image_id in sorted(refs_by_image):
        refs = refs_by_image[image_id]
        force = len(refs[0]) if length_matched else None
        cand = generate(params, vocab, features.get(image_id),
                        GenerationConfig(mode="greedy", max_length=max_length,
                                         force_length=force))
        generated[image_id] = cand
        candidates.append(cand)
        references.append(refs)
    return bleu(candidates, references, cumulative=cumulative), generated
