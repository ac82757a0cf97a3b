"""Independent oracles shared by the unit and acceptance tests.

These deliberately avoid the library's own code paths: BLEU by explicit
n-gram scanning, ranks by pairwise counting, gradients by central
differences on the forward loss.
"""

import math

import numpy as np

from mrnn.model import forward_sentence, sentence_inputs_targets


def oracle_bleu(candidates, references, n_max=3, cumulative=True):
    """Brute-force corpus BLEU from the definition (no Counter, no library)."""

    def count_occurrences(seq, gram):
        n = len(gram)
        return sum(1 for i in range(len(seq) - n + 1) if tuple(seq[i:i + n]) == gram)

    matched = [0] * n_max
    total = [0] * n_max
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        best = None
        for r in refs:
            key = (abs(len(r) - len(cand)), len(r))
            if best is None or key < best:
                best = key
        ref_len += best[1]
        for n in range(1, n_max + 1):
            grams = {tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)}
            for gram in grams:
                c_count = count_occurrences(cand, gram)
                r_count = max(count_occurrences(r, gram) for r in refs)
                matched[n - 1] += min(c_count, r_count)
            total[n - 1] += max(len(cand) - n + 1, 0)

    precisions = [m / t if t else 0.0 for m, t in zip(matched, total)]
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    out = []
    for n in range(1, n_max + 1):
        ps = precisions[:n] if cumulative else [precisions[n - 1]]
        if min(ps) == 0.0:
            out.append(0.0)
        else:
            out.append(bp * math.exp(sum(math.log(p) for p in ps) / len(ps)))
    return out


def oracle_first_rank(scores_row, gt_ids, candidate_ids):
    """Rank of the first groundtruth by pairwise counting (no sorting).

    candidate j outranks candidate i when its score is higher, or equal with
    a smaller id.  The first groundtruth's rank is 1 plus the number of
    candidates that outrank the best-placed groundtruth.
    """
    best = None
    for i, cid in enumerate(candidate_ids):
        if cid not in gt_ids:
            continue
        ahead = sum(
            1 for j in range(len(candidate_ids)) if j != i and (
                scores_row[j] > scores_row[i]
                or (scores_row[j] == scores_row[i] and candidate_ids[j] < cid)))
        if best is None or ahead + 1 < best:
            best = ahead + 1
    if best is None:
        raise ValueError("no groundtruth candidate")
    return best


def numeric_sentence_gradient(params, tokens, image_feature, h=1e-5):
    """Central-difference gradient of the summed nat-log sentence loss."""

    def loss():
        trace = forward_sentence(params, tokens, image_feature)
        _, targets = sentence_inputs_targets(tokens)
        return -sum(float(np.log(s.y[t])) for s, t in zip(trace.steps, targets))

    grads = {}
    for name, arr in params.arrays.items():
        numeric = np.zeros_like(arr)
        flat, num = arr.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            num[i] = (up - down) / (2 * h)
        grads[name] = numeric
    return grads


def block_rel_err(analytic, numeric):
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return 0.0 if denom == 0 else float(np.linalg.norm(analytic - numeric)) / denom
