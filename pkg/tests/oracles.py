"""Independent reference computations used by the metric tests."""

import math

import numpy as np


def _grams(words, n):
    return [" ".join(words[i : i + n]) for i in range(len(words) - n + 1)]


def brute_force_cider_d(candidate, references, corpus, n_max=4, sigma=6.0):
    """Dense-vector CIDEr-D.

    ``corpus`` is the list of reference sets that define document
    frequencies. Every n-gram that appears anywhere gets a fixed coordinate;
    weights and cosines are computed with numpy over those coordinates.
    """
    cand = candidate.split()
    if not cand:
        return 0.0
    refs = [r.split() for r in references]
    docs = [[r.split() for r in refset] for refset in corpus]
    total = 0.0
    for ref in refs:
        per_n = []
        for n in range(1, n_max + 1):
            space = sorted(set(_grams(cand, n)) | set(_grams(ref, n)))
            df = np.array([sum(any(g in _grams(d, n) for d in doc) for doc in docs) for g in space], dtype=float)
            idf = math.log(len(docs)) - np.log(np.maximum(df, 1.0))
            c = np.array([_grams(cand, n).count(g) for g in space], dtype=float) * idf
            r = np.array([_grams(ref, n).count(g) for g in space], dtype=float) * idf
            num = float(np.sum(np.minimum(c, r) * r))
            nc, nr = np.linalg.norm(c), np.linalg.norm(r)
            val = num / (nc * nr) if nc > 0 and nr > 0 else num
            per_n.append(val * math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma**2)))
        total += sum(per_n) / n_max
    return 10.0 * total / len(refs)
