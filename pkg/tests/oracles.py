"""Independent reference implementations used only by tests."""
from itertools import permutations

import numpy as np
from shapely.geometry import Polygon


def shapely_iou(a, b) -> float:
    pa, pb = Polygon(np.asarray(a)), Polygon(np.asarray(b))
    union = pa.union(pb).area
    return pa.intersection(pb).area / union if union > 0 else 0.0


def optimal_tp(ious: np.ndarray, threshold: float) -> int:
    """Maximum one-to-one matching size by brute force over assignments."""
    g, p = ious.shape
    if g == 0 or p == 0:
        return 0
    best = 0
    if g <= p:
        for perm in permutations(range(p), g):
            best = max(best, sum(ious[i, perm[i]] >= threshold for i in range(g)))
    else:
        for perm in permutations(range(g), p):
            best = max(best, sum(ious[perm[j], j] >= threshold for j in range(p)))
    return int(best)


def ngram_counts(tokens, n):
    out = {}
    for i in range(len(tokens) - n + 1):
        key = tuple(tokens[i:i + n])
        out[key] = out.get(key, 0) + 1
    return out


def clipped_overlap(cand, ref, n):
    c, r = ngram_counts(cand, n), ngram_counts(ref, n)
    return sum(min(v, r.get(k, 0)) for k, v in c.items())


def rouge_n_oracle(cand, ref, n):
    total = sum(ngram_counts(ref, n).values())
    if total == 0:
        return 1.0 if not ngram_counts(cand, n) else 0.0
    return clipped_overlap(cand, ref, n) / total


def lcs_oracle(a, b):
    """LCS length by memoised recursion (a different formulation from the DP under test)."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))
    return go(0, 0)


def rouge_l_oracle(cand, ref):
    if not cand and not ref:
        return 1.0
    lcs = lcs_oracle(tuple(cand), tuple(ref))
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def bleu_oracle(cands, refs, floor=1e-9):
    import math
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    if c_len == 0:
        return 1.0 if r_len == 0 else 0.0
    logs = []
    for n in range(1, 5):
        m = sum(clipped_overlap(c, r, n) for c, r in zip(cands, refs))
        t = sum(max(len(c) - n + 1, 0) for c in cands)
        rt = sum(max(len(r) - n + 1, 0) for r in refs)
        if t == 0:
            p = 1.0 if rt == 0 else floor
        else:
            p = max(m / t, floor)
        logs.append(math.log(p))
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return min(1.0, bp * math.exp(sum(logs) / 4))


def edit_distance(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]

