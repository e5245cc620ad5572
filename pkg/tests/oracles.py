"""Brute-force reference implementations of the lexical metrics.

Written without Counter or bit tricks so they share no code path with the package.
"""

from __future__ import annotations

import math


def gram_list(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def clipped_matches(cand_grams, ref_grams):
    pool = list(ref_grams)
    hits = 0
    for g in cand_grams:
        if g in pool:
            pool.remove(g)
            hits += 1
    return hits


def bleu_oracle(cand, ref, max_n=4):
    if not cand:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        cg = gram_list(cand, n)
        hits = clipped_matches(cg, gram_list(ref, n))
        if hits == 0:
            if n == 1:
                return 0.0
            precisions.append(1.0 / (len(cg) + 1))
        else:
            precisions.append(hits / len(cg))
    geo = math.exp(sum(math.log(p) for p in precisions) / max_n)
    c, r = len(cand), len(ref)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * geo


def f1(overlap, n_cand, n_ref):
    if overlap == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n_oracle(cand, ref, n):
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    cg, rg = gram_list(cand, n), gram_list(ref, n)
    if not cg and not rg:
        return 1.0 if cand == ref else 0.0
    return f1(clipped_matches(cg, rg), len(cg), len(rg))


def lcs_oracle(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def rouge_l_oracle(cand, ref):
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    return f1(lcs_oracle(cand, ref), len(cand), len(ref))


def cosine_oracle(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return 0.0 if na == 0 or nb == 0 else dot / (na * nb)
