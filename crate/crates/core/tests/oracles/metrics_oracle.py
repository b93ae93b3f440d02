#!/usr/bin/env python3
"""Independent reference for the caption metrics.

Writes ../golden/metrics.json: a frozen suite of token-id inputs together with
the CIDEr-D, BLEU and ROUGE-L values computed here from the textbook
definitions. The Rust suite in tests/metrics.rs replays the inputs and compares
against these numbers, so this script is only re-run when the suite changes.

Conventions (token ids, SOS/EOS already stripped):
  * idf(g)   = log(N / max(df(g), 1)), df counted once per reference document.
  * CIDEr-D  = 10 * mean_n mean_refs  sum_g min(c_g, r_g) * r_g / (|c| |r|)
               * exp(-(len_c - len_r)^2 / (2 * 6^2)), with c_g = tf * idf.
  * BLEU     = corpus-level clipped precisions, geometric mean, brevity
               penalty exp(1 - r/c) when c < r, 0 if any precision is 0.
  * ROUGE-L  = (1 + b^2) P R / (R + b^2 P), b = 1.2, LCS by memoised recursion.
"""

import json
import math
import os
import sys
from functools import lru_cache

SIGMA = 6.0
MAX_N = 4


def ngrams(seq, n):
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def idf_of(corpus):
    n_docs = len(corpus)

    def idf(gram):
        df = sum(1 for doc in corpus if gram in set(ngrams(doc, len(gram))))
        return math.log(n_docs / max(df, 1))

    return idf


def tfidf_dense(seq, n, idf, keys):
    grams = ngrams(seq, n)
    return [grams.count(k) * idf(k) for k in keys]


def cider(cand, refs, idf, clipped=True):
    if not cand:
        return 0.0
    total = 0.0
    for n in range(1, MAX_N + 1):
        acc = 0.0
        for ref in refs:
            keys = sorted(set(ngrams(cand, n)) | set(ngrams(ref, n)))
            c = tfidf_dense(cand, n, idf, keys)
            r = tfidf_dense(ref, n, idf, keys)
            if clipped:
                dot = sum(min(a, b) * b for a, b in zip(c, r))
            else:
                dot = sum(a * b for a, b in zip(c, r))
            nc = math.sqrt(sum(a * a for a in c))
            nr = math.sqrt(sum(b * b for b in r))
            sim = dot / (nc * nr) if nc > 0 and nr > 0 else 0.0
            if clipped:
                sim *= math.exp(-((len(cand) - len(ref)) ** 2) / (2 * SIGMA ** 2))
            acc += sim
        total += acc / len(refs)
    return 10.0 * total / MAX_N


def bleu(cands, refs, max_n):
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    if c_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        hit = tot = 0
        for c, r in zip(cands, refs):
            cg, rg = ngrams(c, n), ngrams(r, n)
            for g in set(cg):
                hit += min(cg.count(g), rg.count(g))
            tot += len(cg)
        if hit == 0 or tot == 0:
            return 0.0
        log_p += math.log(hit / tot)
    bp = math.exp(1 - r_len / c_len) if c_len < r_len else 1.0
    return bp * math.exp(log_p / max_n)


def lcs(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_l(cand, ref, beta=1.2):
    if not cand or not ref:
        return 0.0
    m = lcs(cand, ref)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


CORPUS = [
    [5, 6, 7, 8, 9],
    [5, 6, 10, 8, 9],
    [11, 12, 7, 13],
    [5, 14, 15, 16, 9, 17],
    [18, 6, 7, 8],
    [5, 6, 7, 8, 9, 19, 20],
    [21, 22],
    [5, 23, 7, 8, 24, 9],
]

CIDER_CASES = [
    ("identical", [5, 6, 7, 8, 9], [[5, 6, 7, 8, 9]]),
    ("truncated", [5, 6, 7, 8], [[5, 6, 7, 8, 9]]),
    ("two_refs", [5, 6, 7, 8, 9], [[5, 6, 10, 8, 9], [5, 6, 7, 8, 9, 19, 20]]),
    ("disjoint", [30, 31], [[5, 6, 7, 8, 9]]),
    ("repeated_long", [5, 6, 7, 8, 9] * 3, [[5, 6, 7, 8, 9]]),
    ("repeated_token", [7, 7, 7], [[11, 12, 7, 13]]),
    ("unseen_ngrams", [5, 6, 30, 8, 9], [[5, 6, 7, 8, 9]]),
    ("short_ref", [21, 22, 5], [[21, 22]]),
    ("three_refs", [18, 6, 7, 8, 9], [[18, 6, 7, 8], [5, 6, 7, 8, 9], [5, 23, 7, 8, 24, 9]]),
]

BLEU_CASES = [
    ("clipped_unigram", [[5, 5, 5]], [[5, 6]], 1),
    ("identical_4", [[1, 2, 3, 4, 5]], [[1, 2, 3, 4, 5]], 4),
    ("brevity_1", [[1, 2]], [[1, 2, 3, 4]], 1),
    ("no_fourgram", [[1, 2, 3, 9, 4, 5]], [[1, 2, 3, 4, 5]], 4),
    ("corpus_1", [[5, 6, 7, 8], [11, 12, 13], [18, 6, 7, 8, 9], [5, 23, 7]],
     [[5, 6, 7, 8, 9], [11, 12, 7, 13], [18, 6, 7, 8], [5, 23, 7, 8, 24, 9]], 1),
    ("corpus_2", [[5, 6, 7, 8], [11, 12, 13], [18, 6, 7, 8, 9], [5, 23, 7]],
     [[5, 6, 7, 8, 9], [11, 12, 7, 13], [18, 6, 7, 8], [5, 23, 7, 8, 24, 9]], 2),
    ("corpus_4", [[5, 6, 7, 8, 9, 1], [11, 12, 7, 13, 2], [18, 6, 7, 8, 5], [5, 23, 7, 8, 24]],
     [[5, 6, 7, 8, 9], [11, 12, 7, 13], [18, 6, 7, 8], [5, 23, 7, 8, 24, 9]], 4),
]

ROUGE_CASES = [
    ("abcd_ace", [1, 2, 3, 4], [1, 3, 5], 1.2),
    ("ace_abcd", [1, 3, 5], [1, 2, 3, 4], 1.2),
    ("identical", [4, 5, 6], [4, 5, 6], 1.2),
    ("disjoint", [1, 2], [3, 4], 1.2),
    ("interleaved", [1, 9, 2, 9, 3, 9, 4], [4, 1, 2, 3, 5, 4], 1.2),
    ("reversed", [1, 2, 3, 4, 5], [5, 4, 3, 2, 1], 1.2),
    ("abcd_ace_beta1", [1, 2, 3, 4], [1, 3, 5], 1.0),
]

# Candidates paired one-to-one with CORPUS for the corpus-level report.
REPORT_CANDS = [
    [5, 6, 7, 8, 9],
    [5, 6, 8, 9],
    [11, 12, 13],
    [5, 14, 15, 9, 17],
    [18, 6, 7, 8, 8],
    [5, 6, 7, 8, 9],
    [21, 22],
    [5, 7, 8, 24, 9],
]


def main():
    idf = idf_of(CORPUS)
    idf_samples = [[5], [7], [9], [21], [99], [5, 6], [7, 8], [6, 7, 8], [5, 6, 7, 8], [21, 22]]
    out = {
        "corpus": CORPUS,
        "idf": [{"ngram": g, "idf": idf(tuple(g))} for g in idf_samples],
        "cider": [
            {"name": name, "candidate": c, "references": r,
             "cider_d": cider(c, r, idf), "plain": cider(c, r, idf, clipped=False)}
            for name, c, r in CIDER_CASES
        ],
        "bleu": [
            {"name": name, "candidates": c, "references": r, "max_n": n, "value": bleu(c, r, n)}
            for name, c, r, n in BLEU_CASES
        ],
        "rouge": [
            {"name": name, "candidate": c, "reference": r, "beta": b, "value": rouge_l(c, r, b)}
            for name, c, r, b in ROUGE_CASES
        ],
        "report": {
            "candidates": REPORT_CANDS,
            "bleu1": bleu(REPORT_CANDS, CORPUS, 1),
            "bleu4": bleu(REPORT_CANDS, CORPUS, 4),
            "rougeL": sum(rouge_l(c, r) for c, r in zip(REPORT_CANDS, CORPUS)) / len(CORPUS),
            "cider": sum(cider(c, [r], idf) for c, r in zip(REPORT_CANDS, CORPUS)) / len(CORPUS),
        },
    }
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "golden", "metrics.json")
    with open(path, "w") as f:
        json.dump(out, f, indent=1)
        f.write("\n")
    print(f"wrote {os.path.normpath(path)}", file=sys.stderr)


if __name__ == "__main__":
    main()
