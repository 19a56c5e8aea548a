"""Caption metrics: corpus BLEU-1..4, ROUGE-L, a synonym-free METEOR,
CIDEr-D, their S*_m average, router accuracy and the rho conversion ratio.

All scores are on a 0-100 scale (CIDEr-D is x10 and can exceed 100). Inputs
are raw strings; every metric tokenizes with :func:`hisem.data.tokenize`.
Corpus arguments are ``candidates: list[str]`` and
``references: list[list[str]]`` aligned by position.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import tokenize


def _check_corpus(candidates, references):
    if len(candidates) == 0:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if len(refs) == 0:
            raise ValueError(f"candidate {i} has no references")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ------------------------------------------------------------------ BLEU
def bleu_n(candidates: Sequence[str], references: Sequence[Sequence[str]], n: int = 4) -> float:
    """Corpus BLEU with uniform weights over orders ``1..n``.

    Zero precisions are smoothed by adding 1e-9. The effective reference
    length is the closest reference length (shorter wins ties). An empty
    candidate corpus scores 0.
    """
    if n not in (1, 2, 3, 4):
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    _check_corpus(candidates, references)
    matched = np.zeros(n)
    total = np.zeros(n)
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        c = tokenize(cand)
        rs = [tokenize(r) for r in refs]
        c_len += len(c)
        r_len += min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
        for k in range(1, n + 1):
            cg = ngrams(c, k)
            max_ref = Counter()
            for r in rs:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(cnt, max_ref[g]) for g, cnt in cg.items())
            total[k - 1] += max(len(c) - k + 1, 0)
    if c_len == 0:
        return 0.0
    precisions = [(m / t if t > 0 else 0.0) for m, t in zip(matched, total)]
    precisions = [p if p > 0 else 1e-9 for p in precisions]
    log_p = sum(math.log(p) for p in precisions) / n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p)


# ------------------------------------------------------------------ ROUGE-L
def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(candidate: str, refs: Sequence[str], beta: float = 1.2) -> float:
    c = tokenize(candidate)
    best = 0.0
    for ref in refs:
        r = tokenize(ref)
        lcs = lcs_length(c, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(c), lcs / len(r)
        f = (1 + beta**2) * p * rec / (rec + beta**2 * p)
        best = max(best, f)
    return best


def rouge_l(candidates: Sequence[str], references: Sequence[Sequence[str]], beta: float = 1.2) -> float:
    _check_corpus(candidates, references)
    return 100.0 * float(np.mean([rouge_l_sentence(c, r, beta) for c, r in zip(candidates, references)]))


# ------------------------------------------------------------------ METEOR-lite
_SUFFIXES = ("ational", "ization", "fulness", "ousness", "iveness", "ations", "ation", "ments", "ment",
             "ness", "ings", "ing", "edly", "ies", "ied", "ers", "est", "ed", "er", "ly", "s")


def stem(word: str) -> str:
    """Crude suffix stripper: drop the longest listed suffix that leaves a stem of
    three or more letters, then undouble a trailing consonant ("running" -> "run")."""
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3 and not (suf == "s" and word.endswith("ss")):
            base = word[: -len(suf)]
            if suf in ("ies", "ied"):
                base += "y"
            if len(base) >= 4 and base[-1] == base[-2] and base[-1] not in "aeiouls":
                base = base[:-1]
            return base
    return word


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Exact matches first, then stem matches, each stage left to right."""
    used_c, used_r, pairs = set(), set(), []
    for key in (lambda w: w, stem):
        ref_keys = [key(w) for w in ref]
        for i, w in enumerate(cand):
            if i in used_c:
                continue
            kw = key(w)
            for j, rk in enumerate(ref_keys):
                if j not in used_r and rk == kw:
                    used_c.add(i)
                    used_r.add(j)
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def meteor_sentence(candidate: str, refs: Sequence[str]) -> float:
    c = tokenize(candidate)
    best = 0.0
    for ref in refs:
        r = tokenize(ref)
        pairs = _align(c, r)
        m = len(pairs)
        if m == 0:
            continue
        chunks = 1 + sum(
            1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1)
        )
        p, rec = m / len(c), m / len(r)
        f_mean = 10 * p * rec / (rec + 9 * p)
        penalty = 0.5 * (chunks / m) ** 3
        best = max(best, f_mean * (1 - penalty))
    return best


def meteor_lite(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    _check_corpus(candidates, references)
    return 100.0 * float(np.mean([meteor_sentence(c, r) for c, r in zip(candidates, references)]))


# ------------------------------------------------------------------ CIDEr-D
def cider_d(
    candidates: Sequence[str], references: Sequence[Sequence[str]], sigma: float = 6.0, max_n: int = 4
) -> float:
    """CIDEr-D averaged over the corpus.

    Document frequencies come from the reference sets only, one document per
    candidate. Per order ``n`` the TF-IDF vectors of candidate and each
    reference are compared with a cosine whose numerator clips the candidate
    weights by the reference weights, damped by a Gaussian length penalty.
    The per-order values are averaged over references and orders and scaled
    by 10.
    """
    _check_corpus(candidates, references)
    n_docs = len(candidates)
    refs_tok = [[tokenize(r) for r in refs] for refs in references]
    if len({tuple(r) for refs in refs_tok for r in refs}) < 2:
        warnings.warn("fewer than two distinct reference sentences; CIDEr-D IDF is degenerate", stacklevel=2)
    df = Counter()
    for refs in refs_tok:
        seen = set()
        for r in refs:
            for k in range(1, max_n + 1):
                seen.update(ngrams(r, k))
        df.update(seen)
    log_n = math.log(float(n_docs))

    def vectorize(tokens):
        vecs, norms = [], []
        for k in range(1, max_n + 1):
            vec = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in ngrams(tokens, k).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms, len(tokens)

    scores = []
    for cand, refs in zip(candidates, refs_tok):
        cv, cn, cl = vectorize(tokenize(cand))
        acc = np.zeros(max_n)
        for r in refs:
            rv, rn, rl = vectorize(r)
            delta = cl - rl
            for k in range(max_n):
                val = sum(min(w, rv[k][g]) * rv[k][g] for g, w in cv[k].items() if g in rv[k])
                if cn[k] != 0 and rn[k] != 0:
                    val /= cn[k] * rn[k]
                acc[k] += val * math.exp(-(delta**2) / (2 * sigma**2))
        scores.append(float(np.mean(acc)) / len(refs) * 10.0)
    return 100.0 * float(np.mean(scores))


# ------------------------------------------------------------------ summaries
def s_star_m(bleu4: float, rouge: float, meteor: float, cider: float) -> float:
    return (bleu4 + rouge + meteor + cider) / 4.0


def rho_conversion(score_pre: float, score_gt: float, acc_pre: float, acc_gt: float) -> float:
    """Caption-score gain per percentage point of router-accuracy gain."""
    d_acc = acc_gt - acc_pre
    if d_acc == 0:
        raise ZeroDivisionError("router accuracy did not change; rho is undefined")
    return (score_gt - score_pre) / d_acc


@dataclass
class MetricReport:
    stratum: str
    n_samples: int
    bleu1: float | None = None
    bleu2: float | None = None
    bleu3: float | None = None
    bleu4: float | None = None
    meteor: float | None = None
    rouge_l: float | None = None
    cider_d: float | None = None
    s_star_m: float | None = None
    router_accuracy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    SCORE_KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider_d", "s_star_m")


def evaluate_corpus(candidates, references, stratum: str = "all", with_cider: bool = True) -> MetricReport:
    rep = MetricReport(stratum=stratum, n_samples=len(candidates))
    if not candidates:
        return rep
    rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4 = (bleu_n(candidates, references, n) for n in (1, 2, 3, 4))
    rep.meteor = meteor_lite(candidates, references)
    rep.rouge_l = rouge_l(candidates, references)
    if with_cider:
        rep.cider_d = cider_d(candidates, references)
        rep.s_star_m = s_star_m(rep.bleu4, rep.rouge_l, rep.meteor, rep.cider_d)
    return rep


def router_accuracy(predicted_paths, labels) -> float:
    predicted_paths, labels = np.asarray(predicted_paths), np.asarray(labels)
    if predicted_paths.shape != labels.shape:
        raise ValueError("router decisions and labels are misaligned")
    if labels.size == 0:
        return float("nan")
    return 100.0 * float(np.mean(predicted_paths == labels))


def stratified_evaluate(predictions, references, labels, paths) -> dict[str, MetricReport]:
    """Reports for all pairs, changed pairs and unchanged pairs (by true label).

    The unchanged stratum carries no CIDEr-D and no S*_m.
    """
    n = len(predictions)
    if not (len(references) == len(labels) == len(paths) == n):
        raise ValueError("predictions, references, labels and routing decisions must be aligned")
    labels = np.asarray(labels)
    paths = np.asarray(paths)
    out = {}
    for stratum, idx in (
        ("all", np.arange(n)),
        ("changed", np.flatnonzero(labels == 1)),
        ("unchanged", np.flatnonzero(labels == 0)),
    ):
        cands = [predictions[i] for i in idx]
        refs = [references[i] for i in idx]
        rep = evaluate_corpus(cands, refs, stratum, with_cider=stratum != "unchanged")
        if idx.size:
            rep.router_accuracy = router_accuracy(paths[idx], labels[idx])
        out[stratum] = rep
    return out


def rho_table(pre: dict[str, MetricReport], gt: dict[str, MetricReport]) -> dict[str, dict[str, float | None]]:
    """Per stratum and metric, rho between predicted-routing and ground-truth-routing reports."""
    table = {}
    for stratum in pre:
        a, b = pre[stratum], gt[stratum]
        row = {}
        for key in MetricReport.SCORE_KEYS:
            x, y = getattr(a, key), getattr(b, key)
            if x is None or y is None or a.router_accuracy is None or a.router_accuracy == b.router_accuracy:
                row[key] = None
            else:
                row[key] = rho_conversion(x, y, a.router_accuracy, b.router_accuracy)
        table[stratum] = row
    return table


def format_reports(reports: dict[str, MetricReport]) -> str:
    cols = ("router_accuracy",) + MetricReport.SCORE_KEYS
    head = f"{'stratum':<10} {'n':>5} " + " ".join(f"{c:>15}" for c in cols)
    lines = [head]
    for rep in reports.values():
        cells = []
        for c in cols:
            v = getattr(rep, c)
            cells.append(f"{'--':>15}" if v is None else f"{v:>15.2f}")
        lines.append(f"{rep.stratum:<10} {rep.n_samples:>5} " + " ".join(cells))
    return "\n".join(lines)
