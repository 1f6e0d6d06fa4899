"""From-scratch evaluation battery: WER, corpus BLEU@4, ROUGE-L, a
synonym-free METEOR variant, plain CIDEr, unweighted accuracy, and the paired
single-tailed t-test.

Tokens are compared exactly; the shared normalization (lowercase, whitespace
split, punctuation stripped) lives in :func:`normalize_tokens` and is applied
by the corpus evaluator, not by the individual metrics.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .decoder import ParsedResponse, parse_response

__all__ = [
    "MetricReport",
    "StatError",
    "TTestResult",
    "normalize_tokens",
    "wer",
    "levenshtein_alignment",
    "bleu4",
    "rouge_l",
    "meteor_lite",
    "cider",
    "cider_scores",
    "unweighted_accuracy",
    "paired_t_test",
    "evaluate_corpus",
]

# METEOR-lite parameters: published defaults, exact matching only
_METEOR_ALPHA = 0.9
_METEOR_GAMMA = 0.5
_METEOR_THETA = 3

_PUNCT_TABLE = str.maketrans("", "", string.punctuation.replace(":", ""))


class StatError(ValueError):
    """A statistical precondition failed (too few samples, zero variance)."""


def normalize_tokens(tokens: Iterable[str]) -> list[str]:
    """Lowercase, strip punctuation (colons survive: they mark grammar
    fields), drop empties."""
    out = []
    for tok in tokens:
        cleaned = tok.lower().translate(_PUNCT_TABLE)
        if cleaned:
            out.append(cleaned)
    return out


# ---------------------------------------------------------------------------
# WER


def levenshtein_alignment(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) from the unit-cost alignment.

    DP ties resolve by preferring substitution over deletion over insertion,
    fixing the backtrace for reproducible alignments.
    """
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = dist[i - 1][j] + 1
            ins = dist[i][j - 1] + 1
            dist[i][j] = min(sub, dele, ins)
    subs = dels = inss = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            inss += 1
            j -= 1
    return subs, dels, inss


def wer(ref: Sequence[str], hyp: Sequence[str]) -> float:
    """(S + D + I) / |ref|. An empty hypothesis scores |ref| deletions."""
    if not ref:
        raise ValueError("WER reference must be non-empty")
    s, d, i = levenshtein_alignment(ref, hyp)
    return (s + d + i) / len(ref)


# ---------------------------------------------------------------------------
# BLEU@4


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(pairs: Sequence[tuple[Sequence[str], Sequence[Sequence[str]]]]) -> float:
    """Corpus-level BLEU@4: clipped modified n-gram precisions pooled over the
    corpus, uniform geometric mean, brevity penalty exp(min(0, 1 - r/c)), no
    smoothing. Each pair is (hypothesis, list of references)."""
    if not pairs:
        raise ValueError("bleu4 needs a non-empty corpus")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, refs in pairs:
        hyp = list(hyp)
        refs = [list(r) for r in refs]
        hyp_len += len(hyp)
        if refs:
            # closest reference length; ties go to the shorter
            ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = _ngrams(hyp, n)
            if not counts:
                continue
            clip: Counter = Counter()
            for r in refs:
                rc = _ngrams(r, n)
                for g in counts:
                    clip[g] = max(clip[g], rc.get(g, 0))
            totals[n - 1] += sum(counts.values())
            matches[n - 1] += sum(min(c, clip.get(g, 0)) for g, c in counts.items())
    if any(t == 0 for t in totals) or any(m == 0 for m in matches):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len)) if hyp_len else 0.0
    return bp * math.exp(log_prec)


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """LCS F1: P = LCS/|hyp|, R = LCS/|ref|, F = 2PR/(P+R)."""
    if not ref:
        raise ValueError("rouge_l reference must be non-empty")
    if not hyp:
        return 0.0
    lcs = _lcs(hyp, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


# ---------------------------------------------------------------------------
# METEOR-lite


def _meteor_align(hyp: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """Exact unigram alignment maximizing matches, then minimizing chunks.

    Exhaustive search with pruning; duplicate tokens are rare in this domain
    so the branch factor stays tiny. Returns (matches, chunks).
    """
    ref_positions: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        ref_positions.setdefault(w, []).append(j)
    hyp_counts = Counter(hyp)
    ref_counts = Counter(ref)
    total_matches = sum(min(c, ref_counts.get(w, 0)) for w, c in hyp_counts.items())
    if total_matches == 0:
        return 0, 0

    # remaining possible matches from hyp position i onward, per word budget
    best_chunks = [math.inf]
    budget = 200_000
    nodes = [0]

    def dfs(i: int, used: frozenset, matched: int, last_ref: int, chunks: int,
            remaining: Counter) -> None:
        if chunks >= best_chunks[0]:
            return
        nodes[0] += 1
        if nodes[0] > budget:
            return
        if i == len(hyp):
            if matched == total_matches:
                best_chunks[0] = min(best_chunks[0], chunks)
            return
        w = hyp[i]
        possible_after = matched + sum(
            min(remaining[x], len([j for j in ref_positions.get(x, []) if j not in used]))
            for x in remaining if remaining[x] > 0)
        if possible_after < total_matches:
            return
        options = [j for j in ref_positions.get(w, []) if j not in used]
        for j in options:
            new_chunk = chunks + (0 if j == last_ref + 1 else 1)
            rem = remaining.copy()
            rem[w] -= 1
            dfs(i + 1, used | {j}, matched + 1, j, new_chunk, rem)
        # skipping this occurrence is allowed only if max matches stay reachable
        rem = remaining.copy()
        rem[w] -= 1
        dfs(i + 1, used, matched, -2, chunks, rem)

    remaining = Counter(hyp)
    dfs(0, frozenset(), 0, -2, 0, remaining)
    if not math.isfinite(best_chunks[0]):
        # budget blown: greedy left-to-right fallback
        used: set[int] = set()
        chunks = 0
        last = -2
        for w in hyp:
            opts = [j for j in ref_positions.get(w, []) if j not in used]
            if not opts:
                last = -2
                continue
            j = opts[0] if last + 1 not in opts else last + 1
            chunks += 0 if j == last + 1 else 1
            used.add(j)
            last = j
        return total_matches, max(chunks, 1)
    return total_matches, int(best_chunks[0])


def meteor_lite(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Exact-match METEOR: F = PR / (alpha*R + (1-alpha)*P) with alpha = 0.9,
    penalty = gamma * (chunks/matches)^theta, score = F * (1 - penalty)."""
    if not ref:
        raise ValueError("meteor_lite reference must be non-empty")
    if not hyp:
        return 0.0
    matches, chunks = _meteor_align(list(hyp), list(ref))
    if matches == 0:
        return 0.0
    p = matches / len(hyp)
    r = matches / len(ref)
    f = p * r / (_METEOR_ALPHA * r + (1 - _METEOR_ALPHA) * p)
    penalty = _METEOR_GAMMA * (chunks / matches) ** _METEOR_THETA
    return f * (1.0 - penalty)


# ---------------------------------------------------------------------------
# CIDEr


def _tfidf(counts: Counter, idf: Mapping, default_idf: float) -> dict:
    return {g: c * idf.get(g, default_idf) for g, c in counts.items()}


def _cosine(a: Mapping, b: Mapping) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return dot / (na * nb)


def cider_scores(items: Sequence[tuple[Sequence[str], Sequence[Sequence[str]]]]) -> list[float]:
    """Per-utterance plain CIDEr: for n = 1..4, TF-IDF n-gram cosine against
    each reference (averaged over references), with IDF =
    log(corpus_size / max(1, df)) where df counts each utterance's reference
    set once. Scores are scaled by 10 and averaged over n."""
    n_docs = len(items)
    if n_docs < 2:
        raise ValueError("cider needs a corpus of at least 2 utterances for the IDF pool")
    idf_by_n: list[dict] = []
    for n in range(1, 5):
        df: Counter = Counter()
        for _, refs in items:
            seen = set()
            for r in refs:
                seen.update(_ngrams(list(r), n).keys())
            for g in seen:
                df[g] += 1
        idf_by_n.append({g: math.log(n_docs / max(1, d)) for g, d in df.items()})
    default_idf = math.log(n_docs)  # n-grams unseen in any reference
    scores = []
    for hyp, refs in items:
        hyp = list(hyp)
        per_n = []
        for n in range(1, 5):
            idf = idf_by_n[n - 1]
            vec_h = _tfidf(_ngrams(hyp, n), idf, default_idf)
            if not refs:
                per_n.append(0.0)
                continue
            sims = []
            for r in refs:
                vec_r = _tfidf(_ngrams(list(r), n), idf, default_idf)
                sims.append(_cosine(vec_h, vec_r))
            per_n.append(sum(sims) / len(sims))
        scores.append(10.0 * sum(per_n) / 4.0)
    return scores


def cider(items: Sequence[tuple[Sequence[str], Sequence[Sequence[str]]]]) -> float:
    scores = cider_scores(items)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# UA and significance


def unweighted_accuracy(pairs: Sequence[tuple[str, str | None]],
                        classes: Sequence[str] | None = None) -> float:
    """Mean per-class recall. Classes default to the distinct true labels; an
    explicit class with no true instance is an error. Absent predictions count
    as incorrect."""
    if not pairs:
        raise ValueError("unweighted_accuracy needs at least one pair")
    truth = [t for t, _ in pairs]
    if classes is None:
        classes = sorted(set(truth))
    recalls = []
    for cls in classes:
        idx = [i for i, t in enumerate(truth) if t == cls]
        if not idx:
            raise ValueError(f"class {cls!r} has zero true instances")
        correct = sum(1 for i in idx if pairs[i][1] == cls)
        recalls.append(correct / len(idx))
    return sum(recalls) / len(recalls)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p_one_tailed: float
    significant: bool
    df: int


def _betacf(a: float, b: float, x: float, max_iter: int = 200, eps: float = 3e-14) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def _betainc_reg(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _student_t_sf(t: float, df: int) -> float:
    """P(T >= t) for Student's t with df degrees of freedom."""
    x = df / (df + t * t)
    half = 0.5 * _betainc_reg(df / 2.0, 0.5, x)
    return half if t >= 0 else 1.0 - half


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float],
                  alpha: float = 0.05) -> TTestResult:
    """One-tailed paired t-test of mean(a - b) > 0 with sample sd (n-1)."""
    if len(scores_a) != len(scores_b):
        raise StatError("paired scores must have equal lengths")
    n = len(scores_a)
    if n < 2:
        raise StatError("paired t-test needs at least 2 pairs")
    d = [a - b for a, b in zip(scores_a, scores_b)]
    mean = sum(d) / n
    var = sum((x - mean) ** 2 for x in d) / (n - 1)
    if var == 0.0:
        raise StatError("zero variance of paired differences")
    t = mean / math.sqrt(var / n)
    p = _student_t_sf(t, n - 1)
    return TTestResult(t=t, p_one_tailed=p, significant=p < alpha, df=n - 1)


# ---------------------------------------------------------------------------
# corpus evaluation


@dataclass
class MetricReport:
    b4: float
    meteor: float
    rouge_l: float
    cider: float
    wer: float
    ua: float
    n_utterances: int
    n_unparseable: int
    per_utterance: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "b4": self.b4, "meteor": self.meteor, "rouge_l": self.rouge_l,
            "cider": self.cider, "wer": self.wer, "ua": self.ua,
            "n_utterances": self.n_utterances, "n_unparseable": self.n_unparseable,
            "per_utterance": self.per_utterance,
        }


def evaluate_corpus(outputs: Mapping[str, Sequence[str]],
                    references: Mapping[str, tuple[Sequence[str], Sequence[str]]],
                    labels: Mapping[str, str]) -> MetricReport:
    """Score generated responses against per-utterance references.

    `outputs` maps utterance id to generated token strings; `references` maps
    id to (transcript tokens, descriptor caption tokens); `labels` maps id to
    the true emotion. Corpus WER is total edits over total reference length;
    ROUGE-L / METEOR / CIDEr are means over utterances; BLEU@4 is pooled.
    """
    ids = sorted(outputs)
    if set(ids) != set(references) or set(ids) != set(labels):
        raise ValueError("outputs, references and labels must cover the same utterance ids")
    per_utt: dict[str, dict] = {}
    edits = 0
    ref_tokens = 0
    desc_pairs = []
    ua_pairs = []
    n_unparseable = 0
    parsed_all: dict[str, ParsedResponse] = {}
    for uid in ids:
        # parse on the raw tokens (grammar markers intact), then normalize the
        # extracted field content for comparison
        parsed = parse_response(outputs[uid])
        parsed_all[uid] = parsed
        if parsed.transcript is None and parsed.descriptor is None and parsed.emotion is None:
            n_unparseable += 1
        ref_tr = normalize_tokens(references[uid][0])
        ref_desc = normalize_tokens(references[uid][1])
        hyp_tr = normalize_tokens(parsed.transcript or [])
        s, d, i = levenshtein_alignment(ref_tr, hyp_tr)
        edits += s + d + i
        ref_tokens += len(ref_tr)
        hyp_desc = normalize_tokens(parsed.descriptor or [])
        desc_pairs.append((hyp_desc, [ref_desc]))
        ua_pairs.append((labels[uid], parsed.emotion))
        per_utt[uid] = {
            "wer": (s + d + i) / len(ref_tr),
            "rouge_l": rouge_l(hyp_desc, ref_desc),
            "meteor": meteor_lite(hyp_desc, ref_desc),
            "emotion_true": labels[uid],
            "emotion_pred": parsed.emotion,
        }
    cider_per_utt = cider_scores(desc_pairs) if len(desc_pairs) >= 2 else [0.0] * len(ids)
    for uid, score in zip(ids, cider_per_utt):
        per_utt[uid]["cider"] = score
    report = MetricReport(
        b4=bleu4(desc_pairs),
        meteor=sum(per_utt[u]["meteor"] for u in ids) / len(ids),
        rouge_l=sum(per_utt[u]["rouge_l"] for u in ids) / len(ids),
        cider=sum(cider_per_utt) / len(cider_per_utt),
        wer=edits / ref_tokens if ref_tokens else 0.0,
        ua=unweighted_accuracy(ua_pairs),
        n_utterances=len(ids),
        n_unparseable=n_unparseable,
        per_utterance=per_utt,
    )
    return report
