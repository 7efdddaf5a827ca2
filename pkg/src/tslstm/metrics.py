"""Corpus-level BLEU@1-4 and CIDEr."""

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

from .errors import MetricError
from .vocab import tokenize

Tokens = Sequence[str]

BLEU_SMOOTHING = "none"
CIDER_VARIANT = "cider"


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(candidates, references):
    if not candidates:
        raise MetricError("no candidates to score")
    if len(candidates) != len(references):
        raise MetricError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for k, refs in enumerate(references):
        if not refs:
            raise MetricError(f"item {k} has no references")


def _closest_ref_len(cand_len: int, refs: Sequence[Tokens]) -> int:
    # ties go to the shorter reference
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu_stats(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4):
    """Corpus sums: clipped matches and totals per order, candidate and
    effective reference length."""
    _check(candidates, references)
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
        for n in range(1, max_n + 1):
            cand_counts = ngrams(cand, n)
            max_ref = Counter()
            for ref in refs:
                for g, c in ngrams(ref, n).items():
                    max_ref[g] = max(max_ref[g], c)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    return matches, totals, c_len, r_len


def bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4) -> List[float]:
    """Unsmoothed corpus BLEU; returns ``[B@1, ..., B@max_n]``."""
    matches, totals, c, r = bleu_stats(candidates, references, max_n)
    if c == 0:
        return [0.0] * max_n
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matches[n] == 0 or totals[n] == 0:
            # zero precision zeroes this order and every higher one
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matches[n] / totals[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def _tfidf(counts: Counter, doc_freq: Mapping, log_n: float) -> Dict[tuple, float]:
    total = sum(counts.values())
    return {g: (c / total) * (log_n - math.log(max(1.0, doc_freq.get(g, 0.0)))) for g, c in counts.items()}


def _cosine(a: Dict, b: Dict) -> float:
    dot = sum(v * b.get(g, 0.0) for g, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def _tf_cosine(a: Counter, b: Counter) -> float:
    return _cosine({g: float(c) for g, c in a.items()}, {g: float(c) for g, c in b.items()})


def cider_scores(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
                 max_n: int = 4) -> List[float]:
    """Per-item CIDEr (already scaled by 10).

    Document frequency of an n-gram is the number of items whose reference
    set contains it. When every n-gram of both vectors carries zero IDF (it
    occurs in all items, e.g. a one-item corpus) the TF-IDF cosine is
    undefined and the plain term-frequency cosine is used instead.
    """
    _check(candidates, references)
    log_n = math.log(len(candidates))
    doc_freq = [Counter() for _ in range(max_n)]
    for refs in references:
        for n in range(1, max_n + 1):
            seen = set()
            for ref in refs:
                seen.update(ngrams(ref, n))
            doc_freq[n - 1].update(seen)
    out = []
    for cand, refs in zip(candidates, references):
        per_n = []
        for n in range(1, max_n + 1):
            df = doc_freq[n - 1]
            cc = ngrams(cand, n)
            vc = _tfidf(cc, df, log_n) if cc else {}
            sims = []
            for ref in refs:
                rc = ngrams(ref, n)
                vr = _tfidf(rc, df, log_n) if rc else {}
                if cc and rc and not any(vc.values()) and not any(vr.values()):
                    sims.append(_tf_cosine(cc, rc))
                else:
                    sims.append(_cosine(vc, vr))
            per_n.append(sum(sims) / len(sims))
        out.append(10.0 * sum(per_n) / max_n)
    return out


def cider(candidates, references, max_n: int = 4) -> float:
    scores = cider_scores(candidates, references, max_n)
    return sum(scores) / len(scores)


@dataclass
class MetricReport:
    bleu: List[float]
    cider: float
    per_item: List[dict] = field(default_factory=list)
    n_items: int = 0
    n_references: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        metrics = {f"bleu{n + 1}": b for n, b in enumerate(self.bleu)}
        metrics["cider"] = self.cider
        # METEOR needs external synonym resources; the key is reserved but absent
        return {
            "metrics": metrics,
            "config": {"smoothing": BLEU_SMOOTHING, "cider_variant": CIDER_VARIANT,
                       "cider_scale": 10.0, "meteor": None},
            "corpus": {"items": self.n_items, "references": self.n_references},
            "per_item": self.per_item,
            **({"meta": self.meta} if self.meta else {}),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self, label: str = "model") -> str:
        """One-row console table, values as percentages."""
        head = ["model"] + [f"B@{n + 1}" for n in range(len(self.bleu))] + ["C"]
        row = [label] + [f"{100 * b:.1f}" for b in self.bleu] + [f"{100 * self.cider:.1f}"]
        return format_table(head, [row])


def format_table(head: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    line = lambda r: " | ".join(str(x).ljust(w) for x, w in zip(r, widths))
    return "\n".join([line(head), "-+-".join("-" * w for w in widths)] + [line(r) for r in rows])


def evaluate(outputs: Mapping[str, str], references: Mapping[str, Sequence[str]],
             ids: Sequence[str] = None) -> MetricReport:
    """Score decoded captions (id -> sentence) against raw reference sentences."""
    ids = sorted(references) if ids is None else list(ids)
    missing = [i for i in ids if i not in outputs]
    if missing:
        raise MetricError(f"missing outputs for ids: {missing}")
    cands = [tokenize(outputs[i]) for i in ids]
    refs = [[tokenize(r) for r in references[i]] for i in ids]
    b = bleu(cands, refs)
    per = cider_scores(cands, refs)
    per_item = [{"id": i, "caption": outputs[i], "cider": s} for i, s in zip(ids, per)]
    return MetricReport(b, sum(per) / len(per), per_item, len(ids), sum(len(r) for r in refs))
