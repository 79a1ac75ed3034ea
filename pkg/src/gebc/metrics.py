"""Caption metrics: CIDEr-D, ROUGE-L and per-kind / average aggregation.

CIDEr-D follows the usual coco-caption definition: n-gram (n = 1..4) TF-IDF
vectors with document frequencies taken over the reference sets of the split
being scored, candidate weights clipped to the reference weights, a Gaussian
length penalty, and a final factor of 10. Scores live in [0, 10] (CIDEr-D)
and [0, 1] (ROUGE-L); percent display is a presentation option.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from gebc.caption import tokenize
from gebc.datamodel import CaptionKind, load_annotations
from gebc.errors import DataError

KINDS = tuple(k.value for k in CaptionKind)
METRICS = ("CIDEr", "ROUGE_L")


def _as_tokens(sentence: str | Sequence[str]) -> list[str]:
    return tokenize(sentence) if isinstance(sentence, str) else list(sentence)


def ngram_counts(tokens: Sequence[str], n_max: int = 4) -> Counter:
    counts = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i : i + n])] += 1
    return counts


@dataclass
class NGramStats:
    """Document frequencies over a reference corpus (one document per reference set)."""

    document_frequency: Counter
    corpus_size: int
    n_max: int = 4

    @classmethod
    def from_references(cls, reference_sets: Iterable[Sequence[str | Sequence[str]]], n_max: int = 4) -> NGramStats:
        df = Counter()
        size = 0
        for refs in reference_sets:
            seen = set()
            for ref in refs:
                seen.update(ngram_counts(_as_tokens(ref), n_max))
            df.update(seen)
            size += 1
        return cls(df, size, n_max)

    @property
    def log_corpus_size(self) -> float:
        return math.log(float(self.corpus_size)) if self.corpus_size > 0 else 0.0


def _tfidf(counts: Counter, stats: NGramStats):
    vec = [dict() for _ in range(stats.n_max)]
    norm = [0.0] * stats.n_max
    log_n = stats.log_corpus_size
    for gram, tf in counts.items():
        n = len(gram) - 1
        df = math.log(max(1.0, stats.document_frequency.get(gram, 0.0)))
        w = tf * (log_n - df)
        vec[n][gram] = w
        norm[n] += w * w
    return vec, [math.sqrt(x) for x in norm]


def cider_d(
    candidate: str | Sequence[str],
    references: Sequence[str | Sequence[str]],
    stats: NGramStats,
    sigma: float = 6.0,
) -> float:
    cand = _as_tokens(candidate)
    if not cand or not references:
        return 0.0
    vec_c, norm_c = _tfidf(ngram_counts(cand, stats.n_max), stats)
    total = 0.0
    for ref in references:
        ref_tokens = _as_tokens(ref)
        vec_r, norm_r = _tfidf(ngram_counts(ref_tokens, stats.n_max), stats)
        delta = len(cand) - len(ref_tokens)
        penalty = math.exp(-(delta * delta) / (2 * sigma * sigma))
        per_n = 0.0
        for n in range(stats.n_max):
            val = sum(min(w, vec_r[n].get(g, 0.0)) * vec_r[n].get(g, 0.0) for g, w in vec_c[n].items())
            if norm_c[n] != 0 and norm_r[n] != 0:
                val /= norm_c[n] * norm_r[n]
            per_n += val * penalty
        total += per_n / stats.n_max
    return 10.0 * total / len(references)


class CiderD:
    """CIDEr-D scorer with document frequencies frozen from a reference corpus."""

    def __init__(self, reference_sets: Iterable[Sequence[str]], n_max: int = 4, sigma: float = 6.0):
        self.stats = NGramStats.from_references(reference_sets, n_max)
        self.sigma = sigma

    def __call__(self, candidate, references) -> float:
        return cider_d(candidate, references, self.stats, self.sigma)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str | Sequence[str], references: Sequence[str | Sequence[str]], beta: float = 1.2) -> float:
    cand = _as_tokens(candidate)
    if not cand:
        return 0.0
    best = 0.0
    for ref in references:
        ref = _as_tokens(ref)
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        f = (1 + beta**2) * p * r / (r + beta**2 * p)
        best = max(best, f)
    return best


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class ScoreReport:
    kinds: dict[str, dict[str, float]]  # metric -> kind -> mean score
    average: dict[str, float] = field(default_factory=dict)  # metric -> mean over the three kinds
    counts: dict[str, int] = field(default_factory=dict)  # kind -> number of boundaries

    def scaled(self, cider: float = 1.0, rouge: float = 1.0) -> ScoreReport:
        factor = {"CIDEr": cider, "ROUGE_L": rouge}
        return ScoreReport(
            {m: {k: v * factor[m] for k, v in ks.items()} for m, ks in self.kinds.items()},
            {m: v * factor[m] for m, v in self.average.items()},
            dict(self.counts),
        )

    def to_json(self) -> dict:
        return {"kinds": self.kinds, "average": self.average, "counts": self.counts}

    def format_table(self, digits: int = 2) -> str:
        kinds = [k for k in KINDS if any(k in self.kinds.get(m, {}) for m in METRICS)]
        header = f"{'metric':<8} {'Average':>9} " + " ".join(f"{k.capitalize():>9}" for k in kinds)
        lines = [header]
        for m in METRICS:
            if m not in self.kinds:
                continue
            avg = self.average.get(m)
            avg_s = f"{avg:>9.{digits}f}" if avg is not None else f"{'-':>9}"
            cells = " ".join(f"{self.kinds[m][k]:>9.{digits}f}" for k in kinds)
            lines.append(f"{m:<8} {avg_s} {cells}")
        return "\n".join(lines)


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def aggregate(scores: Mapping[str, Mapping[str, Sequence[float]]], require_all: bool = True) -> ScoreReport:
    """Mean per kind, then the plain mean of the three kind means per metric.

    ``scores`` maps metric -> kind -> per-boundary scores.
    """
    kinds: dict[str, dict[str, float]] = {}
    average: dict[str, float] = {}
    counts: dict[str, int] = {}
    for metric, by_kind in scores.items():
        kinds[metric] = {}
        for kind in KINDS:
            values = list(by_kind.get(kind, ()))
            if not values:
                if require_all:
                    raise ValueError(f"no {metric} scores for kind {kind!r}")
                continue
            kinds[metric][kind] = _mean(values)
            counts[kind] = len(values)
        if len(kinds[metric]) == len(KINDS):
            average[metric] = _mean([kinds[metric][k] for k in KINDS])
    return ScoreReport(kinds, average, counts)


def load_predictions(path: str | os.PathLike) -> list[dict]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read predictions {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: JSON parse error at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, list):
        raise DataError(f"{path}: predictions must be a JSON list")
    if not data:
        raise DataError(f"{path}: prediction file is empty")
    out = []
    for i, p in enumerate(data):
        try:
            kind = CaptionKind(p["kind"]).value
            out.append({
                "video_id": str(p["video_id"]),
                "boundary_index": int(p["boundary_index"]),
                "kind": kind,
                "caption": str(p["caption"]),
            })
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}[{i}]: malformed prediction ({exc!r})") from None
    return out


def score_predictions(
    predictions: str | os.PathLike | Sequence[dict],
    annotations: str | os.PathLike,
    kinds: Sequence[str] | None = None,
) -> ScoreReport:
    """Score a prediction list against an annotation file.

    Every annotated boundary of each evaluated kind must be predicted exactly
    once, and every prediction must name an annotated boundary.
    """
    preds = load_predictions(predictions) if isinstance(predictions, (str, os.PathLike)) else list(predictions)
    records = load_annotations(annotations)
    refs = {(r.video_id, i): triple for r in records for i, triple in enumerate(r.captions)}
    wanted = {CaptionKind.parse(k).value for k in kinds} if kinds else set(KINDS)
    preds = [p for p in preds if p["kind"] in wanted]
    if not preds:
        raise DataError("no predictions for the requested kind(s)")

    by_kind: dict[str, dict[tuple[str, int], str]] = defaultdict(dict)
    unknown, dup = [], []
    for p in preds:
        key = (p["video_id"], p["boundary_index"])
        if key not in refs:
            unknown.append(f"{p['kind']}:{key[0]}#{key[1]}")
        elif key in by_kind[p["kind"]]:
            dup.append(f"{p['kind']}:{key[0]}#{key[1]}")
        by_kind[p["kind"]][key] = p["caption"]
    missing = [
        f"{kind}:{key[0]}#{key[1]}"
        for kind in sorted(by_kind)
        for key in sorted(refs)
        if key not in by_kind[kind]
    ]
    problems = []
    if unknown:
        problems.append("predictions for unknown boundaries: " + ", ".join(sorted(unknown)))
    if dup:
        problems.append("duplicate predictions: " + ", ".join(sorted(dup)))
    if missing:
        problems.append("boundaries without a prediction: " + ", ".join(missing))
    if problems:
        raise DataError("; ".join(problems))

    scores: dict[str, dict[str, list[float]]] = {m: {} for m in METRICS}
    keys = sorted(refs)
    for kind, cands in sorted(by_kind.items()):
        references = {key: [refs[key].get(CaptionKind(kind))] for key in keys}
        scorer = CiderD(references[key] for key in keys)
        scores["CIDEr"][kind] = [scorer(cands[key], references[key]) for key in keys]
        scores["ROUGE_L"][kind] = [rouge_l(cands[key], references[key]) for key in keys]
    return aggregate(scores, require_all=False)
