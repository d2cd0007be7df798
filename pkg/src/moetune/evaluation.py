"""Detection scoring, answer parsing and voting, inter-rater agreement, and
Likert aggregation for human explanation ratings."""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import read_jsonl

VULNERABLE, SAFE, UNPARSEABLE = "Vulnerable", "Safe", "Unparseable"
DIMENSIONS = ("correctness", "completeness", "conciseness")
LIKERT_SCORES = (1, 2, 3, 4)

_LABEL_LINE = re.compile(r"^\s*label\s*:\s*(vulnerable|safe)\b", re.IGNORECASE)
_KEYWORD = re.compile(r"vulnerable|safe", re.IGNORECASE)


class KappaUndefinedError(ValueError):
    """Both raters used one identical category, so chance agreement is 1."""


# ---------------------------------------------------------------- parsing and voting


def parse_label(text: str) -> str:
    """Label from a model answer.

    A ``LABEL: ...`` line wins; otherwise the first of "vulnerable"/"safe"
    to appear anywhere decides; otherwise the answer is unparseable.
    """
    for line in text.splitlines():
        m = _LABEL_LINE.match(line)
        if m:
            return VULNERABLE if m.group(1).lower() == "vulnerable" else SAFE
    m = _KEYWORD.search(text)
    if m is None:
        return UNPARSEABLE
    return VULNERABLE if m.group(0).lower() == "vulnerable" else SAFE


def majority_vote(labels: Sequence[str]) -> str:
    """Most frequent label; a tie that involves Vulnerable resolves to it."""
    if not labels:
        raise ValueError("majority_vote needs at least one label")
    tally = Counter(labels)
    best = max(tally.values())
    leaders = {lab for lab, c in tally.items() if c == best}
    for lab in (VULNERABLE, SAFE, UNPARSEABLE):
        if lab in leaders:
            return lab
    return min(leaders)


def _explanation(text: str) -> str:
    lines = [ln for ln in text.splitlines() if not _LABEL_LINE.match(ln)]
    body = "\n".join(lines).strip()
    return re.sub(r"^explanation\s*:\s*", "", body, flags=re.IGNORECASE)


@dataclass
class Prediction:
    label: str
    explanation: str
    samples: list[str]
    tally: dict[str, int]

    @classmethod
    def from_samples(cls, samples: Sequence[str]) -> "Prediction":
        parsed = [parse_label(s) for s in samples]
        label = majority_vote(parsed)
        # explanation comes from the first sample that agrees with the vote
        expl = next((_explanation(s) for s, p in zip(samples, parsed) if p == label), "")
        return cls(label, expl, list(samples), dict(Counter(parsed)))


# ---------------------------------------------------------------- detection metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class DetectionMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    # names of metrics whose denominator was zero and were set to 0
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = asdict(self.counts)
        return d


def confusion_counts(predictions: Sequence[str], gold: Sequence[str]) -> ConfusionCounts:
    """Vulnerable is positive. Unparseable is wrong for either gold label."""
    if len(predictions) != len(gold):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(gold)} gold labels")
    tp = fp = tn = fn = 0
    for p, g in zip(predictions, gold):
        if g not in (VULNERABLE, SAFE):
            raise ValueError(f"gold label must be Vulnerable or Safe, got {g!r}")
        if g == VULNERABLE:
            if p == VULNERABLE:
                tp += 1
            else:
                fn += 1
        elif p == SAFE:
            tn += 1
        else:
            fp += 1
    return ConfusionCounts(tp, fp, tn, fn)


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def metrics_from_counts(c: ConfusionCounts) -> DetectionMetrics:
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    acc = ratio(c.tp + c.tn, c.total, "accuracy")
    prec = ratio(c.tp, c.tp + c.fp, "precision")
    rec = ratio(c.tp, c.tp + c.fn, "recall")
    if prec + rec == 0:
        undefined.append("f1")
    return DetectionMetrics(acc, prec, rec, f1_score(prec, rec), c, undefined)


def detection_metrics(predictions: Sequence[str], gold: Sequence[str]) -> DetectionMetrics:
    return metrics_from_counts(confusion_counts(predictions, gold))


# ---------------------------------------------------------------- agreement


@dataclass
class KappaResult:
    kappa: float
    p_observed: float
    p_expected: float
    table: np.ndarray
    n: int
    categories: list

    @property
    def band(self) -> str:
        if self.kappa >= 0.75:
            return "strong"
        if self.kappa >= 0.4:
            return "medium"
        return "weak"

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "p_observed": self.p_observed, "p_expected": self.p_expected,
                "table": self.table.tolist(), "n": self.n, "categories": list(self.categories),
                "band": self.band}


def kappa_from_table(table, categories=None) -> KappaResult:
    """Cohen's kappa from a square contingency table (rows: rater A)."""
    t = np.asarray(table, dtype=np.int64)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValueError("contingency table must be square")
    if (t < 0).any():
        raise ValueError("contingency counts must be non-negative")
    n = int(t.sum())
    if n == 0:
        raise ValueError("no ratings")
    agree = int(np.trace(t))
    chance = int(t.sum(axis=1) @ t.sum(axis=0))  # n^2 * P_e
    if chance == n * n:
        raise KappaUndefinedError("kappa undefined: expected agreement is 1 (both raters constant)")
    cats = list(categories) if categories is not None else list(range(t.shape[0]))
    # integer form of (P_o - P_e) / (1 - P_e) avoids rounding on exact tables
    kappa = (agree * n - chance) / (n * n - chance)
    return KappaResult(kappa, agree / n, chance / (n * n), t, n, cats)


def cohen_kappa(ratings_a: Sequence, ratings_b: Sequence, categories: Sequence | None = None) -> KappaResult:
    if len(ratings_a) != len(ratings_b):
        raise ValueError("raters must score the same items")
    if categories is None:
        categories = sorted(set(ratings_a) | set(ratings_b))
    pos = {c: i for i, c in enumerate(categories)}
    table = np.zeros((len(pos), len(pos)), dtype=np.int64)
    for a, b in zip(ratings_a, ratings_b):
        if a not in pos or b not in pos:
            raise ValueError(f"rating outside categories: {a!r}, {b!r}")
        table[pos[a], pos[b]] += 1
    return kappa_from_table(table, categories)


# ---------------------------------------------------------------- Likert ratings


@dataclass(frozen=True)
class RatingRecord:
    item_id: str
    rater_id: str
    dimension: str
    score: int

    def __post_init__(self):
        if self.dimension not in DIMENSIONS:
            raise ValueError(f"unknown dimension {self.dimension!r}")
        if self.score not in LIKERT_SCORES:
            raise ValueError(f"score must be 1-4, got {self.score!r}")


@dataclass
class LikertOutcome:
    item_id: str
    dimension: str
    final: int
    divergent: bool
    # which rules fired: "polarity" (1-2 vs 3-4), "gap" (more than one point apart)
    rules: list[str]
    scores: dict[str, int]


def _polarity(score: int) -> bool:
    return score >= 3


def likert_aggregate(records: Iterable[RatingRecord], raters: Sequence[str] | None = None
                     ) -> tuple[list[LikertOutcome], list[dict]]:
    """Floor-of-mean score per (item, dimension) and the third-rater queue."""
    groups: dict[tuple[str, str], dict[str, int]] = {}
    for r in records:
        slot = groups.setdefault((r.item_id, r.dimension), {})
        if r.rater_id in slot:
            raise ValueError(f"duplicate rating by {r.rater_id} for {r.item_id}/{r.dimension}")
        slot[r.rater_id] = r.score
    outcomes, queue = [], []
    for (item, dim), scores in sorted(groups.items()):
        if raters is not None:
            missing = [x for x in raters if x not in scores]
            if missing:
                raise ValueError(f"{item}/{dim}: missing rater(s) {missing}")
        if len(scores) < 2:
            raise ValueError(f"{item}/{dim}: needs at least two raters")
        vals = list(scores.values())
        rules = []
        if len({_polarity(v) for v in vals}) > 1:
            rules.append("polarity")
        if max(vals) - min(vals) > 1:
            rules.append("gap")
        final = math.floor(sum(vals) / len(vals))
        out = LikertOutcome(item, dim, final, bool(rules), rules, dict(sorted(scores.items())))
        outcomes.append(out)
        if out.divergent:
            queue.append({"item_id": item, "dimension": dim, "scores": out.scores,
                          "rules": rules, "resolution": None})
    return outcomes, queue


@dataclass
class RatingDistribution:
    counts: dict[str, list[int]]  # dimension -> counts for scores 1..4

    def positive_rate(self, dimension: str) -> float:
        c = self.counts[dimension]
        total = sum(c)
        return (c[2] + c[3]) / total if total else 0.0

    def to_dict(self) -> dict:
        return {d: {"counts": c, "total": sum(c), "positive_rate": self.positive_rate(d)}
                for d, c in self.counts.items()}


def rating_distribution(records: Iterable[RatingRecord] | Mapping[str, Sequence[int]]) -> RatingDistribution:
    """Counts per score per dimension. Also accepts precomputed {dimension: counts}."""
    if isinstance(records, Mapping):
        counts = {}
        for dim, c in records.items():
            c = [int(x) for x in c]
            if len(c) != 4 or min(c) < 0:
                raise ValueError(f"{dim}: need four non-negative counts")
            counts[dim] = c
        return RatingDistribution(counts)
    counts = {d: [0, 0, 0, 0] for d in DIMENSIONS}
    for r in records:
        counts[r.dimension][r.score - 1] += 1
    return RatingDistribution(counts)


# ---------------------------------------------------------------- file formats


def read_ratings_csv(path) -> list[RatingRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"item_id", "rater_id", "dimension", "score"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: ratings CSV needs columns {sorted(need)}")
        for row in reader:
            out.append(RatingRecord(row["item_id"], row["rater_id"], row["dimension"], int(row["score"])))
    return out


def load_predictions(path) -> tuple[list[str], list[Prediction], list[str]]:
    """(ids, predictions, gold) from JSONL rows {id, gold_label, samples}."""
    ids, preds, gold = [], [], []
    for n, row in enumerate(read_jsonl(path), 1):
        for key in ("id", "gold_label", "samples"):
            if key not in row:
                raise ValueError(f"{path}:{n}: missing {key!r}")
        if not row["samples"]:
            raise ValueError(f"{path}:{n}: empty samples")
        ids.append(str(row["id"]))
        preds.append(Prediction.from_samples(row["samples"]))
        gold.append(row["gold_label"])
    return ids, preds, gold


def evaluation_report(ids: Sequence[str], preds: Sequence[Prediction], gold: Sequence[str]) -> dict:
    m = detection_metrics([p.label for p in preds], gold)
    wrong = [i for i, p, g in zip(ids, preds, gold) if p.label != g]
    return {"metrics": m.to_dict(), "misclassified": wrong,
            "tallies": {i: p.tally for i, p in zip(ids, preds)}}
