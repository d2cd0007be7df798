"""Explanation dataset construction: two generators draft, a judge filters,
and a per-type reviewer group verifies, refines or escalates to consensus.

Model clients are small protocols so hosted models, scripted mocks and
filesystem replays are interchangeable.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .data import LABELS, VULN_TYPES, InstructionExample, INSTRUCTION, read_jsonl, write_jsonl

SOURCES = ("generator-A", "generator-B")
VERDICTS = ("accept", "needs-refinement", "reject")
JUDGE_THRESHOLD = 6.0
AUDIT_SCHEMA_VERSION = 1
TERMINAL = ("verified", "judged-out", "rejected")

# Label-guided drafting prompts, one per vulnerability family.
TEMPLATES = {
    "reentrancy": (
        "The contract below is labeled {label} for reentrancy. Explain why. Check the order of "
        "external calls relative to state updates: does any external call or ether transfer happen "
        "before balances are written?\n{code}"
    ),
    "timestamp": (
        "The contract below is labeled {label} for timestamp dependency. Explain why. Identify every "
        "use of block.timestamp or now and whether a miner could profit by shifting it.\n{code}"
    ),
    "integer-overflow": (
        "The contract below is labeled {label} for integer overflow/underflow. Explain why. Trace "
        "each arithmetic operation on unsigned integers and whether it is range-checked.\n{code}"
    ),
    "delegatecall": (
        "The contract below is labeled {label} for delegatecall misuse. Explain why. Determine who "
        "controls the delegatecall target and data, and what storage it can overwrite.\n{code}"
    ),
    "other": "The contract below is labeled {label}. Explain the security-relevant behavior.\n{code}",
}

JUDGE_TEMPLATE = (
    "Rate the explanation of a {vtype} finding for correctness, completeness and conciseness, "
    "each from 1 to 10.\nCode:\n{code}\nExplanation:\n{text}"
)


def render_prompt(code: str, vtype: str, label: str = "Vulnerable") -> str:
    if vtype not in TEMPLATES:
        raise ValueError(f"no template for vulnerability type {vtype!r}")
    return TEMPLATES[vtype].format(label=label, code=code)


# ---------------------------------------------------------------- records


@dataclass
class ExplanationCandidate:
    source: str
    code_ref: str
    vulnerability_type: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("empty explanation")


@dataclass
class QualityScore:
    correctness: int
    completeness: int
    conciseness: int
    overall: float | None = None
    rationale: str = ""

    def __post_init__(self):
        for name in ("correctness", "completeness", "conciseness"):
            v = getattr(self, name)
            if not (isinstance(v, int) and 1 <= v <= 10):
                raise ValueError(f"{name} must be an integer in [1, 10], got {v!r}")
        if self.overall is None:
            self.overall = (self.correctness + self.completeness + self.conciseness) / 3


@dataclass
class Review:
    reviewer: str
    verdict: str
    feedback: str = ""

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")


@dataclass
class Consensus:
    verdict: str
    text: str | None = None  # edited explanation agreed by the group
    note: str = ""

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")


@dataclass
class ReviewOutcome:
    status: str  # verified | rejected | pending
    reviews: list[Review]
    text: str | None = None
    refined_text: str | None = None
    consensus: Consensus | None = None

    @property
    def trail(self) -> list[dict]:
        out = [{"step": "review", **asdict(r)} for r in self.reviews]
        if self.consensus is not None:
            out.append({"step": "consensus", **asdict(self.consensus)})
        if self.refined_text is not None:
            out.append({"step": "refine", "text": self.refined_text})
        return out


# ---------------------------------------------------------------- client protocols


class GeneratorClient(Protocol):
    def generate(self, prompt: str) -> str: ...


class JudgeClient(Protocol):
    def score(self, prompt: str, candidate: ExplanationCandidate) -> QualityScore: ...


class ReviewerClient(Protocol):
    name: str

    def review(self, candidate: ExplanationCandidate, code: str) -> Review: ...


class RefinerClient(Protocol):
    def refine(self, text: str, reviews: Sequence[Review]) -> str: ...


class ConsensusClient(Protocol):
    def resolve(self, candidate: ExplanationCandidate, reviews: Sequence[Review]) -> Consensus | None: ...


@dataclass
class ReviewerGroup:
    reviewers: tuple
    refiner: RefinerClient
    consensus: ConsensusClient | None = None

    def __post_init__(self):
        if len(self.reviewers) != 2:
            raise ValueError("a reviewer group has exactly two reviewers")


@dataclass
class Clients:
    generators: tuple  # (generator-A, generator-B)
    judge: JudgeClient
    groups: Mapping[str, ReviewerGroup]  # vulnerability type -> reviewer group

    def group_for(self, vtype: str) -> ReviewerGroup:
        if vtype in self.groups:
            return self.groups[vtype]
        if "*" in self.groups:
            return self.groups["*"]
        raise KeyError(f"no reviewer group for {vtype!r}")


# ---------------------------------------------------------------- mock clients


class ClientError(RuntimeError):
    pass


class ScriptedGenerator:
    """Returns ``fn(prompt)``; by default a short text echoing the prompt's first line."""

    def __init__(self, fn: Callable[[str], str] | None = None, fail: bool = False, tag: str = "draft"):
        self.fn = fn
        self.fail = fail
        self.tag = tag
        self.calls = 0

    def generate(self, prompt: str) -> str:
        self.calls += 1
        if self.fail:
            raise ClientError("generator unavailable")
        if self.fn is not None:
            return self.fn(prompt)
        return f"[{self.tag}] {prompt.splitlines()[0]}"


class ScriptedJudge:
    """Scores by candidate source; ``scores`` maps source -> overall or QualityScore."""

    def __init__(self, scores: Mapping[str, float | QualityScore] | Callable | None = None,
                 default: float = 8, fail: bool = False):
        self.scores = scores or {}
        self.default = default
        self.fail = fail

    def score(self, prompt: str, candidate: ExplanationCandidate) -> QualityScore:
        if self.fail:
            raise ClientError("judge unavailable")
        if callable(self.scores):
            s = self.scores(candidate)
        else:
            s = self.scores.get(candidate.source, self.default)
        if isinstance(s, QualityScore):
            return s
        v = int(round(s))
        return QualityScore(v, v, v, overall=float(s), rationale="scripted")


class ScriptedReviewer:
    def __init__(self, name: str, verdict: str | Callable = "accept", feedback: str = ""):
        self.name = name
        self.verdict = verdict
        self.feedback = feedback

    def review(self, candidate: ExplanationCandidate, code: str) -> Review:
        v = self.verdict(candidate) if callable(self.verdict) else self.verdict
        return Review(self.name, v, self.feedback)


class ScriptedRefiner:
    def __init__(self, fn: Callable[[str, Sequence[Review]], str] | None = None):
        self.fn = fn

    def refine(self, text: str, reviews: Sequence[Review]) -> str:
        if self.fn is not None:
            return self.fn(text, reviews)
        notes = "; ".join(r.feedback for r in reviews if r.feedback)
        return f"{text} ({notes})" if notes else text


class ScriptedConsensus:
    """Always returns ``result`` (None leaves the item pending)."""

    def __init__(self, result: Consensus | Callable | None = None):
        self.result = result

    def resolve(self, candidate, reviews):
        return self.result(candidate, reviews) if callable(self.result) else self.result


class ReplayGenerator:
    """Serves responses stored as ``<sha256(prompt)>.txt`` under ``root``.

    With ``record`` set, misses are forwarded to that client and saved.
    """

    def __init__(self, root, record: GeneratorClient | None = None):
        self.root = Path(root)
        self.record = record

    def _path(self, prompt: str) -> Path:
        return self.root / (hashlib.sha256(prompt.encode("utf-8")).hexdigest() + ".txt")

    def generate(self, prompt: str) -> str:
        p = self._path(prompt)
        if p.exists():
            return p.read_text(encoding="utf-8")
        if self.record is None:
            raise ClientError(f"no recorded response for prompt {p.stem[:12]}")
        text = self.record.generate(prompt)
        self.root.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        return text


# ---------------------------------------------------------------- stages


@dataclass
class GenerationResult:
    candidates: list[ExplanationCandidate]
    failures: list[dict]
    prompt: str


def generate_explanations(code: str, vtype: str, generators: Sequence[GeneratorClient],
                          code_ref: str = "", label: str = "Vulnerable") -> GenerationResult:
    if len(generators) != 2:
        raise ValueError("exactly two generator clients are required")
    prompt = render_prompt(code, vtype, label)
    cands, failures = [], []
    for source, client in zip(SOURCES, generators):
        try:
            text = client.generate(prompt)
            cands.append(ExplanationCandidate(source, code_ref, vtype, text))
        except Exception as exc:  # any client fault becomes a failure record
            failures.append({"source": source, "error": f"{type(exc).__name__}: {exc}"})
    return GenerationResult(cands, failures, prompt)


@dataclass
class Judgement:
    best: ExplanationCandidate | None
    scores: dict[str, QualityScore]


def evaluate_explanations(candidates: Sequence[ExplanationCandidate], judge: JudgeClient, code: str = "",
                          threshold: float = JUDGE_THRESHOLD) -> Judgement:
    """Best candidate if its overall score reaches ``threshold``; ties favor generator-A."""
    scores = {}
    best, best_score = None, None
    for c in candidates:
        s = judge.score(JUDGE_TEMPLATE.format(vtype=c.vulnerability_type, code=code, text=c.text), c)
        scores[c.source] = s
        if best_score is None or s.overall > best_score:
            best, best_score = c, s.overall
    if best is None or best_score < threshold:
        return Judgement(None, scores)
    return Judgement(best, scores)


def expert_verification(candidate: ExplanationCandidate, group: ReviewerGroup, code: str = "") -> ReviewOutcome:
    """Two reviews; agreement proceeds, disagreement needs a consensus record.

    Accept and needs-refinement both keep the item, so only keep-vs-reject
    counts as disagreement. Any needs-refinement verdict sends the text to
    the refiner.
    """
    reviews = [r.review(candidate, code) for r in group.reviewers]
    verdicts = {r.verdict for r in reviews}
    keep = {v != "reject" for v in verdicts}
    consensus = None
    if len(keep) > 1:
        if group.consensus is None:
            return ReviewOutcome("pending", reviews)
        consensus = group.consensus.resolve(candidate, reviews)
        if consensus is None:
            return ReviewOutcome("pending", reviews)
        final = consensus.verdict
    elif keep == {False}:
        final = "reject"
    else:
        final = "needs-refinement" if "needs-refinement" in verdicts else "accept"
    if final == "reject":
        return ReviewOutcome("rejected", reviews, consensus=consensus)
    text = consensus.text if consensus is not None and consensus.text else candidate.text
    refined = None
    if final == "needs-refinement":
        refined = group.refiner.refine(text, reviews)
        text = refined
    return ReviewOutcome("verified", reviews, text=text, refined_text=refined, consensus=consensus)


# ---------------------------------------------------------------- pipeline


@dataclass
class PipelineReport:
    items: int = 0
    candidates: int = 0
    generation_failures: int = 0
    best: int = 0
    judged_out: int = 0
    verified: int = 0
    rejected: int = 0
    pending: int = 0
    failed: int = 0
    resumed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _item_fields(item: Mapping) -> tuple[str, str, str, str]:
    for key in ("id", "code", "vulnerability_type"):
        if key not in item:
            raise ValueError(f"annotation input missing {key!r}")
    vtype = item["vulnerability_type"]
    if vtype not in VULN_TYPES:
        raise ValueError(f"unknown vulnerability_type {vtype!r}")
    label = item.get("label", "Vulnerable")
    if label not in LABELS:
        raise ValueError(f"label must be one of {LABELS}")
    return str(item["id"]), item["code"], vtype, label


def process_item(item: Mapping, clients: Clients) -> dict:
    """Full audit record for one input item."""
    item_id, code, vtype, label = _item_fields(item)
    audit = {"schema_version": AUDIT_SCHEMA_VERSION, "id": item_id, "vulnerability_type": vtype,
             "label": label, "generation": [], "judge": None, "review": [], "status": None,
             "explanation": None, "error": None}
    gen = generate_explanations(code, vtype, clients.generators, code_ref=item_id, label=label)
    by_source = {c.source: c for c in gen.candidates}
    fails = {f["source"]: f["error"] for f in gen.failures}
    for s in SOURCES:
        rec = {"source": s, "ok": s in by_source}
        rec["text" if s in by_source else "error"] = by_source[s].text if s in by_source else fails[s]
        audit["generation"].append(rec)
    if not gen.candidates:
        audit.update(status="failed", error="all generators failed")
        return audit
    try:
        judged = evaluate_explanations(gen.candidates, clients.judge, code)
    except Exception as exc:
        audit.update(status="failed", error=f"judge: {type(exc).__name__}: {exc}")
        return audit
    audit["judge"] = {
        "threshold": JUDGE_THRESHOLD,
        "scores": {s: asdict(q) for s, q in judged.scores.items()},
        "selected": judged.best.source if judged.best else None,
    }
    if judged.best is None:
        audit["status"] = "judged-out"
        return audit
    outcome = expert_verification(judged.best, clients.group_for(vtype), code)
    audit["review"] = outcome.trail
    audit["status"] = outcome.status
    audit["explanation"] = outcome.text
    return audit


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def to_example(audit: dict, code: str) -> InstructionExample:
    return InstructionExample(
        instruction=INSTRUCTION.format(vtype=audit["vulnerability_type"]),
        code=code,
        label=audit["label"],
        vulnerability_type=audit["vulnerability_type"],
        explanation=audit["explanation"],
        id=audit["id"],
    )


def run_pipeline(items: Iterable[Mapping], clients: Clients, out_dir) -> tuple[list[InstructionExample], PipelineReport]:
    """Process every item, reusing finished audit files from earlier runs.

    Writes ``audit/<id>.json`` per item, ``dataset.jsonl`` and ``report.json``.
    """
    out = Path(out_dir)
    audit_dir = out / "audit"
    audit_dir.mkdir(parents=True, exist_ok=True)
    report = PipelineReport()
    examples = []
    seen = set()
    for item in items:
        item_id, code, _, _ = _item_fields(item)
        if item_id in seen:
            raise ValueError(f"duplicate item id {item_id!r}")
        seen.add(item_id)
        path = audit_dir / f"{item_id}.json"
        audit = None
        if path.exists():
            prev = json.loads(path.read_text(encoding="utf-8"))
            if prev.get("status") in TERMINAL:
                audit = prev
                report.resumed += 1
        if audit is None:
            audit = process_item(item, clients)
            _write_json_atomic(path, audit)
        report.items += 1
        report.candidates += sum(g["ok"] for g in audit["generation"])
        report.generation_failures += sum(not g["ok"] for g in audit["generation"])
        status = audit["status"]
        if audit["judge"] is not None and audit["judge"]["selected"] is not None:
            report.best += 1
        if status == "judged-out":
            report.judged_out += 1
        elif status == "verified":
            report.verified += 1
            examples.append(to_example(audit, code))
        elif status == "rejected":
            report.rejected += 1
        elif status == "pending":
            report.pending += 1
        else:
            report.failed += 1
    write_jsonl(out / "dataset.jsonl", examples)
    _write_json_atomic(out / "report.json", report.to_dict())
    return examples, report


def load_items(path) -> list[dict]:
    return read_jsonl(path)


def validate_audit(audit: dict) -> None:
    """Raise jsonschema.ValidationError if ``audit`` breaks the shipped schema."""
    import jsonschema

    from .analytics import load_schema

    jsonschema.validate(audit, load_schema("audit_trail.schema.json"))


# ---------------------------------------------------------------- config


def build_clients(cfg: Mapping) -> Clients:
    """Clients from a plain mapping. ``mode`` is "scripted" or "replay".

    scripted keys: judge_scores {generator-A: x, generator-B: y}, verdicts [a, b],
    consensus {verdict, text} or null.
    replay keys: replay_dir with subfolders generator-A/ and generator-B/.
    """
    mode = cfg.get("mode", "scripted")
    if mode == "scripted":
        gens = (ScriptedGenerator(tag="A"), ScriptedGenerator(tag="B"))
    elif mode == "replay":
        root = Path(cfg["replay_dir"])
        gens = (ReplayGenerator(root / SOURCES[0]), ReplayGenerator(root / SOURCES[1]))
    else:
        raise ValueError(f"unsupported annotation client mode {mode!r}; live endpoints are not bundled")
    judge = ScriptedJudge(cfg.get("judge_scores"), default=cfg.get("judge_default", 8))
    verdicts = cfg.get("verdicts", ["accept", "accept"])
    cons = cfg.get("consensus")
    group = ReviewerGroup(
        (ScriptedReviewer("reviewer-1", verdicts[0]), ScriptedReviewer("reviewer-2", verdicts[1])),
        ScriptedRefiner(),
        ScriptedConsensus(Consensus(**cons) if cons else None),
    )
    return Clients(gens, judge, {"*": group})
