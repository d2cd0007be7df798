"""Instruction records, the synthetic four-dialect corpus, and target packing."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import BOS, EOS, PAD, SEP, encode

LABELS = ("Vulnerable", "Safe")
VULN_TYPES = ("reentrancy", "timestamp", "integer-overflow", "delegatecall", "other")
DIALECTS = VULN_TYPES[:4]

INSTRUCTION = "Audit {vtype}; vote of 5."


@dataclass
class InstructionExample:
    instruction: str
    code: str
    label: str
    vulnerability_type: str
    explanation: str
    id: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.vulnerability_type not in VULN_TYPES:
            raise ValueError(f"unknown vulnerability_type {self.vulnerability_type!r}")

    def validate_for_training(self) -> None:
        if not self.explanation.strip():
            raise ValueError(f"example {self.id}: empty explanation")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["id"] is None:
            del d["id"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionExample":
        fields = ("instruction", "code", "label", "vulnerability_type", "explanation")
        missing = [f for f in fields if f not in d]
        if missing:
            raise ValueError(f"record missing fields: {missing}")
        return cls(**{f: d[f] for f in fields}, id=d.get("id"))


def write_jsonl(path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            d = r.to_dict() if hasattr(r, "to_dict") else r
            fh.write(json.dumps(d, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
    return out


def load_examples(path) -> list[InstructionExample]:
    return [InstructionExample.from_dict(d) for d in read_jsonl(path)]


# ---------------------------------------------------------------- synthetic dialects

# Disjoint identifier pools per vulnerability family.
_NAMES = {
    "reentrancy": ["withdraw", "refund", "payout", "claim"],
    "timestamp": ["lottery", "auction", "deadline", "spin"],
    "integer-overflow": ["mint", "bonus", "multiply", "batch"],
    "delegatecall": ["proxy", "forward", "execute", "upgrade"],
}

_BODIES = {
    "reentrancy": (
        "msg.sender.call{{value:b[msg.sender]}}(\"\");b[msg.sender]=0;",
        "uint v=b[msg.sender];b[msg.sender]=0;msg.sender.transfer(v);",
    ),
    "timestamp": (
        "if(block.timestamp%{n}==0){{winner=msg.sender;}}",
        "require(block.number>start+{n});winner=pick();",
    ),
    "integer-overflow": (
        "total+=amount*{n};balances[to]+=amount;",
        "total=total.add(amount.mul({n}));",
    ),
    "delegatecall": (
        "target.delegatecall(msg.data);",
        "require(msg.sender==owner);target.delegatecall(msg.data);",
    ),
}

_EXPLAIN = {
    ("reentrancy", "Vulnerable"): "{fn} sends ether before zeroing the balance, so a caller can reenter.",
    ("reentrancy", "Safe"): "{fn} clears the balance before the transfer, blocking reentry.",
    ("timestamp", "Vulnerable"): "{fn} picks the winner from block.timestamp, which miners can skew.",
    ("timestamp", "Safe"): "{fn} gates on block.number, not the miner-set timestamp.",
    ("integer-overflow", "Vulnerable"): "{fn} adds and multiplies unchecked uints that can wrap.",
    ("integer-overflow", "Safe"): "{fn} uses checked add and mul, so values cannot wrap.",
    ("delegatecall", "Vulnerable"): "{fn} delegatecalls caller data with no owner check.",
    ("delegatecall", "Safe"): "{fn} checks the owner before delegatecall.",
}


def synth_example(vtype: str, vulnerable: bool, rng: np.random.Generator, idx: int = 0) -> InstructionExample:
    fn = _NAMES[vtype][int(rng.integers(len(_NAMES[vtype])))]
    n = int(rng.integers(2, 60))
    label = "Vulnerable" if vulnerable else "Safe"
    body = _BODIES[vtype][0 if vulnerable else 1].format(n=n)
    code = f"function {fn}{n}(){{{body}}}"
    return InstructionExample(
        instruction=INSTRUCTION.format(vtype=vtype),
        code=code,
        label=label,
        vulnerability_type=vtype,
        explanation=_EXPLAIN[(vtype, label)].format(fn=f"{fn}{n}"),
        id=f"{vtype}-{idx:05d}",
    )


def synth_dataset(n: int, seed: int = 0, types: Sequence[str] = DIALECTS,
                  vulnerable_fraction: float = 0.5) -> list[InstructionExample]:
    """``n`` examples cycling through ``types``; labels drawn per example."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        vtype = types[i % len(types)]
        out.append(synth_example(vtype, bool(rng.random() < vulnerable_fraction), rng, i))
    return out


def synth_corpus(n: int, seed: int = 0) -> list[str]:
    """Commented contract text for continual pre-training.

    Each document is code followed by audit-style comments, so the byte
    symbols of the answer format are seen before the frozen stage.
    """
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n):
        ex = synth_example(DIALECTS[i % 4], bool(rng.random() < 0.5), rng, i)
        docs.append(f"{ex.instruction}\n{ex.code}\n// {label_line(ex.label)}\n// {ex.explanation}")
    return docs


# ---------------------------------------------------------------- packing


class SpanTag(enum.IntEnum):
    PROMPT = 0
    DETECTION = 1
    EXPLANATION = 2
    PADDING = 3


def render_prompt(ex: InstructionExample) -> str:
    return f"{ex.instruction}\n{ex.code}"


def label_line(label: str) -> str:
    return f"LABEL: {label}"


def prompt_tokens(ex: InstructionExample, cutoff: int | None = None, reserve: int = 0) -> list[int]:
    """[BOS] prompt [SEP]; code bytes are trimmed so ``reserve`` target tokens still fit."""
    head = encode(ex.instruction + "\n")
    code = encode(ex.code)
    if cutoff is not None:
        room = cutoff - reserve - len(head) - 2
        if room < 0:
            raise ValueError("cutoff too small for instruction and target")
        code = code[:room]
    return [BOS] + head + code + [SEP]


def pack_example(ex: InstructionExample, cutoff: int | None = None) -> tuple[list[int], list[int]]:
    """Token ids and per-position span tags for one supervised record."""
    det = encode(label_line(ex.label))
    expl = [SEP] + encode(ex.explanation) + [EOS]
    prompt = prompt_tokens(ex, cutoff, reserve=len(det) + len(expl))
    ids = prompt + det + expl
    tags = [SpanTag.PROMPT] * len(prompt) + [SpanTag.DETECTION] * len(det) + [SpanTag.EXPLANATION] * len(expl)
    return ids, [int(t) for t in tags]


@dataclass
class SpanLabeledBatch:
    tokens: np.ndarray  # [B, L] int
    tags: np.ndarray  # [B, L] SpanTag values, aligned with tokens

    def __post_init__(self):
        if self.tokens.shape != self.tags.shape:
            raise ValueError("tokens and tags must align")

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]

    @property
    def target_tags(self) -> np.ndarray:
        return self.tags[:, 1:]

    @property
    def detection_mask(self) -> np.ndarray:
        return self.target_tags == SpanTag.DETECTION

    @property
    def explanation_mask(self) -> np.ndarray:
        return self.target_tags == SpanTag.EXPLANATION

    @property
    def loss_mask(self) -> np.ndarray:
        return self.detection_mask | self.explanation_mask

    @property
    def token_mask(self) -> np.ndarray:
        """Non-padding target positions (the next-token objective's mask)."""
        return self.target_tags != SpanTag.PADDING

    @property
    def input_mask(self) -> np.ndarray:
        return self.tags[:, :-1] != SpanTag.PADDING

    def __len__(self) -> int:
        return self.tokens.shape[0]


def collate(seqs: Sequence[tuple[list[int], list[int]]]) -> SpanLabeledBatch:
    L = max(len(ids) for ids, _ in seqs)
    tokens = np.full((len(seqs), L), PAD, dtype=np.int64)
    tags = np.full((len(seqs), L), int(SpanTag.PADDING), dtype=np.int8)
    for i, (ids, tg) in enumerate(seqs):
        tokens[i, : len(ids)] = ids
        tags[i, : len(tg)] = tg
    return SpanLabeledBatch(tokens, tags)


def pack_batch(examples: Sequence[InstructionExample], cutoff: int | None = None) -> SpanLabeledBatch:
    return collate([pack_example(ex, cutoff) for ex in examples])


def pack_text_batch(docs: Sequence[str], cutoff: int) -> SpanLabeledBatch:
    """Plain next-token batches: every non-padding token is tagged PROMPT."""
    seqs = []
    for doc in docs:
        ids = ([BOS] + encode(doc) + [EOS])[:cutoff]
        seqs.append((ids, [int(SpanTag.PROMPT)] * len(ids)))
    return collate(seqs)
