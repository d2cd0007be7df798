"""Answering audit prompts with a trained model under the n-vote protocol."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .data import InstructionExample, prompt_tokens
from .evaluation import Prediction
from .model import DenseTransformer, generate
from .tokenizer import EOS, SEP, decode_text


def answer_text(tokens: Sequence[int]) -> str:
    """Render generated ids as "LABEL: ...\\nEXPLANATION: ..." text."""
    ids = list(tokens)
    if EOS in ids:
        ids = ids[:ids.index(EOS)]
    if SEP in ids:
        cut = ids.index(SEP)
        head, tail = ids[:cut], [t for t in ids[cut + 1:] if t != SEP]
        return f"{decode_text(head)}\nEXPLANATION: {decode_text(tail)}"
    return decode_text(ids)


@dataclass
class InferenceRecord:
    id: str
    gold_label: str
    samples: list[str]

    def to_dict(self) -> dict:
        return {"id": self.id, "gold_label": self.gold_label, "samples": self.samples}


def infer(model: DenseTransformer, examples: Sequence[InstructionExample], n_votes: int = 5,
          max_new_tokens: int = 96, temperature: float = 0.0, seed: int = 0) -> list[InferenceRecord]:
    out = []
    for i, ex in enumerate(examples):
        prompt = prompt_tokens(ex, cutoff=model.config.max_seq_len, reserve=max_new_tokens)
        gens = generate(model, prompt, max_new_tokens, n_votes=n_votes, eos_id=EOS,
                        temperature=temperature, seed=seed + i)
        out.append(InferenceRecord(ex.id or str(i), ex.label, [answer_text(g.tokens) for g in gens]))
    return out


def predictions(records: Sequence[InferenceRecord]) -> list[Prediction]:
    return [Prediction.from_samples(r.samples) for r in records]
