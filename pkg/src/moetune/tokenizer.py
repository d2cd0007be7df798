"""Byte-level tokenizer: 256 byte symbols plus four control tokens."""

from __future__ import annotations

PAD, BOS, EOS, SEP = 256, 257, 258, 259
VOCAB_SIZE = 260
SPECIAL = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", SEP: "<sep>"}


def encode(text: str | bytes) -> list[int]:
    """Raw bytes of ``text`` (UTF-8), no framing."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def tokenize(text: str | bytes) -> list[int]:
    return [BOS] + encode(text) + [EOS]


def detokenize(ids) -> bytes:
    """Inverse of :func:`tokenize` on byte content; control tokens are dropped."""
    return bytes(i for i in ids if i < 256)


def decode_text(ids) -> str:
    return detokenize(ids).decode("utf-8", errors="replace")
