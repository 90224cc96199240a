"""Byte-level toy vocabulary: 256 byte ids plus BOS/EOS/PAD."""

from __future__ import annotations

import numpy as np

from .tensor import ContractError

BOS = 256
EOS = 257
PAD = 258
VOCAB = 259


def tokenize(text: str | bytes) -> np.ndarray:
    """BOS + raw bytes + EOS."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.array([BOS, *data, EOS], dtype=np.int64)


def detokenize(ids) -> bytes:
    """Bytes back out; BOS/EOS/PAD are dropped."""
    out = bytearray()
    for i in np.asarray(ids).reshape(-1):
        i = int(i)
        if i >= VOCAB or i < 0:
            raise ContractError(f"token id {i} outside vocabulary of {VOCAB}")
        if i < 256:
            out.append(i)
    return bytes(out)
