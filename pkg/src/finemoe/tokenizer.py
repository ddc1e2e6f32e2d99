"""Byte-level tokenizer: ids 0..255 are raw bytes, plus two specials.

SEP marks document boundaries inside packed sequences; IMG is the
placeholder id occupying visual positions (the decoder swaps in encoder
outputs there, so IMG never needs an embedding of its own, but it keeps
the vocabulary closed).
"""

from __future__ import annotations

import numpy as np


class ByteTokenizer:
    SEP = 256
    IMG = 257
    vocab_size = 258

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        data = bytes(int(i) for i in np.asarray(ids).reshape(-1)
                     if 0 <= int(i) < 256)
        return data.decode("utf-8", errors="replace")

    def token_count(self, text: str) -> int:
        return len(text.encode("utf-8"))
