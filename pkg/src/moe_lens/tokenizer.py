"""Pluggable tokenization. The default is byte-level: ids 0-255 are raw
bytes, plus BOS=256, EOS=257, PAD=258. An optional vocabulary file enables
greedy longest-match segmentation on top of the byte fallback."""

from __future__ import annotations

import json
from typing import Iterable

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
BYTE_VOCAB_SIZE = 259


class ByteTokenizer:
    """Byte-level tokenizer with optional greedy longest-match merges.

    Extra vocabulary entries (strings) get ids starting at 259, in file
    order; unmatched text falls back to raw bytes.
    """

    bos_id = BOS_ID
    eos_id = EOS_ID
    pad_id = PAD_ID

    def __init__(self, vocab: Iterable[str] = ()):
        self._pieces = list(vocab)
        self._piece_ids = {p: BYTE_VOCAB_SIZE + i for i, p in enumerate(self._pieces)}
        self._max_piece = max((len(p) for p in self._pieces), default=0)

    @classmethod
    def from_vocab_file(cls, path) -> "ByteTokenizer":
        with open(path, encoding="utf-8") as fh:
            pieces = json.load(fh)
        if not isinstance(pieces, list) or not all(isinstance(p, str) for p in pieces):
            raise ValueError(f"{path}: vocabulary file must be a JSON list of strings")
        return cls(pieces)

    @property
    def vocab_size(self) -> int:
        return BYTE_VOCAB_SIZE + len(self._pieces)

    def encode(self, text: str, add_bos: bool = True, add_eos: bool = False) -> list[int]:
        ids: list[int] = [BOS_ID] if add_bos else []
        i = 0
        while i < len(text):
            matched = False
            for length in range(min(self._max_piece, len(text) - i), 0, -1):
                piece = text[i: i + length]
                pid = self._piece_ids.get(piece)
                if pid is not None:
                    ids.append(pid)
                    i += length
                    matched = True
                    break
            if not matched:
                ids.extend(text[i].encode("utf-8"))
                i += 1
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        buf = bytearray()
        for tid in ids:
            if tid < 256:
                buf.append(tid)
            elif 0 <= tid - BYTE_VOCAB_SIZE < len(self._pieces):
                buf.extend(self._pieces[tid - BYTE_VOCAB_SIZE].encode("utf-8"))
            # BOS/EOS/PAD and ids past the vocabulary decode to nothing
        return buf.decode("utf-8", errors="replace")
