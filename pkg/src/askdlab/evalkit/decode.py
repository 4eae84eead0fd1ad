"""Greedy autoregressive decoding (no KV cache)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import numkernel as nk
from ..model import BOS, EOS, Decoder, FrozenEncoder
from ..taskgen import pad_stack


def _check_len(dec: Decoder, max_len: int | None) -> int:
    limit = dec.cfg.max_tgt_len - 1
    if max_len is None:
        return limit
    if not 1 <= max_len <= limit + 1:
        raise ValueError(f"max_len must lie in [1, {limit + 1}]")
    return min(max_len, limit)


def greedy_decode_features(dec: Decoder, features: Sequence[np.ndarray], max_len: int | None = None) -> list[list[int]]:
    """Decode a batch of encoded utterances; outputs exclude BOS and EOS."""
    steps = _check_len(dec, max_len)
    feats, mask = pad_stack(list(features))
    n = len(features)
    tokens = np.full((n, 1), BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    out: list[list[int]] = [[] for _ in range(n)]
    with nk.no_grad():
        for _ in range(steps):
            live = np.flatnonzero(~done)
            logits = dec.forward(tokens[live], feats[live], mask[live]).data
            nxt = logits[:, -1, :].argmax(axis=-1)
            col = np.full(n, EOS, dtype=np.int64)
            col[live] = nxt
            for r, tok in zip(live, nxt):
                if tok == EOS:
                    done[r] = True
                else:
                    out[r].append(int(tok))
            tokens = np.concatenate([tokens, col[:, None]], axis=1)
            if done.all():
                break
    return out


def greedy_decode(dec: Decoder, enc: FrozenEncoder, frames: np.ndarray, max_len: int | None = None) -> list[int]:
    return greedy_decode_features(dec, [enc.encode(frames)], max_len)[0]
