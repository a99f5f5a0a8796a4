"""Masked-sample construction: random masks for training, exhaustive masks for parsing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokenizer import MASK_ID, TokenSequence


@dataclass
class MaskedSample:
    """A framed message with one real token hidden behind MASK.

    position is the frame slot of the hidden token (1-based within the
    frame, so CLS at slot 0 and the trailing PADs are never masked).
    """

    input_ids: np.ndarray
    target_id: int
    position: int


def _mask_at(seq: TokenSequence, position: int) -> MaskedSample:
    ids = seq.framed_ids.copy()
    target = int(ids[position])
    ids[position] = MASK_ID
    return MaskedSample(input_ids=ids, target_id=target, position=position)


def sample_random_mask(seq: TokenSequence, rng: np.random.Generator) -> MaskedSample | None:
    """One uniformly chosen masked variant, or None when nothing is maskable.

    A None return is the skip signal: a message that tokenized to nothing
    contributes no training sample for the epoch.
    """
    n = len(seq.tokens)
    if n == 0:
        return None
    position = int(rng.integers(1, n + 1))
    return _mask_at(seq, position)


def enumerate_masks(seq: TokenSequence) -> list[MaskedSample]:
    """Every real token masked consecutively, one sample per token, in order."""
    return [_mask_at(seq, p) for p in range(1, len(seq.tokens) + 1)]
