"""Template extraction: mask each token in turn and keep it as a constant
only when the model ranks the true token inside the top epsilon candidates.

Tokens the rule rejects become the placeholder and their original text is
reported as that message's variable list, in token order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import masking
from .errors import ValidationError
from .model import Model
from .tokenizer import UNK_ID, TokenSequence

log = logging.getLogger(__name__)

PLACEHOLDER = "⟨*⟩"  # angle-bracketed star


@dataclass
class ParsedMessage:
    """One message's parse: which template it matched and what varied."""

    message_index: int
    template_id: int
    template: str
    variables: list[str]


class TemplateStore:
    """Assigns dense ids to templates in first-appearance order and keeps
    each template's member message indices; members partition the corpus."""

    def __init__(self) -> None:
        self._ids: dict[str, int] = {}
        self._members: list[list[int]] = []

    def intern(self, template: str) -> int:
        if template not in self._ids:
            self._ids[template] = len(self._ids)
            self._members.append([])
        return self._ids[template]

    def record(self, template: str, message_index: int) -> int:
        template_id = self.intern(template)
        self._members[template_id].append(message_index)
        return template_id

    def templates(self) -> list[str]:
        return list(self._ids)

    def members(self, template_id: int) -> list[int]:
        return list(self._members[template_id])

    def __len__(self) -> int:
        return len(self._ids)


def _ranks(probabilities: np.ndarray, true_ids: np.ndarray) -> np.ndarray:
    """Competition rank of each true token in its predicted distribution.

    Rank counts strictly-higher-probability tokens, with exact ties broken
    toward the smaller token id. Rank 0 means the true token wins outright.
    """
    rows = np.arange(len(true_ids))
    p_true = probabilities[rows, true_ids]
    higher = (probabilities > p_true[:, None]).sum(axis=1)
    tied_before = ((probabilities == p_true[:, None])
                   & (np.arange(probabilities.shape[1]) < true_ids[:, None])).sum(axis=1)
    return higher + tied_before


def is_constant(probabilities: np.ndarray, true_id: int, epsilon: int) -> bool:
    """Top-epsilon rule for a single slot.

    Growing epsilon only ever turns variables into constants, never the
    reverse, because the rank of the true token does not depend on epsilon.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    probabilities = np.asarray(probabilities)
    if probabilities.ndim != 1:
        raise ValidationError(
            f"expected a 1-d probability vector, got shape {probabilities.shape}")
    rank = _ranks(probabilities[None, :], np.array([true_id]))[0]
    return bool(rank < epsilon)


def extract_template(model: Model, seq: TokenSequence,
                     epsilon: int) -> tuple[str, list[str]]:
    """Classify each token of one message and build its template string."""
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    samples = masking.enumerate_masks(seq)
    if not samples:
        return "", []
    probs = model.predict_masked_batch(samples)
    true_ids = np.array([s.target_id for s in samples])
    ranks = _ranks(probs, true_ids)
    constant = (ranks < epsilon) & (true_ids != UNK_ID)
    parts = [tok if keep else PLACEHOLDER
             for tok, keep in zip(seq.tokens, constant)]
    variables = [tok for tok, keep in zip(seq.tokens, constant) if not keep]
    return " ".join(parts), variables


def parse_corpus(model: Model, corpus: list[TokenSequence],
                 epsilon: int) -> tuple[list[ParsedMessage], TemplateStore]:
    """Parse every message, reusing results for repeated token sequences.

    Identical token lists always parse identically, so the cache changes
    nothing but the running time.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    store = TemplateStore()
    parsed: list[ParsedMessage] = []
    cache: dict[tuple[str, ...], tuple[str, list[str]]] = {}
    for n, seq in enumerate(corpus):
        key = tuple(seq.tokens)
        if key in cache:
            template, variables = cache[key]
        else:
            template, variables = extract_template(model, seq, epsilon)
            cache[key] = (template, variables)
        parsed.append(ParsedMessage(message_index=seq.message_index,
                                    template_id=store.record(template,
                                                             seq.message_index),
                                    template=template,
                                    variables=list(variables)))
        if (n + 1) % 500 == 0:
            log.info("parsed %d/%d messages (%d templates, %d distinct shapes)",
                     n + 1, len(corpus), len(store), len(cache))
    return parsed, store
