"""Anomaly case studies on labeled logs.

Two routes share one pretrained encoder: an unsupervised verdict from the
fraction of surprising tokens per message, and a supervised verdict from a
two-way head fine-tuned on the CLS embedding.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import masking, numerics
from .errors import ValidationError
from .extraction import _ranks
from .ingest import ANOMALY, NORMAL, LogRecord
from .model import Model, ModelConfig, train
from .numerics import OptimizerState
from .tokenizer import (UNK_ID, TokenSequence, build_vocabulary,
                        compile_filter, compute_frame_length, frame, tokenize)

log = logging.getLogger(__name__)

# alert-style system logs split on punctuation as well as spaces
DEFAULT_FILTER = r"([ |:|\(|\)|=|,])|(core.)|(\.{2,})"

DELTA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass
class AnomalyConfig:
    """Study parameters: surprise threshold, split, and training lengths."""

    epsilon: int = 50
    delta: float = 0.5
    train_fraction: float = 0.8
    epochs_unsupervised: int = 3
    epochs_finetune: int = 2
    seed: int = 7
    tokenization_filter: str = DEFAULT_FILTER
    normal_only: bool = False
    d: int = 256
    heads: int = 4
    ffn_hidden: int = 512
    blocks: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValidationError(f"delta must be in [0, 1], got {self.delta}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.epochs_unsupervised < 0 or self.epochs_finetune < 0:
            raise ValidationError("epoch counts must be >= 0")
        compile_filter(self.tokenization_filter)


@dataclass
class DetectionMetrics:
    """Confusion-matrix scores with anomaly as the positive class."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    true_positives: int = 0
    false_positives: int = 0
    true_negatives: int = 0
    false_negatives: int = 0


@dataclass
class Verdict:
    """One scored message: its anomaly evidence and the final call."""

    line_id: int
    fraction: float
    verdict: str
    label: str


def token_anomaly_fraction(model: Model, seq: TokenSequence, epsilon: int) -> float:
    """Share of a message's tokens the model finds surprising.

    Uses the same constancy rule as template extraction (top-epsilon rank,
    unknown tokens always count as surprising), so this value is exactly
    1 minus the message's constant-token fraction.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    samples = masking.enumerate_masks(seq)
    if not samples:
        log.warning("message %d has no tokens; scoring it 0.0", seq.message_index)
        return 0.0
    probs = model.predict_masked_batch(samples)
    true_ids = np.array([s.target_id for s in samples])
    ranks = _ranks(probs, true_ids)
    anomalous = (ranks >= epsilon) | (true_ids == UNK_ID)
    return float(anomalous.sum()) / len(samples)


def unsupervised_classify(fraction: float, delta: float) -> str:
    """Anomaly only when the surprising-token share strictly exceeds delta."""
    return ANOMALY if fraction > delta else NORMAL


def compute_metrics(verdicts: list[str], labels: list[str]) -> DetectionMetrics:
    """Confusion-matrix scores; every zero-denominator ratio is 0."""
    if len(verdicts) != len(labels):
        raise ValidationError(
            f"got {len(verdicts)} verdicts for {len(labels)} labels")
    if not verdicts:
        raise ValidationError("cannot score an empty verdict list")
    tp = sum(1 for v, l in zip(verdicts, labels) if v == ANOMALY and l == ANOMALY)
    fp = sum(1 for v, l in zip(verdicts, labels) if v == ANOMALY and l == NORMAL)
    tn = sum(1 for v, l in zip(verdicts, labels) if v == NORMAL and l == NORMAL)
    fn = sum(1 for v, l in zip(verdicts, labels) if v == NORMAL and l == ANOMALY)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetectionMetrics(accuracy=(tp + tn) / len(verdicts), precision=precision,
                            recall=recall, f1=f1, true_positives=tp,
                            false_positives=fp, true_negatives=tn, false_negatives=fn)


def _split(records: list[LogRecord],
           fraction: float) -> tuple[list[LogRecord], list[LogRecord]]:
    """Positional split: the earliest lines train, the latest lines test."""
    cut = int(len(records) * fraction)
    train_part, test_part = records[:cut], records[cut:]
    if not train_part or not test_part:
        raise ValidationError(
            f"split at {fraction} leaves an empty side for {len(records)} records")
    return train_part, test_part


def _prepare(records: list[LogRecord], config: AnomalyConfig):
    """Tokenize everything; fit vocabulary and frame on the training side."""
    pattern = compile_filter(config.tokenization_filter)
    train_part, test_part = _split(records, config.train_fraction)
    train_tokens = [tokenize(r.content, pattern) for r in train_part]
    vocab = build_vocabulary(train_tokens)
    payload = compute_frame_length(train_tokens)
    train_seqs = [frame(toks, payload, vocab, message_index=r.line_id)
                  for r, toks in zip(train_part, train_tokens)]
    test_seqs = [frame(tokenize(r.content, pattern), payload, vocab,
                       message_index=r.line_id) for r in test_part]
    return train_part, test_part, train_seqs, test_seqs, vocab, payload


def _pretrain(train_part, train_seqs, vocab, payload, config: AnomalyConfig) -> Model:
    if config.normal_only:
        kept = [s for s, r in zip(train_seqs, train_part) if r.label == NORMAL]
        if not kept:
            raise ValidationError("normal-only training requested but no normal lines")
        train_seqs = kept
    model_config = ModelConfig(vocab_size=len(vocab), frame_length=payload + 1,
                               d=config.d, heads=config.heads,
                               ffn_hidden=config.ffn_hidden, blocks=config.blocks,
                               epochs=config.epochs_unsupervised,
                               batch_size=config.batch_size,
                               learning_rate=config.learning_rate, seed=config.seed)
    return train(train_seqs, model_config, vocab=vocab)


def run_unsupervised_study(records: list[LogRecord],
                           config: AnomalyConfig) -> tuple[DetectionMetrics, list[Verdict]]:
    """Self-supervised route: pretrain on the early lines without labels,
    then flag late lines whose surprising-token share exceeds delta."""
    train_part, test_part, train_seqs, test_seqs, vocab, payload = _prepare(records, config)
    model = _pretrain(train_part, train_seqs, vocab, payload, config)
    verdicts = []
    for record, seq in zip(test_part, test_seqs):
        fraction = token_anomaly_fraction(model, seq, config.epsilon)
        verdicts.append(Verdict(line_id=record.line_id, fraction=fraction,
                                verdict=unsupervised_classify(fraction, config.delta),
                                label=record.label))
    metrics = compute_metrics([v.verdict for v in verdicts],
                              [v.label for v in verdicts])
    log.info("unsupervised study: F1 %.4f over %d test messages",
             metrics.f1, len(verdicts))
    return metrics, verdicts


def fine_tune_supervised(model: Model, train_seqs: list[TokenSequence],
                         labels: list[str], epochs: int,
                         config: AnomalyConfig) -> Model:
    """Swap the vocabulary head for a two-way one and train every weight.

    Class 0 is normal, class 1 is anomaly. The input is the unmasked frame;
    the classifier reads the CLS row only.
    """
    if len(train_seqs) != len(labels):
        raise ValidationError(
            f"got {len(train_seqs)} sequences for {len(labels)} labels")
    if not train_seqs:
        raise ValidationError("cannot fine-tune on an empty train set")
    if len(set(labels)) < 2:
        log.warning("fine-tune train set has a single class; proceeding anyway")
    rng = np.random.default_rng(config.seed + 1)
    classifier = Model(model.config, vocab=model.vocab, init="zeros", head_out=2)
    for name, tensor in model.params.items():
        if not name.startswith("head."):
            classifier.params[name].data = tensor.data.copy()
    for name in ("head.w", "head.b"):
        t = classifier.params[name]
        t.data = rng.uniform(-0.1, 0.1, size=t.data.shape).astype(t.data.dtype)
    if epochs == 0:
        return classifier
    targets_all = np.array([1 if lab == ANOMALY else 0 for lab in labels],
                           dtype=np.int64)
    opt = OptimizerState(classifier.params, learning_rate=config.learning_rate)
    for epoch in range(epochs):
        order = rng.permutation(len(train_seqs))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            ids = np.stack([train_seqs[i].framed_ids for i in batch])
            loss = numerics.cross_entropy(classifier.forward_logits(ids),
                                          targets_all[batch])
            loss.backward()
            numerics.optimizer_step(classifier.params, opt)
            epoch_loss += float(loss.data) * len(batch)
        log.info("fine-tune epoch %d/%d: mean loss %.4f", epoch + 1, epochs,
                 epoch_loss / len(train_seqs))
    return classifier


def classify_supervised(classifier: Model,
                        seqs: list[TokenSequence]) -> tuple[list[str], list[float]]:
    """Argmax verdicts plus the anomaly-class probability for each message."""
    verdicts: list[str] = []
    scores: list[float] = []
    batch_size = classifier.config.batch_size
    with numerics.no_grad():
        for start in range(0, len(seqs), batch_size):
            ids = np.stack([s.framed_ids for s in seqs[start:start + batch_size]])
            logits = classifier.forward_logits(ids).data
            shifted = logits - logits.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            p_anomaly = e[:, 1] / e.sum(axis=-1)
            for p in p_anomaly:
                scores.append(float(p))
                verdicts.append(ANOMALY if p > 0.5 else NORMAL)
    return verdicts, scores


def run_supervised_study(records: list[LogRecord],
                         config: AnomalyConfig) -> tuple[DetectionMetrics, list[Verdict]]:
    """Pretrain without labels, fine-tune a two-way head on the train labels,
    then classify the held-out tail."""
    train_part, test_part, train_seqs, test_seqs, vocab, payload = _prepare(records, config)
    pretrained = _pretrain(train_part, train_seqs, vocab, payload, config)
    classifier = fine_tune_supervised(pretrained, train_seqs,
                                      [r.label for r in train_part],
                                      config.epochs_finetune, config)
    calls, scores = classify_supervised(classifier, test_seqs)
    verdicts = [Verdict(line_id=r.line_id, fraction=score, verdict=call, label=r.label)
                for r, call, score in zip(test_part, calls, scores)]
    metrics = compute_metrics(calls, [r.label for r in test_part])
    log.info("supervised study: F1 %.4f over %d test messages",
             metrics.f1, len(verdicts))
    return metrics, verdicts


def sweep_deltas(fractions: list[float], labels: list[str],
                 deltas: tuple[float, ...] = DELTA_GRID) -> list[tuple[float, DetectionMetrics]]:
    """Metrics at each candidate threshold, from already-computed fractions."""
    out = []
    for delta in deltas:
        calls = [unsupervised_classify(f, delta) for f in fractions]
        out.append((delta, compute_metrics(calls, labels)))
    return out
