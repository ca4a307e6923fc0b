"""Synthetic corpus, tokenization and batching.

Token ids: 0 is padding, 1 is the mask token, ``2 .. 2+num_labels-1`` are
label (verbalizer) tokens and ids from ``CONTENT_START`` up are content.
Classification is posed as a cloze: the final position holds the mask and
the model must predict a label token there.  Pre-training is masked-token
prediction over content sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .model import MASK_ID
from .rng import Rng

PAD_ID = 0
LABEL_START = 2
CONTENT_START = 8
MASK_RATE = 0.15


@dataclass
class Batch:
    """One training batch.

    Attributes:
        tokens: ``(B, S)`` token ids.
        rows, cols: coordinates of the prediction positions.
        targets: class index per prediction position (label index for the
            task stage, vocabulary id for pre-training).
        label_ids: vocabulary ids of the label tokens; ``None`` means the
            whole vocabulary is the output space.
    """

    tokens: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    targets: np.ndarray
    label_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def select(self, idx: np.ndarray) -> "Batch":
        """Sub-batch holding the sequences ``idx`` (used for micro-batching)."""
        idx = np.asarray(idx)
        where = np.isin(self.rows, idx)
        remap = {int(r): k for k, r in enumerate(idx)}
        rows = np.array([remap[int(r)] for r in self.rows[where]], dtype=np.int64)
        return Batch(self.tokens[idx], rows, self.cols[where], self.targets[where], self.label_ids)


@dataclass
class SyntheticCorpus:
    """Token sequences from a seeded order-2 Markov chain with a 90/10 split."""

    vocab: int
    seq_len: int
    num_labels: int
    train: np.ndarray
    valid: np.ndarray
    train_labels: np.ndarray
    valid_labels: np.ndarray
    seed: int = 0
    generator: dict = field(default_factory=dict)

    def task_tokens(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        seqs, labels = self._split(split)
        tokens = seqs.copy()
        tokens[:, -1] = MASK_ID
        return tokens, labels

    def _split(self, split: str):
        if split == "train":
            return self.train, self.train_labels
        if split == "valid":
            return self.valid, self.valid_labels
        raise DataError(f"unknown split {split!r}")

    def label_ids(self) -> np.ndarray:
        return np.arange(LABEL_START, LABEL_START + self.num_labels)

    def task_batches(self, split: str, batch_size: int) -> list[Batch]:
        """Classification batches in a fixed order."""
        tokens, labels = self.task_tokens(split)
        out = []
        for start in range(0, len(tokens) - batch_size + 1 if split == "train" else len(tokens), batch_size):
            tok = tokens[start:start + batch_size]
            n = len(tok)
            out.append(Batch(tok, np.arange(n), np.full(n, self.seq_len - 1), labels[start:start + n],
                             self.label_ids()))
        return out

    def pretrain_batches(self, split: str, batch_size: int, seed: int | None = None) -> list[Batch]:
        """Masked-token batches; mask positions are a fixed function of the corpus seed."""
        seqs, _ = self._split(split)
        rng = Rng((self.seed if seed is None else seed) * 7919 + (1 if split == "valid" else 2))
        k = max(1, int(round(MASK_RATE * self.seq_len)))
        out = []
        stop = len(seqs) - batch_size + 1 if split == "train" else len(seqs)
        for start in range(0, stop, batch_size):
            chunk = seqs[start:start + batch_size]
            n = len(chunk)
            cols = np.stack([rng.choice(self.seq_len, k) for _ in range(n)])
            rows = np.repeat(np.arange(n), k)
            cols = cols.reshape(-1)
            tok = chunk.copy()
            targets = tok[rows, cols].copy()
            tok[rows, cols] = MASK_ID
            out.append(Batch(tok, rows, cols, targets, None))
        return out

    def batches(self, stage: str, split: str, batch_size: int) -> list[Batch]:
        if stage == "pretraining":
            return self.pretrain_batches(split, batch_size)
        return self.task_batches(split, batch_size)


def pattern_label(seq: np.ndarray, vocab: int, num_labels: int) -> int:
    """Label rule: which band of the content range holds the most tokens (ties go to the lower band)."""
    content = seq[:-1] - CONTENT_START
    width = vocab - CONTENT_START
    bands = np.minimum(content * num_labels // width, num_labels - 1)
    return int(np.argmax(np.bincount(bands, minlength=num_labels)))


def generate_corpus(seed: int, size: int, vocab: int = 256, seq_len: int = 16,
                    num_labels: int = 2, successors: int = 6) -> SyntheticCorpus:
    """Deterministic corpus from a seeded order-2 Markov chain.

    Every context ``(a, b)`` has ``successors`` candidate next tokens with
    random weights.  Labels follow :func:`pattern_label`.
    """
    if size <= 0:
        raise DataError("corpus size must be positive")
    if vocab <= CONTENT_START + num_labels or seq_len < 3:
        raise DataError("vocab or sequence length too small for the synthetic corpus")
    if LABEL_START + num_labels > CONTENT_START:
        raise DataError(f"at most {CONTENT_START - LABEL_START} labels are supported")
    rng = Rng(seed)
    C = vocab - CONTENT_START
    succ = rng.integers(0, C, (C * C, successors))
    weights = rng.uniform((C * C, successors)) ** 2
    cdf = np.cumsum(weights / weights.sum(axis=1, keepdims=True), axis=1)
    seqs = np.empty((size, seq_len), dtype=np.int64)
    seqs[:, 0] = rng.integers(0, C, (size,))
    seqs[:, 1] = rng.integers(0, C, (size,))
    for t in range(2, seq_len):
        ctx = seqs[:, t - 2] * C + seqs[:, t - 1]
        u = rng.uniform((size,))
        pick = np.minimum((cdf[ctx] < u[:, None]).sum(axis=1), successors - 1)
        seqs[:, t] = succ[ctx, pick]
    seqs += CONTENT_START
    labels = np.array([pattern_label(s, vocab, num_labels) for s in seqs], dtype=np.int64)
    n_train = size - max(1, size // 10)
    return SyntheticCorpus(vocab, seq_len, num_labels, seqs[:n_train], seqs[n_train:],
                           labels[:n_train], labels[n_train:], seed,
                           {"kind": "markov-2", "successors": successors, "size": size})


# -- byte-level text mode ------------------------------------------------------------
def encode_text(text: str, vocab: int = 256) -> np.ndarray:
    """Byte-level ids folded into the content range."""
    raw = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    return CONTENT_START + raw % (vocab - CONTENT_START)


def corpus_from_text(lines: list[str], vocab: int = 256, seq_len: int = 16,
                     num_labels: int = 2, seed: int = 0) -> SyntheticCorpus:
    """Build a corpus from ``label<TAB>text`` lines (unlabelled lines get label 0).

    Each line is encoded byte-wise, then cut or right-padded with content
    id ``CONTENT_START`` to ``seq_len``.
    """
    seqs, labels = [], []
    for i, line in enumerate(lines):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        label, sep, text = line.partition("\t")
        if sep and label.strip().isdigit():
            y = int(label)
            if y >= num_labels:
                raise DataError(f"line {i + 1}: label {y} outside [0, {num_labels})")
        else:
            text, y = line, 0
        ids = encode_text(text, vocab)[:seq_len]
        ids = np.concatenate([ids, np.full(seq_len - len(ids), CONTENT_START)])
        seqs.append(ids)
        labels.append(y)
    if len(seqs) < 2:
        raise DataError("text corpus needs at least two non-empty lines")
    seqs = np.array(seqs, dtype=np.int64)
    labels = np.array(labels, dtype=np.int64)
    n_train = len(seqs) - max(1, len(seqs) // 10)
    return SyntheticCorpus(vocab, seq_len, num_labels, seqs[:n_train], seqs[n_train:],
                           labels[:n_train], labels[n_train:], seed, {"kind": "text"})
