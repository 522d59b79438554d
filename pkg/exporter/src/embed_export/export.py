"""Batched encoding of a text corpus into mean-pooled document embeddings.

Each input line is one document, optionally followed by a tab and an integer
label. Documents are tokenized (truncated to the job's maximum length), run
through the frozen encoder in batches, and the last-layer hidden states are
averaged over the non-padding positions — special tokens, when the tokenizer
adds them, are part of that average. Results are widened to float64 and
written in the ufd binary format, one row per document in input order.

A document that tokenizes to nothing cannot be pooled; it is skipped with a
warning, its index is recorded on the result, and its label (if any) is
dropped so the two output files stay aligned.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer

from .formats import write_embeddings, write_labels


class CorpusError(ValueError):
    """Raised when the input corpus or job configuration is malformed."""


@dataclass
class ExportJob:
    input_path: str
    encoder: str
    out_path: str
    labels_path: str | None = None
    max_len: int = 256
    batch_size: int = 8

    def __post_init__(self):
        if self.max_len < 1:
            raise CorpusError("max_len must be positive")
        if self.batch_size < 1:
            raise CorpusError("batch_size must be positive")


@dataclass
class ExportResult:
    rows: int
    dim: int
    skipped: tuple[int, ...]
    out_path: str
    labels_path: str | None


def read_corpus(path) -> tuple[list[str], list[str] | None]:
    """Parse one document per line; a tab separates an optional label.

    Labels stay as the original strings (validated to parse as integers) so
    they can be passed through verbatim. Either every line is labeled or
    none is — a mix is a malformed corpus.
    """
    docs: list[str] = []
    labels: list[str] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if "\t" in line:
            text, label = line.split("\t", 1)
            label = label.strip()
            try:
                int(label)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: label is not an integer: {label!r}")
            docs.append(text)
            labels.append(label)
        else:
            docs.append(line)
    if labels and len(labels) != len(docs):
        raise CorpusError(
            f"{path}: {len(labels)} of {len(docs)} lines have labels; "
            "label either every line or none"
        )
    return docs, (labels if labels else None)


def _pool_batch(model, enc) -> np.ndarray:
    """Masked mean of last-layer hidden states, in float64, (rows, hidden)."""
    with torch.no_grad():
        hidden = model(**enc).last_hidden_state.double()
    mask = enc["attention_mask"].double().unsqueeze(-1)
    summed = (hidden * mask).sum(dim=1)
    counts = mask.sum(dim=1)
    return (summed / counts).numpy()


def export(job: ExportJob) -> ExportResult:
    docs, labels = read_corpus(job.input_path)
    if labels is not None and job.labels_path is None:
        raise CorpusError("corpus has labels but no label output path was given")
    if labels is None and job.labels_path is not None:
        raise CorpusError("label output path given but the corpus has no labels")

    tokenizer = AutoTokenizer.from_pretrained(job.encoder)
    model = AutoModel.from_pretrained(job.encoder)
    model.eval()
    dim = model.config.hidden_size

    chunks: list[np.ndarray] = []
    skipped: list[int] = []
    for start in range(0, len(docs), job.batch_size):
        batch = docs[start : start + job.batch_size]
        enc = tokenizer(
            batch,
            truncation=True,
            max_length=job.max_len,
            padding=True,
            return_tensors="pt",
        )
        lengths = enc["attention_mask"].sum(dim=1)
        keep = lengths > 0
        for i in (~keep).nonzero().flatten().tolist():
            idx = start + i
            skipped.append(idx)
            warnings.warn(f"document {idx} is empty after tokenization; skipped")
        if not bool(keep.any()):
            continue
        if not bool(keep.all()):
            enc = {k: v[keep] for k, v in enc.items()}
        chunks.append(_pool_batch(model, enc))

    if chunks:
        matrix = np.concatenate(chunks, axis=0)
    else:
        matrix = np.zeros((0, dim), dtype=np.float64)
    write_embeddings(job.out_path, matrix)

    if labels is not None:
        dropped = set(skipped)
        kept_labels = [v for i, v in enumerate(labels) if i not in dropped]
        write_labels(job.labels_path, kept_labels)

    return ExportResult(
        rows=matrix.shape[0],
        dim=dim,
        skipped=tuple(skipped),
        out_path=job.out_path,
        labels_path=job.labels_path,
    )
