"""Turn text corpora into embedding/label files the ufd pipeline can read.

A frozen pretrained encoder is run over the corpus, the last-layer hidden
states are mean-pooled per document (padding excluded), and the vectors are
written in the same binary format the ufd package reads. The encoder is
never trained here.
"""

from .export import CorpusError, ExportJob, ExportResult, export, read_corpus
from .formats import write_embeddings, write_labels

__all__ = [
    "CorpusError",
    "ExportJob",
    "ExportResult",
    "export",
    "read_corpus",
    "write_embeddings",
    "write_labels",
]
