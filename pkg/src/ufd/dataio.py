"""File formats, dataset containers, the synthetic benchmark generator, and
a small power-iteration projector for 2-D feature plots.

Binary embedding files: 20-byte header (magic "UFDE", u32 version, u64 rows,
u32 dim, all little-endian) followed by float64 row-major payload. Labels are
one decimal integer per line. A manifest JSON ties (language, domain, split)
triples to files. Checkpoints are a JSON tensor index plus concatenated
embedding-format blocks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Matrix, Rng, ShapeError, UfdError, ensure_matrix, spawn_rng

MAGIC = b"UFDE"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")  # magic, version, rows, dim

SPLITS = ("unlabeled", "train", "validation", "test")


class DataFormatError(UfdError):
    """A file does not conform to one of the on-disk formats."""


class DegenerateDataError(UfdError):
    """Input data carries no usable signal (e.g. zero variance)."""


# ---------------------------------------------------------------------------
# Embedding format


def _block_bytes(matrix: Matrix) -> bytes:
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError(f"embedding payload must be 2-D, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise DataFormatError("refusing to serialize non-finite values")
    rows, dim = matrix.shape
    header = _HEADER.pack(MAGIC, VERSION, rows, dim)
    return header + matrix.astype("<f8", copy=False).tobytes(order="C")


def _parse_block(buf: bytes, offset: int, where: str) -> tuple[np.ndarray, int]:
    if len(buf) - offset < _HEADER.size:
        raise DataFormatError(f"{where}: truncated header")
    magic, version, rows, dim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise DataFormatError(f"{where}: bad magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(f"{where}: unsupported version {version}")
    start = offset + _HEADER.size
    nbytes = rows * dim * 8
    if len(buf) - start < nbytes:
        raise DataFormatError(
            f"{where}: payload truncated (need {nbytes} bytes, have {len(buf) - start})"
        )
    arr = np.frombuffer(buf, dtype="<f8", count=rows * dim, offset=start)
    return arr.reshape(rows, dim).astype(np.float64), start + nbytes


def write_embeddings(path, matrix: Matrix) -> None:
    """Serialize a float64 matrix; a 0-row matrix writes a header-only file."""
    Path(path).write_bytes(_block_bytes(matrix))


def read_embeddings(path) -> Matrix:
    buf = Path(path).read_bytes()
    arr, end = _parse_block(buf, 0, str(path))
    if end != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - end} trailing bytes after payload")
    return arr


# ---------------------------------------------------------------------------
# Label format


def write_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise DataFormatError("labels must be integers")
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def read_labels(path, n_classes: int | None = None) -> np.ndarray:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: not an integer: {line!r}")
    labels = np.asarray(out, dtype=np.int64)
    if n_classes is not None and labels.size:
        if labels.min() < 0 or labels.max() >= n_classes:
            raise DataFormatError(
                f"{path}: labels outside [0, {n_classes - 1}] "
                f"(saw {labels.min()}..{labels.max()})"
            )
    return labels


# ---------------------------------------------------------------------------
# Checkpoints: JSON tensor index line + concatenated embedding blocks.


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    if not tensors:
        raise ShapeError("checkpoint needs at least one tensor")
    blocks = []
    index = []
    offset = 0
    for name, value in tensors.items():
        block = _block_bytes(value)
        rows, cols = value.shape
        index.append({"name": name, "rows": rows, "cols": cols, "offset": offset})
        blocks.append(block)
        offset += len(block)
    manifest = json.dumps({"tensors": index}, sort_keys=True)
    Path(path).write_bytes(manifest.encode("utf-8") + b"\n" + b"".join(blocks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise DataFormatError(f"{path}: missing tensor index line")
    try:
        index = json.loads(buf[:nl].decode("utf-8"))["tensors"]
    except (ValueError, KeyError) as exc:
        raise DataFormatError(f"{path}: bad tensor index: {exc}")
    payload_start = nl + 1
    tensors: dict[str, np.ndarray] = {}
    for entry in index:
        if not all(k in entry for k in ("name", "rows", "cols", "offset")):
            raise DataFormatError(f"{path}: malformed tensor index entry {entry!r}")
        name = entry["name"]
        if name in tensors:
            raise DataFormatError(f"{path}: duplicate tensor {name!r}")
        arr, _ = _parse_block(buf, payload_start + entry["offset"], f"{path}[{name}]")
        if arr.shape != (entry["rows"], entry["cols"]):
            raise DataFormatError(
                f"{path}: tensor {name!r} shape {arr.shape} does not match index"
            )
        tensors[name] = arr
    return tensors


# ---------------------------------------------------------------------------
# Datasets and manifests


@dataclass
class Dataset:
    """One (language, domain, split) table of embeddings, labeled or not."""

    embeddings: Matrix
    labels: np.ndarray | None
    language: str
    domain: str
    split: str

    def __post_init__(self):
        self.embeddings = ensure_matrix(self.embeddings, "embeddings")
        if self.split not in SPLITS:
            raise ShapeError(f"unknown split {self.split!r} (expected one of {SPLITS})")
        if self.split == "unlabeled":
            if self.labels is not None:
                raise ShapeError("unlabeled split must not carry labels")
        else:
            if self.labels is None:
                raise ShapeError(f"split {self.split!r} requires labels")
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.embeddings.shape[0],):
                raise ShapeError(
                    f"labels shape {self.labels.shape} does not match "
                    f"{self.embeddings.shape[0]} rows"
                )

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.language, self.domain, self.split)


@dataclass
class Manifest:
    """All datasets of one corpus, loaded fully or not at all."""

    dimension: int
    classes: int
    source_language: str
    datasets: dict[tuple[str, str, str], Dataset]

    def get(self, language: str, domain: str, split: str) -> Dataset:
        key = (language, domain, split)
        if key not in self.datasets:
            raise DataFormatError(f"manifest has no dataset for {key}")
        return self.datasets[key]

    def domains(self, language: str, split: str) -> list[str]:
        return sorted(
            {d for (lang, d, s) in self.datasets if lang == language and s == split}
        )

    def languages(self) -> list[str]:
        return sorted({lang for (lang, _, _) in self.datasets})


def load_manifest(path) -> Manifest:
    """Parse a manifest and load every referenced file before returning."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except ValueError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc}")
    for req in ("dimension", "classes", "source_language", "datasets"):
        if req not in spec:
            raise DataFormatError(f"{path}: manifest is missing {req!r}")
    dimension = int(spec["dimension"])
    classes = int(spec["classes"])
    datasets: dict[tuple[str, str, str], Dataset] = {}
    for entry in spec["datasets"]:
        for req in ("language", "domain", "split", "embeddings"):
            if req not in entry:
                raise DataFormatError(f"{path}: dataset entry is missing {req!r}")
        emb = read_embeddings(path.parent / entry["embeddings"])
        if emb.shape[1] != dimension:
            raise DataFormatError(
                f"{path}: {entry['embeddings']} has dim {emb.shape[1]}, "
                f"manifest says {dimension}"
            )
        labels = None
        if entry.get("labels"):
            labels = read_labels(path.parent / entry["labels"], n_classes=classes)
        ds = Dataset(emb, labels, entry["language"], entry["domain"], entry["split"])
        if ds.key in datasets:
            raise DataFormatError(f"{path}: duplicate dataset {ds.key}")
        datasets[ds.key] = ds
    return Manifest(dimension, classes, str(spec["source_language"]), datasets)


def save_datasets(
    out_dir,
    datasets: dict[tuple[str, str, str], Dataset],
    classes: int,
    source_language: str,
    manifest_name: str = "manifest.json",
) -> Path:
    """Write every dataset plus a manifest into out_dir; returns the manifest
    path. File names are derived from the dataset keys."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = {ds.dim for ds in datasets.values()}
    if len(dims) != 1:
        raise ShapeError(f"datasets disagree on dimension: {sorted(dims)}")
    entries = []
    for key in sorted(datasets):
        ds = datasets[key]
        stem = "_".join(key)
        emb_name = f"{stem}.ufde"
        write_embeddings(out_dir / emb_name, ds.embeddings)
        label_name = None
        if ds.labels is not None:
            label_name = f"{stem}.labels"
            write_labels(out_dir / label_name, ds.labels)
        entries.append(
            {
                "language": ds.language,
                "domain": ds.domain,
                "split": ds.split,
                "embeddings": emb_name,
                "labels": label_name,
            }
        )
    manifest = {
        "dimension": dims.pop(),
        "classes": classes,
        "source_language": source_language,
        "datasets": entries,
    }
    manifest_path = out_dir / manifest_name
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# Synthetic cross-domain corpus


@dataclass
class SynthConfig:
    """Geometry and sizes for the synthetic transfer benchmark.

    Documents are h = A z_s + B_dom (z_d + mu_dom) + sigma * eps where A is a
    shared orthonormal basis and each domain owns its own orthonormal private
    basis B_dom. Labels are sign(w . z_s), so they never depend on the domain
    geometry, the offset, or the noise level. The latent means mu_dom sit
    exactly `offset` apart, and each embedded mean B_dom mu_dom keeps norm
    offset/sqrt(2). `mean_task_overlap` is the cosine between every embedded
    mean and the labeling direction A w, with the sign alternating by domain:
    each domain shifts the class scores by a constant in opposite directions,
    so a decision threshold fitted on one domain is systematically biased on
    the next. At 0 the means are orthogonal to the labeling direction and the
    domain shift only adds interference noise.
    """

    dim: int = 64
    shared_dim: int = 8
    private_dim: int = 8
    n_domains: int = 2
    offset: float = 6.0
    mean_task_overlap: float = 0.5
    noise_sigma: float = 0.5
    unlabeled_rows: int = 2000
    train_rows: int = 1000
    validation_rows: int = 100
    test_rows: int = 1000
    source_language: str = "src"
    target_language: str = "tgt"
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.shared_dim <= self.dim):
            raise ShapeError("shared_dim must be in [1, dim]")
        if not (1 <= self.private_dim <= self.dim):
            raise ShapeError("private_dim must be in [1, dim]")
        if not (1 <= self.n_domains <= self.private_dim):
            raise ShapeError("n_domains must be in [1, private_dim]")
        for name in ("unlabeled_rows", "train_rows", "validation_rows", "test_rows"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive")
        if self.offset < 0 or self.noise_sigma < 0:
            raise ShapeError("offset and noise_sigma must be >= 0")
        if not 0.0 <= self.mean_task_overlap <= 1.0:
            raise ShapeError("mean_task_overlap must be in [0, 1]")
        if self.source_language == self.target_language:
            raise ShapeError("source and target language tags must differ")

    @property
    def domain_names(self) -> list[str]:
        return [f"d{i}" for i in range(self.n_domains)]


@dataclass
class SynthData:
    """Generated corpus plus the ground truth behind it (for probes only)."""

    config: SynthConfig
    datasets: dict[tuple[str, str, str], Dataset]
    shared_latents: dict[tuple[str, str, str], np.ndarray]
    private_latents: dict[tuple[str, str, str], np.ndarray]
    all_labels: dict[tuple[str, str, str], np.ndarray] = field(default_factory=dict)
    label_direction: np.ndarray | None = None
    shared_basis: np.ndarray | None = None
    private_bases: list[np.ndarray] = field(default_factory=list)
    domain_means: list[np.ndarray] = field(default_factory=list)


def _orthonormal_columns(rng: Rng, n: int, k: int) -> np.ndarray:
    """QR-based orthonormal (n, k) basis with a sign convention so the result
    is a deterministic function of the stream state."""
    g = rng.standard_normal((n, k))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def _unit_perpendicular(rng: Rng, direction: np.ndarray) -> np.ndarray:
    """Random unit vector orthogonal to `direction` (itself unit norm)."""
    for _ in range(8):
        g = rng.standard_normal(direction.shape[0])
        g = g - (g @ direction) * direction
        norm = np.linalg.norm(g)
        if norm > 1e-9:
            return g / norm
    raise DegenerateDataError("could not draw a perpendicular direction")


def _rotate_columns(basis: np.ndarray, old: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Apply the orthogonal map taking unit vector `old` to unit vector `new`
    (a Householder reflection across their bisector) to every column."""
    gap = old - new
    norm = np.linalg.norm(gap)
    if norm < 1e-12:
        return basis
    u = gap / norm
    return basis - 2.0 * np.outer(u, u @ basis)


# stream keys: one concern per child stream
_STRUCT_KEY = 10
_SHARED_KEY = 20
_PRIVATE_KEY = 21
_NOISE_KEY = 22

_SPLIT_INDEX = {s: i for i, s in enumerate(SPLITS)}


def synth_generate(config: SynthConfig) -> SynthData:
    """Build the synthetic corpus.

    Source-language domains get `unlabeled` and `train` splits; the target
    language gets fresh `validation` and `test` draws from the same domain
    distributions (the language axis is a tag; domain shift carries the
    transfer difficulty). Structural draws (bases, label direction, mean
    directions) never depend on offset, sigma, or the mean/task overlap, so
    equal seeds give equal labels across those settings.
    """
    cfg = config
    struct_rng = spawn_rng(cfg.seed, _STRUCT_KEY)
    shared_basis = _orthonormal_columns(struct_rng, cfg.dim, cfg.shared_dim)
    w = struct_rng.standard_normal(cfg.shared_dim)
    w /= np.linalg.norm(w)
    mean_dirs = _orthonormal_columns(struct_rng, cfg.private_dim, cfg.n_domains)
    # task direction in embedding space; unit norm because the columns of the
    # shared basis are orthonormal and w is normalized
    task_dir = shared_basis @ w
    raw_bases = [
        _orthonormal_columns(struct_rng, cfg.dim, cfg.private_dim)
        for _ in range(cfg.n_domains)
    ]
    # Tilt each domain basis so the embedded mean B_d mu_d makes a cosine of
    # +/- mean_task_overlap with the task direction, sign alternating by
    # domain. A threshold fitted where the mean pushes logits one way is
    # systematically miscalibrated where it pushes the other way, which is the
    # cross-domain difficulty the corpus is meant to carry. The perpendicular
    # component is one shared direction, so the difference between embedded
    # means lies exactly along the task direction (the shared part behaves
    # like a corpus-wide offset). Orthogonal maps keep the columns
    # orthonormal, so within-domain geometry is unchanged.
    perp = _unit_perpendicular(struct_rng, task_dir)
    private_bases = []
    for di in range(cfg.n_domains):
        sign = 1.0 if di % 2 == 0 else -1.0
        c = cfg.mean_task_overlap
        target = sign * c * task_dir + np.sqrt(1.0 - c * c) * perp
        current = raw_bases[di] @ mean_dirs[:, di]
        private_bases.append(_rotate_columns(raw_bases[di], current, target))
    # orthonormal latent directions scaled by offset/sqrt(2): the latent means
    # mu_d sit exactly `offset` apart, and every embedded mean B_d mu_d keeps
    # norm offset/sqrt(2)
    domain_means = [
        (cfg.offset / np.sqrt(2.0)) * mean_dirs[:, i] for i in range(cfg.n_domains)
    ]

    split_rows = {
        "unlabeled": cfg.unlabeled_rows,
        "train": cfg.train_rows,
        "validation": cfg.validation_rows,
        "test": cfg.test_rows,
    }
    split_language = {
        "unlabeled": cfg.source_language,
        "train": cfg.source_language,
        "validation": cfg.target_language,
        "test": cfg.target_language,
    }

    data = SynthData(cfg, {}, {}, {})
    data.label_direction = w
    data.shared_basis = shared_basis
    data.private_bases = private_bases
    data.domain_means = domain_means

    for di, domain in enumerate(cfg.domain_names):
        for split, rows in split_rows.items():
            si = _SPLIT_INDEX[split]
            z_s = spawn_rng(cfg.seed, _SHARED_KEY, di, si).standard_normal(
                (rows, cfg.shared_dim)
            )
            z_d = spawn_rng(cfg.seed, _PRIVATE_KEY, di, si).standard_normal(
                (rows, cfg.private_dim)
            )
            eps = spawn_rng(cfg.seed, _NOISE_KEY, di, si).standard_normal(
                (rows, cfg.dim)
            )
            labels = (z_s @ w > 0).astype(np.int64)
            h = (
                z_s @ shared_basis.T
                + (z_d + domain_means[di]) @ private_bases[di].T
                + cfg.noise_sigma * eps
            )
            language = split_language[split]
            key = (language, domain, split)
            ds_labels = None if split == "unlabeled" else labels
            data.datasets[key] = Dataset(h, ds_labels, language, domain, split)
            data.shared_latents[key] = z_s
            data.private_latents[key] = z_d
            data.all_labels[key] = labels
    return data


# ---------------------------------------------------------------------------
# 2-D projection for feature visualization


def pca_project_2d(
    features: Matrix,
    seed: int = 0,
    max_iter: int = 1000,
    tol: float = 1e-13,
) -> tuple[np.ndarray, np.ndarray]:
    """Project rows onto the top two principal directions via power iteration
    with deflation, stopping once successive unit vectors differ by less than
    ``tol`` in norm. Returns (coords (n, 2), components (2, dim))."""
    x = ensure_matrix(features, "features")
    n, dim = x.shape
    if n < 2 or dim < 2:
        raise ShapeError(f"projection needs at least 2 rows and 2 columns, got {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / n
    if float(np.trace(cov)) <= 1e-18:
        raise DegenerateDataError("features have zero variance; nothing to project")

    rng = spawn_rng(seed, 30)
    components = []
    for _ in range(2):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            nxt = cov @ v
            norm = np.linalg.norm(nxt)
            if norm <= 1e-18:
                # direction lies in the null space; keep current vector
                break
            nxt /= norm
            if nxt @ v < 0.0:
                nxt = -nxt
            step = float(np.linalg.norm(nxt - v))
            v = nxt
            if step < tol:
                break
        lam = float(v @ cov @ v)
        components.append(v)
        cov = cov - lam * np.outer(v, v)
    comp = np.stack(components)
    return centered @ comp.T, comp


def write_projection(path, coords: np.ndarray, tags) -> None:
    """CSV export with header x,y,tag; one row per sample."""
    coords = np.asarray(coords, dtype=np.float64)
    tags = list(tags)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coords must be (n, 2), got {coords.shape}")
    if len(tags) != coords.shape[0]:
        raise ShapeError("tag count does not match row count")
    lines = ["x,y,tag"]
    for (px, py), tag in zip(coords, tags):
        lines.append(f"{float(px)!r},{float(py)!r},{tag}")
    Path(path).write_text("\n".join(lines) + "\n")
