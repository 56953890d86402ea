"""Domain types, manifest I/O, seeding and the synthetic multi-domain generator."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

BONAFIDE = "bonafide"
MORPH_PREFIX = "morph:"
MANIFEST_FIXED_COLUMNS = ("id", "subject_id", "label", "domain")
TOOL_NAMES = ("FaceFusion", "FaceMorpher", "OpenCV-Morpher", "UBO-Morpher")
SAMPLES_PER_SUBJECT = 4
U64_MASK = (1 << 64) - 1


class ManifestError(ValueError):
    """Raised for malformed manifest rows; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ValueError):
    pass


class InfeasibleError(ValidationError):
    """The inputs are well-formed but too small for the requested operation."""


@dataclass(frozen=True, order=True)
class ClassLabel:
    """Bona fide, or a morph produced by a named tool."""

    tool: str | None = None

    def __post_init__(self):
        if self.tool is not None and not self.tool:
            raise ValidationError("morph label needs a non-empty tool name")

    @classmethod
    def bonafide(cls) -> "ClassLabel":
        return cls(None)

    @classmethod
    def morph(cls, tool: str) -> "ClassLabel":
        return cls(tool)

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        if text == BONAFIDE:
            return cls(None)
        if text.startswith(MORPH_PREFIX):
            return cls(text[len(MORPH_PREFIX):])
        raise ValidationError(f"unknown label {text!r}; expected 'bonafide' or 'morph:<tool>'")

    @property
    def is_bonafide(self) -> bool:
        return self.tool is None

    def __str__(self) -> str:
        return BONAFIDE if self.tool is None else MORPH_PREFIX + self.tool


@dataclass(frozen=True)
class LabeledEmbedding:
    id: str
    subject_id: str
    label: ClassLabel
    domain: str
    vector: np.ndarray


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered, immutable collection of labelled feature vectors.

    Storage is columnar: ``vectors`` is an ``(n, dim)`` float64 matrix and the
    metadata tuples are aligned with its rows.
    """

    name: str
    ids: tuple[str, ...]
    subject_ids: tuple[str, ...]
    labels: tuple[ClassLabel, ...]
    domains: tuple[str, ...]
    vectors: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vectors", _frozen(self.vectors))
        n = len(self.ids)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != n:
            raise ValidationError(f"vectors must be an ({n}, dim) matrix, got {self.vectors.shape}")
        if not (len(self.subject_ids) == len(self.labels) == len(self.domains) == n):
            raise ValidationError("metadata columns must all have one entry per vector")
        if n and self.vectors.shape[1] == 0:
            raise ValidationError("dimension must be positive")
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("vectors contain NaN or infinity")
        index = {}
        for i, id_ in enumerate(self.ids):
            if id_ in index:
                raise ValidationError(f"duplicate id {id_!r}")
            index[id_] = i
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_embeddings(cls, name: str, embeddings: Sequence[LabeledEmbedding], dim: int | None = None) -> "Dataset":
        if embeddings:
            vectors = np.stack([np.asarray(e.vector, dtype=np.float64) for e in embeddings])
        else:
            vectors = np.zeros((0, dim or 0))
        return cls(
            name,
            tuple(e.id for e in embeddings),
            tuple(e.subject_id for e in embeddings),
            tuple(e.label for e in embeddings),
            tuple(e.domain for e in embeddings),
            vectors,
        )

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[LabeledEmbedding]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> LabeledEmbedding:
        return LabeledEmbedding(self.ids[i], self.subject_ids[i], self.labels[i], self.domains[i], self.vectors[i])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def embeddings(self) -> list[LabeledEmbedding]:
        return list(self)

    def index_of(self, id_: str) -> int:
        return self._index[id_]

    def classes(self) -> list[ClassLabel]:
        """Distinct labels, bona fide first, then tools in sorted order."""
        return sorted(set(self.labels), key=lambda c: (c.tool is not None, c.tool or ""))

    def indices_of(self, label: ClassLabel) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.labels) if c == label], dtype=np.int64)

    def subset(self, indices: Iterable[int], name: str | None = None) -> "Dataset":
        idx = [int(i) for i in indices]
        return Dataset(
            name or self.name,
            tuple(self.ids[i] for i in idx),
            tuple(self.subject_ids[i] for i in idx),
            tuple(self.labels[i] for i in idx),
            tuple(self.domains[i] for i in idx),
            self.vectors[idx] if idx else np.zeros((0, self.dim)),
        )

    def bonafide(self) -> "Dataset":
        return self.subset([i for i, c in enumerate(self.labels) if c.is_bonafide])

    def concat(self, other: "Dataset", name: str | None = None) -> "Dataset":
        if len(self) and len(other) and self.dim != other.dim:
            raise ValidationError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return Dataset(
            name or self.name,
            self.ids + other.ids,
            self.subject_ids + other.subject_ids,
            self.labels + other.labels,
            self.domains + other.domains,
            np.concatenate([self.vectors, other.vectors]) if len(other) else self.vectors,
        )


# ---------------------------------------------------------------------------
# Seeding


def derive_seed(base: int, *keys) -> int:
    """Derive a child 64-bit seed from ``base`` and any number of keys.

    The derivation hashes the textual form, so it is stable across machines
    and Python versions.
    """
    text = ":".join([str(int(base) & U64_MASK), *map(str, keys)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & U64_MASK))


# ---------------------------------------------------------------------------
# Manifest I/O


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def load_manifest(path: str | Path, name: str | None = None) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    return parse_manifest(text, name or path.stem)


def parse_manifest(text: str, name: str = "manifest") -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("missing header", 1) from None
    if tuple(header[:4]) != MANIFEST_FIXED_COLUMNS or len(header) < 5:
        raise ManifestError("header must be id,subject_id,label,domain,v0,...", 1)
    dim = len(header) - 4
    expected = [f"v{j}" for j in range(dim)]
    if header[4:] != expected:
        raise ManifestError("vector columns must be named v0..v{D-1} in order", 1)

    ids, subjects, labels, domains, rows = [], [], [], [], []
    seen: dict[str, int] = {}
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(header):
            raise ManifestError(
                f"expected {len(header)} columns ({dim}-dimensional vector), got {len(row)}", line
            )
        id_, subject, label, domain = row[:4]
        if id_ in seen:
            raise ValidationError(f"line {line}: duplicate id {id_!r} (first seen on line {seen[id_]})")
        seen[id_] = line
        try:
            lab = ClassLabel.parse(label)
        except ValidationError as exc:
            raise ManifestError(str(exc), line) from None
        try:
            vec = [float(v) for v in row[4:]]
        except ValueError:
            raise ManifestError("non-numeric vector entry", line) from None
        if not all(math.isfinite(v) for v in vec):
            raise ManifestError("non-finite vector entry", line)
        ids.append(id_)
        subjects.append(subject)
        labels.append(lab)
        domains.append(domain)
        rows.append(vec)
    if not rows:
        raise ManifestError("empty dataset")
    return Dataset(name, tuple(ids), tuple(subjects), tuple(labels), tuple(domains), np.array(rows))


def manifest_text(ds: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*MANIFEST_FIXED_COLUMNS, *(f"v{j}" for j in range(ds.dim))])
    for i in range(len(ds)):
        writer.writerow(
            [ds.ids[i], ds.subject_ids[i], str(ds.labels[i]), ds.domains[i], *map(format_float, ds.vectors[i])]
        )
    return buf.getvalue()


def write_manifest(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(manifest_text(ds))
    return path


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic two-domain benchmark.

    Class means sit on the vertices of a randomly rotated regular simplex
    with edge ``CLASS_SCALE * cluster_spread``. ``domain_shift`` is either an
    explicit vector or a scalar norm; a scalar is turned into a vector by
    drawing a direction uniformly on the sphere.
    """

    n_classes: int = 5
    dim: int = 64
    samples_per_class: int = 200
    cluster_spread: float = 0.2
    domain_shift: float | tuple[float, ...] = 3.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.domain_shift, (list, tuple, np.ndarray)):
            object.__setattr__(self, "domain_shift", tuple(float(v) for v in self.domain_shift))
        if self.n_classes < 2:
            raise ValidationError("n_classes must be >= 2")
        if self.dim < 1:
            raise ValidationError("dim must be >= 1")
        if self.samples_per_class < 1:
            raise ValidationError("samples_per_class must be >= 1")
        if not self.cluster_spread > 0:
            raise ValidationError("cluster_spread must be > 0")
        if isinstance(self.domain_shift, tuple):
            if len(self.domain_shift) != self.dim:
                raise ValidationError(f"domain_shift vector must have {self.dim} entries")
        elif not self.domain_shift >= 0:
            raise ValidationError("scalar domain_shift must be >= 0")
        if not 0 <= int(self.seed) <= U64_MASK:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        required = ("n_classes", "dim", "samples_per_class", "cluster_spread", "domain_shift", "seed")
        for key in required:
            if key not in d:
                raise ValidationError(f"synthetic spec is missing field {key!r}")
        unknown = set(d) - set(required)
        if unknown:
            raise ValidationError(f"synthetic spec has unknown fields {sorted(unknown)}")
        try:
            shift = d["domain_shift"]
            shift = tuple(float(v) for v in shift) if isinstance(shift, list) else float(shift)
            return cls(
                n_classes=int(d["n_classes"]),
                dim=int(d["dim"]),
                samples_per_class=int(d["samples_per_class"]),
                cluster_spread=float(d["cluster_spread"]),
                domain_shift=shift,
                seed=int(d["seed"]),
            )
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"synthetic spec: {exc}") from None

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        shift = list(self.domain_shift) if isinstance(self.domain_shift, tuple) else self.domain_shift
        return {
            "n_classes": self.n_classes,
            "dim": self.dim,
            "samples_per_class": self.samples_per_class,
            "cluster_spread": self.cluster_spread,
            "domain_shift": shift,
            "seed": self.seed,
        }


# Distance between two class means, in units of cluster_spread.
CLASS_SCALE = 5.0


def synthetic_labels(n_classes: int) -> list[ClassLabel]:
    labels = [ClassLabel.bonafide()]
    for j in range(1, n_classes):
        name = TOOL_NAMES[j - 1] if j - 1 < len(TOOL_NAMES) else f"Tool{j}"
        labels.append(ClassLabel.morph(name))
    return labels


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """Vertices of a randomly rotated regular simplex, one per class.

    Every pair of means sits ``CLASS_SCALE * cluster_spread`` apart. When
    ``dim < n_classes`` a simplex does not fit and the means fall back to
    i.i.d. Gaussian draws with the same root-mean-square separation.
    """
    rng = make_rng(derive_seed(spec.seed, "class-means"))
    n, dim = spec.n_classes, spec.dim
    edge = CLASS_SCALE * spec.cluster_spread
    if dim < n:
        return rng.standard_normal((n, dim)) * edge / math.sqrt(2 * dim)
    frame, _ = np.linalg.qr(rng.standard_normal((dim, n)))
    vertices = np.eye(n) - 1.0 / n
    return vertices @ frame.T * (edge / math.sqrt(2))


def shift_vector(spec: SyntheticSpec) -> np.ndarray:
    """The translation applied to every target-domain class mean.

    A scalar magnitude gets a direction drawn uniformly from the unit sphere.
    """
    if isinstance(spec.domain_shift, tuple):
        return np.array(spec.domain_shift, dtype=np.float64)
    if spec.domain_shift == 0:
        return np.zeros(spec.dim)
    rng = make_rng(derive_seed(spec.seed, "shift-direction"))
    direction = rng.standard_normal(spec.dim)
    return direction / np.linalg.norm(direction) * spec.domain_shift


def _draw_domain(spec: SyntheticSpec, means: np.ndarray, domain: str) -> Dataset:
    rng = make_rng(derive_seed(spec.seed, "samples", domain))
    labels = synthetic_labels(spec.n_classes)
    n = spec.samples_per_class
    ids, subjects, labs, vecs = [], [], [], []
    for c, label in enumerate(labels):
        noise = rng.standard_normal((n, spec.dim)) * spec.cluster_spread
        vecs.append(means[c] + noise)
        for i in range(n):
            ids.append(f"{domain}-c{c}-{i:05d}")
            subjects.append(f"{domain}-c{c}-s{i // SAMPLES_PER_SUBJECT:04d}")
            labs.append(label)
    return Dataset(domain, tuple(ids), tuple(subjects), tuple(labs), (domain,) * len(ids), np.concatenate(vecs))


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Draw a source domain and a translated target domain sharing one class structure."""
    means = class_means(spec)
    source = _draw_domain(spec, means, "source")
    target = _draw_domain(spec, means + shift_vector(spec), "target")
    return source, target


# ---------------------------------------------------------------------------
# Splitting


def split_subject_disjoint(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split by subject so no identity appears on both sides.

    The number of training subjects is ``ceil(train_fraction * n_subjects)``,
    clipped so that the test side keeps at least one subject.
    """
    if len(ds) == 0:
        raise ValidationError("cannot split an empty dataset")
    if not 0 < train_fraction < 1:
        raise ValidationError("train_fraction must lie in (0, 1)")
    subjects = sorted(set(ds.subject_ids))
    if len(subjects) < 2:
        raise ValidationError("need at least 2 distinct subjects to split")
    n_train = min(len(subjects) - 1, max(1, math.ceil(train_fraction * len(subjects) - 1e-12)))
    order = make_rng(seed).permutation(len(subjects))
    train_subjects = {subjects[i] for i in order[:n_train]}
    train_idx = [i for i, s in enumerate(ds.subject_ids) if s in train_subjects]
    test_idx = [i for i, s in enumerate(ds.subject_ids) if s not in train_subjects]
    return ds.subset(train_idx, f"{ds.name}-train"), ds.subset(test_idx, f"{ds.name}-test")
