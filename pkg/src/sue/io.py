"""On-disk formats for embedding sets, pair manifests, and model containers.

Binary embedding layout: 4-byte magic ``SUE1``, little-endian uint32 row
count, little-endian uint32 column count, then rows of little-endian
float32, row-major. Labels live in an integer sidecar at ``path + ".labels"``.
Pair manifests are TSV files of zero-based ``i<TAB>j`` index pairs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SUE1"
_HEADER = struct.Struct("<4sII")


@dataclass
class EmbeddingSet:
    """A modality's point cloud: an n x d matrix of finite features."""

    data: np.ndarray
    name: str = ""
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise FormatError(
                f"embedding set '{self.name}': need an n x d matrix with n,d >= 1, "
                f"got shape {self.data.shape}"
            )
        if not np.isfinite(self.data).all():
            bad = np.argwhere(~np.isfinite(self.data))[0]
            raise FormatError(
                f"embedding set '{self.name}': non-finite value at row {bad[0]}, column {bad[1]}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.data.shape[0],):
                raise FormatError(
                    f"embedding set '{self.name}': {self.labels.shape[0]} labels "
                    f"for {self.data.shape[0]} rows"
                )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass
class PairManifest:
    """Index pairs (i into modality X, j into modality Y), duplicates rejected."""

    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        seen = set(map(tuple, self.pairs))
        if len(seen) != len(self.pairs):
            raise FormatError("pair manifest contains duplicate (i, j) entries")

    @property
    def m(self) -> int:
        return self.pairs.shape[0]

    def validate_range(self, n1: int, n2: int) -> "PairManifest":
        if self.m:
            if self.pairs.min() < 0:
                raise FormatError("pair manifest contains negative indices")
            if self.pairs[:, 0].max() >= n1 or self.pairs[:, 1].max() >= n2:
                bad = self.pairs[(self.pairs[:, 0] >= n1) | (self.pairs[:, 1] >= n2)][0]
                raise FormatError(
                    f"pair ({bad[0]}, {bad[1]}) out of range for sets of size {n1}, {n2}"
                )
        return self


def _labels_path(path) -> Path:
    return Path(str(path) + ".labels")


def _read_labels_sidecar(path) -> np.ndarray | None:
    sidecar = _labels_path(path)
    if not sidecar.exists():
        return None
    labels = []
    for lineno, line in enumerate(sidecar.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            labels.append(int(line))
        except ValueError as exc:
            raise FormatError(f"{sidecar}: line {lineno}: not an integer label") from exc
    return np.asarray(labels, dtype=np.int64)


def _write_labels_sidecar(path, labels: np.ndarray) -> None:
    _labels_path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def read_embeddings(path, format: str = "binary", name: str | None = None) -> EmbeddingSet:
    """Load an embedding set; the labels sidecar is picked up when present."""
    path = Path(path)
    if name is None:
        name = path.stem
    if format == "binary":
        data = _read_binary(path)
    elif format == "csv":
        data = _read_csv(path)
    else:
        raise FormatError(f"unknown embedding format '{format}'")
    return EmbeddingSet(data=data, name=name, labels=_read_labels_sidecar(path))


def write_embeddings(emb: EmbeddingSet, path, format: str = "binary") -> None:
    """Write an embedding set (and its labels sidecar when labels are present)."""
    path = Path(path)
    if format == "binary":
        _write_binary(emb.data, path)
    elif format == "csv":
        _write_csv(emb.data, path)
    else:
        raise FormatError(f"unknown embedding format '{format}'")
    if emb.labels is not None:
        _write_labels_sidecar(path, emb.labels)


def _read_binary(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes, need {_HEADER.size})")
    magic, n, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: header declares n={n}, d={d}; both must be >= 1")
    expected = _HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise FormatError(
            f"{path}: file is {len(raw)} bytes but header (n={n}, d={d}) implies {expected}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        offset = _HEADER.size + 4 * int(bad[0])
        raise FormatError(f"{path}: non-finite value at byte offset {offset}")
    return flat.astype(np.float64).reshape(n, d)


def _write_binary(data: np.ndarray, path: Path) -> None:
    n, d = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4")
    if not np.isfinite(payload).all():
        raise FormatError("refusing to write non-finite values")
    path.write_bytes(_HEADER.pack(MAGIC, n, d) + payload.tobytes())


def _read_csv(path: Path) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        try:
            row = [float(f) for f in fields]
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: unparseable float") from exc
        if any(not np.isfinite(v) for v in row):
            raise FormatError(f"{path}: line {lineno}: non-finite value")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise FormatError(
                f"{path}: line {lineno}: {len(row)} columns, expected {width}"
            )
        rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def _write_csv(data: np.ndarray, path: Path) -> None:
    # %.9g keeps float32-sourced values well within the 1e-6 round-trip contract.
    lines = [",".join(f"{v:.9g}" for v in row) for row in data]
    path.write_text("\n".join(lines) + "\n")


def read_pairs(path, n1: int, n2: int) -> PairManifest:
    """Load a TSV pair manifest and validate indices against the set sizes."""
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise FormatError(f"{path}: line {lineno}: expected 'i<TAB>j'")
        try:
            pairs.append((int(fields[0]), int(fields[1])))
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: non-integer index") from exc
    manifest = PairManifest(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))
    return manifest.validate_range(n1, n2)


def write_pairs(manifest: PairManifest, path) -> None:
    Path(path).write_text("".join(f"{i}\t{j}\n" for i, j in manifest.pairs))


def content_hash(data: np.ndarray) -> str:
    """Stable hash of a float array's shape and bytes (checkpoint validation)."""
    import hashlib

    h = hashlib.sha256()
    h.update(str(data.shape).encode())
    h.update(np.ascontiguousarray(data, dtype=np.float64).tobytes())
    return h.hexdigest()
