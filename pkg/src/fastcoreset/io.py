"""Dataset and embedding files: CSV and the little-endian ``rawf32`` format.

``rawf32`` layout: a 16-byte header (4-byte magic, ``u32`` N, ``u32`` D,
``u32`` reserved zero), then ``N*D`` float32 values row-major. The magic
``FCRS`` marks a plain matrix; ``FCRL`` appends ``N`` int32 labels.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, InvalidParameterError
from .manifold_graph import ZERO_EIGENVALUE_TOL, DatasetMatrix, ManifoldGraph, SpectralEmbedding

MAGIC_PLAIN = b"FCRS"
MAGIC_LABELED = b"FCRL"
HEADER = struct.Struct("<4sIII")
FORMATS = ("csv", "rawf32")


def _check_finite(values: np.ndarray) -> None:
    bad = np.argwhere(~np.isfinite(values))
    if len(bad):
        r, c = bad[0]
        raise InvalidParameterError(f"non-finite value at row {r}, column {c}")


def _guess_format(path: Path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(4)
    return "rawf32" if head in (MAGIC_PLAIN, MAGIC_LABELED) else "csv"


def read_matrix_rawf32(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Return the float32 matrix and the labels (``None`` for ``FCRS``)."""
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size:
        raise FormatError(f"{path}: file shorter than the 16-byte header")
    magic, n, d, _ = HEADER.unpack_from(blob)
    if magic not in (MAGIC_PLAIN, MAGIC_LABELED):
        raise FormatError(f"{path}: bad magic {magic!r}")
    if n == 0 or d == 0:
        raise InvalidParameterError(f"{path}: empty dataset (N={n}, D={d})")
    labeled = magic == MAGIC_LABELED
    expected = HEADER.size + 4 * n * d + (4 * n if labeled else 0)
    if len(blob) != expected:
        raise FormatError(f"{path}: header says N={n}, D={d} ({expected} bytes) but file has {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", count=n * d, offset=HEADER.size).reshape(n, d)
    labels = None
    if labeled:
        labels = np.frombuffer(blob, dtype="<i4", count=n, offset=HEADER.size + 4 * n * d).astype(np.int64)
    return values.astype(np.float32), labels


def write_rawf32(path, values, labels=None) -> None:
    """Write a matrix (cast to float32) with optional int32 labels."""
    x = np.ascontiguousarray(values, dtype="<f4")
    if x.ndim != 2:
        raise InvalidParameterError("rawf32 holds a 2-D matrix")
    n, d = x.shape
    magic = MAGIC_PLAIN if labels is None else MAGIC_LABELED
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(magic, n, d, 0))
        fh.write(x.tobytes())
        if labels is not None:
            lab = np.asarray(labels)
            if lab.shape != (n,):
                raise InvalidParameterError("need one label per row")
            fh.write(np.ascontiguousarray(lab, dtype="<i4").tobytes())


def read_csv(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Numeric CSV with an optional header; a final column named ``label`` holds labels."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise InvalidParameterError(f"{path}: empty dataset")
    header = None
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    if not rows:
        raise InvalidParameterError(f"{path}: empty dataset")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise FormatError(f"{path}: row {i} has {len(r)} fields, expected {width}")
    try:
        table = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric field ({exc})") from None
    labels = None
    if header is not None and header[-1].lower() == "label":
        raw = table[:, -1]
        if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
            raise FormatError(f"{path}: label column must hold integers")
        labels, table = raw.astype(np.int64), table[:, :-1]
    if table.shape[1] == 0:
        raise InvalidParameterError(f"{path}: no feature columns")
    return table, labels


def write_csv(path, values, labels=None) -> None:
    x = np.asarray(values, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(x.shape[1])] + (["label"] if labels is not None else []))
        for i, row in enumerate(x):
            w.writerow([repr(float(v)) for v in row] + ([int(labels[i])] if labels is not None else []))


def ingest(path, fmt: Optional[str] = None) -> DatasetMatrix:
    """Load a dataset file; ``fmt`` defaults to sniffing the magic bytes."""
    path = Path(path)
    if not path.is_file():
        raise InvalidParameterError(f"{path}: no such file")
    fmt = fmt or _guess_format(path)
    if fmt not in FORMATS:
        raise InvalidParameterError(f"unknown format {fmt!r}")
    values, labels = read_matrix_rawf32(path) if fmt == "rawf32" else read_csv(path)
    _check_finite(values)
    return DatasetMatrix(np.asarray(values, dtype=np.float64), labels)


def export(data: DatasetMatrix, path, fmt: str = "rawf32") -> None:
    if fmt == "rawf32":
        write_rawf32(path, data.values, data.labels)
    elif fmt == "csv":
        write_csv(path, data.values, data.labels)
    else:
        raise InvalidParameterError(f"unknown format {fmt!r}")


EDGES_FILE = "edges.csv"
EIGENVALUES_FILE = "eigenvalues.txt"
EMBEDDING_FILE = "embedding.f32"


def save_graph(directory, graph: ManifoldGraph, embedding: SpectralEmbedding) -> None:
    """Write the edge list (``i < j``), the solver spectrum and the float32 embedding."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    upper = sp.triu(graph.adjacency, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    with open(directory / EDGES_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "weight"])
        for i, j, v in zip(upper.row[order], upper.col[order], upper.data[order]):
            w.writerow([int(i), int(j), repr(float(v))])
    (directory / EIGENVALUES_FILE).write_text("".join(f"{float(v)!r}\n" for v in embedding.spectrum))
    write_rawf32(directory / EMBEDDING_FILE, embedding.features)


def load_graph(directory, n_rows: Optional[int] = None) -> tuple[ManifoldGraph, SpectralEmbedding]:
    """Inverse of :func:`save_graph`; embedding values come back at float32 precision."""
    directory = Path(directory)
    for name in (EDGES_FILE, EIGENVALUES_FILE, EMBEDDING_FILE):
        if not (directory / name).is_file():
            raise InvalidParameterError(f"{directory}: missing {name}")
    feats, _ = read_matrix_rawf32(directory / EMBEDDING_FILE)
    n, d = feats.shape
    if n_rows is not None and n != n_rows:
        raise FormatError(f"{directory}: embedding has {n} rows, dataset has {n_rows}")
    with open(directory / EDGES_FILE, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    try:
        i = np.array([int(r[0]) for r in rows], dtype=np.int64)
        j = np.array([int(r[1]) for r in rows], dtype=np.int64)
        w = np.array([float(r[2]) for r in rows], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{directory / EDGES_FILE}: bad edge row ({exc})") from None
    if len(i) and (np.any(i >= j) or j.max() >= n or i.min() < 0):
        raise FormatError(f"{directory / EDGES_FILE}: edges must satisfy 0 <= i < j < {n}")
    adj = sp.coo_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n))
    graph = ManifoldGraph.from_adjacency(adj)
    try:
        spectrum = np.array([float(v) for v in (directory / EIGENVALUES_FILE).read_text().split()])
    except ValueError as exc:
        raise FormatError(f"{directory / EIGENVALUES_FILE}: {exc}") from None
    kept = spectrum[spectrum > ZERO_EIGENVALUE_TOL][:d]
    if len(kept) != d:
        raise FormatError(f"{directory}: spectrum lists {len(kept)} non-zero eigenvalues, embedding has {d}")
    return graph, SpectralEmbedding(feats.astype(np.float64), kept, spectrum)
