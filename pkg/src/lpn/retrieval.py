"""Euclidean ranking, Recall@K / AP, ablation probes and embedding file I/O.

Embedding file layout (little endian)::

    magic    4 bytes  b"LPNE"
    version  uint16   1
    dtype    uint8    1 = float32, 2 = float64
    reserved uint8
    N        uint64   rows
    D        uint64   columns
    n_parts  uint32   parts concatenated along D, each D / n_parts wide
    matrix   N * D    row-major
    ids      N        int64 class ids (DISTRACTOR_ID marks never-relevant rows)
    meta_len uint32
    meta     meta_len bytes of UTF-8 JSON: {"platform", "split", "paths"}
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .data import DatasetManifest, load_image
from .model import LPN, embed_images
from .transforms import rotate_images, shift_images

MAGIC = b"LPNE"
VERSION = 1
DISTRACTOR_ID = -1
_HEADER = struct.Struct("<4sHBBQQI")
_DTYPES = {1: np.float32, 2: np.float64}
REPORT_COLUMNS = ("task", "transform", "param", "R@1", "R@5", "R@10", "R@top1pct", "AP")


@dataclass
class EmbeddingSet:
    matrix: np.ndarray
    ids: np.ndarray
    platform: str = ""
    split: str = ""
    n_parts: int = 1
    paths: tuple[str, ...] = ()

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {self.matrix.shape}")
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if len(self.ids) != len(self.matrix):
            raise ValueError(f"{len(self.matrix)} rows but {len(self.ids)} ids")
        if self.matrix.shape[1] % self.n_parts:
            raise ValueError(f"D={self.matrix.shape[1]} is not divisible by n_parts={self.n_parts}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embedding matrix contains non-finite values")
        self.paths = tuple(self.paths)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def parts(self) -> np.ndarray:
        """``(N, n_parts, D / n_parts)`` view, part 1 first."""
        return self.matrix.reshape(len(self), self.n_parts, -1)

    def select_parts(self, parts) -> "EmbeddingSet":
        """Concatenate only the listed 1-based parts, in the order given."""
        parts = list(parts)
        if not parts or any(not 1 <= p <= self.n_parts for p in parts):
            raise ValueError(f"parts {parts} must be a non-empty subset of 1..{self.n_parts}")
        sub = self.parts()[:, [p - 1 for p in parts]].reshape(len(self), -1)
        return EmbeddingSet(sub, self.ids, self.platform, self.split, len(parts), self.paths)

    @classmethod
    def from_parts(cls, parts: np.ndarray, ids, **meta) -> "EmbeddingSet":
        parts = np.asarray(parts)
        return cls(parts.reshape(len(parts), -1), ids, n_parts=parts.shape[1], **meta)


@dataclass
class RankingResult:
    order: np.ndarray  # (Nq, Ng) gallery indices, nearest first
    relevant: np.ndarray  # (Nq, Ng) bool, aligned with ``order``

    @property
    def gallery_size(self) -> int:
        return self.order.shape[1]


def rank(queries: EmbeddingSet, gallery: EmbeddingSet, chunk=512) -> RankingResult:
    """Ascending Euclidean distance per query; ties go to the lower gallery index."""
    if queries.dim != gallery.dim:
        raise ValueError(f"query dim {queries.dim} != gallery dim {gallery.dim}")
    G = gallery.matrix.astype(np.float64)
    orders = []
    for start in range(0, len(queries), chunk):
        Q = queries.matrix[start:start + chunk].astype(np.float64)
        d = cdist(Q, G, "sqeuclidean")
        orders.append(np.argsort(d, axis=1, kind="stable"))
    order = np.concatenate(orders) if orders else np.zeros((0, len(gallery)), dtype=np.int64)
    relevant = gallery.ids[order] == queries.ids[:, None]
    return RankingResult(order, relevant)


def recall_at_k(r: RankingResult, k: int) -> float:
    """Fraction of queries with at least one relevant item in the top ``k`` (``k`` clamped to the gallery)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(r.relevant) == 0:
        return 0.0
    k = min(k, r.gallery_size)
    return float(np.mean(r.relevant[:, :k].any(axis=1)))


@dataclass
class APResult:
    per_query: np.ndarray  # NaN for excluded queries
    mean: float
    excluded: int


def average_precision(r: RankingResult) -> APResult:
    """Mean of precision-at-rank over each query's relevant items.

    Queries without any relevant gallery item are excluded and counted.
    """
    rel = r.relevant
    # extended precision, rounded once, so small rational cases come out correctly rounded
    hits = np.cumsum(rel, axis=1).astype(np.longdouble)
    ranks = np.arange(1, r.gallery_size + 1, dtype=np.longdouble)
    n_rel = rel.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_query = (np.where(rel, hits / ranks, 0.0).sum(axis=1) / n_rel).astype(np.float64)
    per_query = np.where(n_rel > 0, per_query, np.nan)
    valid = n_rel > 0
    mean = float(per_query[valid].mean()) if valid.any() else float("nan")
    return APResult(per_query, mean, int((~valid).sum()))


def top1pct_k(gallery_size: int) -> int:
    return max(1, math.ceil(0.01 * gallery_size))


def evaluate(r: RankingResult) -> dict:
    metrics = {f"R@{k}": recall_at_k(r, k) for k in (1, 5, 10)}
    metrics["R@top1pct"] = recall_at_k(r, top1pct_k(r.gallery_size))
    ap = average_precision(r)
    metrics["AP"] = ap.mean
    metrics["excluded"] = ap.excluded
    return metrics


def inject_distractors(gallery: EmbeddingSet, extra: EmbeddingSet) -> EmbeddingSet:
    """Append ``extra`` rows to the gallery with the reserved never-matching id."""
    if len(extra) == 0:
        return gallery
    if extra.dim != gallery.dim:
        raise ValueError(f"distractor dim {extra.dim} != gallery dim {gallery.dim}")
    return EmbeddingSet(np.concatenate([gallery.matrix, extra.matrix.astype(gallery.matrix.dtype)]),
                        np.concatenate([gallery.ids, np.full(len(extra), DISTRACTOR_ID)]),
                        gallery.platform, gallery.split, gallery.n_parts,
                        gallery.paths + tuple(extra.paths or ("",) * len(extra)))


# --------------------------------------------------------------------------- embedding + probes

def load_images(manifest: DatasetManifest, size: int) -> np.ndarray:
    return np.stack([load_image(p, size, dtype=np.uint8) for p in manifest.paths])


def embed_manifest(model: LPN, manifest: DatasetManifest, images=None, batch_size=32) -> EmbeddingSet:
    if images is None:
        images = load_images(manifest, model.cfg.input_size)
    parts = embed_images(model, images, manifest.platform_id, batch_size)
    return EmbeddingSet.from_parts(parts, manifest.labels, platform=manifest.platform,
                                   split=manifest.split, paths=tuple(p for p, _ in manifest.entries))


def _probe(model, images, ids, gallery, platform, transform):
    q = EmbeddingSet.from_parts(embed_images(model, images, platform, transform=transform), ids)
    return evaluate(rank(q, gallery))


def probe_rotation(model: LPN, images: np.ndarray, ids, gallery: EmbeddingSet, angles, platform=2) -> dict:
    """Metrics per query rotation angle; the gallery is left untouched."""
    results = {}
    for angle in angles:
        fn = None if float(angle) % 360 == 0 else (lambda x, a=float(angle): rotate_images(x, a))
        results[angle] = _probe(model, images, ids, gallery, platform, fn)
    return results


def probe_shift(model: LPN, images: np.ndarray, ids, gallery: EmbeddingSet, pixels, platform=2) -> dict:
    """Metrics per left reflect-pad shift of the queries (in input pixels)."""
    results = {}
    for p in pixels:
        fn = None if int(p) == 0 else (lambda x, p=int(p): shift_images(x, p))
        results[p] = _probe(model, images, ids, gallery, platform, fn)
    return results


def probe_part_combination(queries: EmbeddingSet, gallery: EmbeddingSet, query_parts, gallery_parts) -> dict:
    """Rank with only the selected parts on each side (the two sets may differ)."""
    q = queries.select_parts(query_parts)
    g = gallery.select_parts(gallery_parts)
    return evaluate(rank(q, g))


# --------------------------------------------------------------------------- files

def write_embeddings(path, es: EmbeddingSet) -> None:
    matrix = np.ascontiguousarray(es.matrix)
    code = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}.get(matrix.dtype)
    if code is None:
        matrix = matrix.astype(np.float32)
        code = 1
    meta = json.dumps({"platform": es.platform, "split": es.split, "paths": list(es.paths)}).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, code, 0, len(es), es.dim, es.n_parts))
        fh.write(matrix.astype(matrix.dtype.newbyteorder("<"), copy=False).tobytes())
        fh.write(es.ids.astype("<i8").tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def read_embeddings(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated embedding file")
    magic, version, code, _, N, D, n_parts = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not an embedding file (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported embedding file version {version}")
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    off = _HEADER.size
    matrix = np.frombuffer(raw, dtype=dtype, count=N * D, offset=off).reshape(N, D)
    off += N * D * dtype.itemsize
    ids = np.frombuffer(raw, dtype="<i8", count=N, offset=off)
    off += N * 8
    (meta_len,) = struct.unpack_from("<I", raw, off)
    meta = json.loads(raw[off + 4: off + 4 + meta_len].decode()) if meta_len else {}
    return EmbeddingSet(matrix.astype(dtype.newbyteorder("="), copy=True), ids.astype(np.int64),
                        meta.get("platform", ""), meta.get("split", ""), int(n_parts), tuple(meta.get("paths", ())))


def embeddings_to_csv(path, es: EmbeddingSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "path"] + [f"f{k}" for k in range(es.dim)])
        paths = es.paths or ("",) * len(es)
        for cid, p, row in zip(es.ids, paths, es.matrix):
            writer.writerow([int(cid), p] + [repr(float(v)) for v in row])


@dataclass
class ReportRow:
    task: str
    transform: str
    param: str
    metrics: dict = field(default_factory=dict)

    def as_dict(self):
        d = {"task": self.task, "transform": self.transform, "param": self.param}
        for key in REPORT_COLUMNS[3:]:
            d[key] = f"{self.metrics[key]:.6f}"
        return d


def write_report(path, rows: list[ReportRow]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# R@top1pct uses k = ceil(0.01 * gallery size)\n")
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_dict())


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))
