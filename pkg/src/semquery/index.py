"""Flat exact vector index over a text column, with persistence and kmeans.

The index is an L2-normalized float32 matrix row-aligned with its source
table; search is exact cosine top-K. Directory layout: ``manifest`` (JSON)
plus ``vectors.f32`` (little-endian float32, row-major), bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .errors import IndexPersistenceError, NullCellError, SchemaError
from .table import Table

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest"
VECTORS_NAME = "vectors.f32"
KMEANS_TOL = 1e-4
KMEANS_MAX_ITERS = 100


class MockEmbedder:
    """Deterministic embedder: seeded character-trigram hashing, unit norm.

    Identical texts embed identically across runs and platforms; overlapping
    trigrams give loosely similar vectors, enough for duplicate detection.
    """

    def __init__(self, dimension: int = 64, seed: int = 0):
        self.dimension = dimension
        self.seed = seed
        self.id = "mock-ngram-d%d-s%d" % (dimension, seed)

    def _embed_one(self, text: str) -> np.ndarray:
        v = np.zeros(self.dimension, dtype=np.float64)
        padded = "^" + text + "$"
        for i in range(max(1, len(padded) - 2)):
            gram = padded[i : i + 3]
            h = int.from_bytes(
                hashlib.sha256(("%d|%s" % (self.seed, gram)).encode()).digest()[:12], "little"
            )
            idx = h % self.dimension
            v[idx] += ((h >> 32) % 2001 - 1000) / 1000.0
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            v[0] = 1.0
            norm = 1.0
        return (v / norm).astype(np.float32)

    def embed(self, texts: list[str]) -> np.ndarray:
        return np.stack([self._embed_one(t) for t in texts]) if texts else np.zeros(
            (0, self.dimension), dtype=np.float32
        )


@dataclass
class SimIndex:
    column: str
    embedder_id: str
    dimension: int
    vectors: np.ndarray  # row_count x dimension, unit rows
    content_hash: str
    metric: str = "cosine"
    embedder: object = None

    @property
    def row_count(self) -> int:
        return self.vectors.shape[0]

    def search(self, query_vec: np.ndarray, k: int) -> list[tuple[int, float]]:
        """Exact top-k rows by cosine score, descending, ties by row id."""
        scores = self.vectors @ np.asarray(query_vec, dtype=np.float32)
        k = min(k, len(scores))
        if k == 0:
            return []
        # argsort on (-score, row_id); stable sort keeps ascending id on ties
        order = np.argsort(-scores, kind="stable")[:k]
        return [(int(i), float(scores[i])) for i in order]


def _column_hash(cells: list[str]) -> str:
    h = hashlib.sha256()
    for cell in cells:
        data = cell.encode()
        h.update(len(data).to_bytes(8, "little"))
        h.update(data)
    return h.hexdigest()


def _text_cells(t: Table, col: str) -> list[str]:
    if t.kind_of(col) != "text":
        raise SchemaError("column %r has kind %r, expected text" % (col, t.kind_of(col)))
    cells = t.column(col)
    for i, cell in enumerate(cells):
        if cell is None:
            raise NullCellError("null cell in column %r" % col, i)
    return cells


def sem_index(t: Table, col: str, directory, embedder) -> SimIndex:
    """Embed a text column, persist the index, and attach it to the table."""
    cells = _text_cells(t, col)
    vectors = np.asarray(embedder.embed(cells), dtype=np.float32)
    index = SimIndex(
        column=col,
        embedder_id=embedder.id,
        dimension=embedder.dimension,
        vectors=vectors,
        content_hash=_column_hash(cells),
        embedder=embedder,
    )
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "embedder_id": index.embedder_id,
        "dimension": index.dimension,
        "metric": index.metric,
        "row_count": index.row_count,
        "column": col,
        "content_hash": index.content_hash,
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(directory, VECTORS_NAME), "wb") as fh:
        fh.write(vectors.astype("<f4").tobytes(order="C"))
    t.indexes[col] = index
    return index


def load_sem_index(t: Table, col: str, directory, embedder) -> SimIndex:
    """Load a persisted index and attach it to the table column."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise IndexPersistenceError("missing manifest in %s" % directory)
    except json.JSONDecodeError as exc:
        raise IndexPersistenceError("corrupt manifest in %s: %s" % (directory, exc))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IndexPersistenceError("unsupported index format %r" % manifest.get("format_version"))
    if manifest["column"] != col:
        raise IndexPersistenceError(
            "index in %s is for column %r, not %r" % (directory, manifest["column"], col)
        )
    if manifest["embedder_id"] != embedder.id or manifest["dimension"] != embedder.dimension:
        raise IndexPersistenceError(
            "embedder mismatch: index built with %s (dim %d), configured %s (dim %d)"
            % (manifest["embedder_id"], manifest["dimension"], embedder.id, embedder.dimension)
        )
    if manifest["row_count"] != t.row_count:
        raise IndexPersistenceError(
            "index row_count %d != table row_count %d" % (manifest["row_count"], t.row_count)
        )
    cells = _text_cells(t, col)
    if _column_hash(cells) != manifest["content_hash"]:
        raise IndexPersistenceError("column %r content changed since indexing" % col)
    with open(os.path.join(directory, VECTORS_NAME), "rb") as fh:
        raw = fh.read()
    vectors = np.frombuffer(raw, dtype="<f4").reshape(manifest["row_count"], manifest["dimension"])
    index = SimIndex(
        column=col,
        embedder_id=manifest["embedder_id"],
        dimension=manifest["dimension"],
        vectors=np.ascontiguousarray(vectors),
        content_hash=manifest["content_hash"],
        metric=manifest["metric"],
        embedder=embedder,
    )
    t.indexes[col] = index
    return index


def _require_index(t: Table, col: str) -> SimIndex:
    if col not in t.indexes:
        raise IndexPersistenceError("no similarity index loaded for column %r" % col)
    return t.indexes[col]


def sem_search(t: Table, col: str, query: str, k: int, n_rerank: int | None = None,
               return_scores: bool = False, reranker=None) -> Table:
    """Top-k rows of the indexed column most similar to the query text."""
    if k < 1:
        raise ValueError("K must be >= 1")
    index = _require_index(t, col)
    if n_rerank is not None:
        if n_rerank > k:
            raise ValueError("n_rerank %d exceeds K %d" % (n_rerank, k))
        if reranker is None:
            raise ValueError("n_rerank requires a reranker")
    query_vec = index.embedder.embed([query])[0]
    hits = index.search(query_vec, k)
    if n_rerank is not None:
        rescored = [(rid, reranker.score(query, t.cell(rid, col))) for rid, _ in hits]
        rescored.sort(key=lambda pair: (-pair[1], pair[0]))
        hits = rescored[:n_rerank]
    out = t.select_rows([rid for rid, _ in hits])
    if return_scores:
        out = out.with_column("score", "float", [s for _, s in hits])
    return out


def sem_sim_join(left: Table, right: Table, left_on: str, right_on: str, k: int,
                 return_scores: bool = False) -> Table:
    """One output row per (left row, each of its K most similar right rows)."""
    if k < 1:
        raise ValueError("K must be >= 1")
    index = _require_index(right, right_on)
    if k > right.row_count:
        log.warning("sem_sim_join: K=%d exceeds right row_count=%d; returning all", k, right.row_count)
    if left_on in left.indexes:
        left_vecs = left.indexes[left_on].vectors
    else:
        left_vecs = index.embedder.embed(_text_cells(left, left_on))
    left_ids, right_ids, scores = [], [], []
    for i in range(left.row_count):
        for rid, score in index.search(left_vecs[i], k):
            left_ids.append(i)
            right_ids.append(rid)
            scores.append(score)
    out = merge_rows(left, right, list(zip(left_ids, right_ids)))
    if return_scores:
        out = out.with_column("score", "float", scores)
    return out


def merged_join_schema(left: Table, right: Table) -> tuple[list, dict, dict]:
    """Output schema for joins; name collisions get :left/:right suffixes."""
    left_names = set(left.column_names)
    right_names = set(right.column_names)
    clash = left_names & right_names
    left_map = {n: (n + ":left" if n in clash else n) for n in left.column_names}
    right_map = {n: (n + ":right" if n in clash else n) for n in right.column_names}
    schema = [(left_map[n], k) for n, k in left.schema] + [(right_map[n], k) for n, k in right.schema]
    return schema, left_map, right_map


def merge_rows(left: Table, right: Table, pairs: list[tuple[int | None, int | None]]) -> Table:
    """Materialize joined rows; a None id on either side yields nulls there."""
    schema, left_map, right_map = merged_join_schema(left, right)
    cols = {name: [] for name, _ in schema}
    for li, ri in pairs:
        for n in left.column_names:
            cols[left_map[n]].append(None if li is None else left.columns[n][li])
        for n in right.column_names:
            cols[right_map[n]].append(None if ri is None else right.columns[n][ri])
    return Table.from_columns(schema, cols)


def kmeans(vectors: np.ndarray, n_clusters: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Seeded kmeans++ init followed by Lloyd iterations.

    Returns (assignments, centroids, per-iteration objective values); the
    objective (sum of squared distances) is non-increasing across iterations.
    """
    n, _ = vectors.shape
    if not 1 <= n_clusters <= n:
        raise ValueError("cluster count %d out of range [1, %d]" % (n_clusters, n))
    rng = np.random.RandomState(seed)
    x = vectors.astype(np.float64)

    centroids = np.empty((n_clusters, x.shape[1]))
    centroids[0] = x[rng.randint(n)]
    closest_sq = np.sum((x - centroids[0]) ** 2, axis=1)
    for c in range(1, n_clusters):
        total = closest_sq.sum()
        if total <= 0:
            centroids[c] = x[rng.randint(n)]
        else:
            probs = closest_sq / total
            centroids[c] = x[rng.choice(n, p=probs)]
        closest_sq = np.minimum(closest_sq, np.sum((x - centroids[c]) ** 2, axis=1))

    objectives = []
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITERS):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignments = dists.argmin(axis=1)
        objectives.append(float(dists[np.arange(n), assignments].sum()))
        new_centroids = centroids.copy()
        for c in range(n_clusters):
            members = x[assignments == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        if shift < KMEANS_TOL:
            break
    dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignments = dists.argmin(axis=1)
    return assignments, centroids, objectives


def sem_cluster_by(t: Table, col: str, n_clusters: int, return_scores: bool = False,
                   seed: int = 0, id_column: str = "cluster_id") -> Table:
    """Append a cluster id column from kmeans over the column's index vectors."""
    index = _require_index(t, col)
    assignments, centroids, _ = kmeans(index.vectors, n_clusters, seed=seed)
    out = t.with_column(id_column, "int", [int(a) for a in assignments])
    if return_scores:
        norms = np.linalg.norm(centroids, axis=1)
        norms[norms < 1e-12] = 1.0
        unit_centroids = centroids / norms[:, None]
        sims = [float(index.vectors[i] @ unit_centroids[assignments[i]]) for i in range(t.row_count)]
        out = out.with_column("centroid_score", "float", sims)
    return out
