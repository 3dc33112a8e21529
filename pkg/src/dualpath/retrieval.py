"""Brute-force dense retrieval over encoder embeddings, plus metrics.

Exact cosine scoring against every document (desk-scale corpora make
approximate indexes pointless and exactness keeps the oracle tests
simple), reciprocal-rank and recall metrics, a silhouette score for
degradation-embedding clusters, and query-to-patch similarity grids.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import CorpusManifest, QueryRecord, load_image
from .encoder import EncoderWeights, forward_dual, forward_inference
from .errors import CheckpointFormatError, ManifestError

_INDEX_MAGIC = b"RVIX"
_INDEX_VERSION = 1


@dataclass
class EmbeddingIndex:
    doc_ids: list[str]
    matrix: np.ndarray  # N x d float32, unit rows
    checkpoint_id: str = ""
    manifest_id: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if len(self.doc_ids) != self.matrix.shape[0]:
            raise ValueError("doc id count does not match matrix rows")
        if self.matrix.size:
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("index rows must be unit-norm")

    def __len__(self):
        return len(self.doc_ids)

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "wb") as f:
            n, d = self.matrix.shape if self.matrix.size else (0, 0)
            f.write(_INDEX_MAGIC)
            f.write(struct.pack("<III", _INDEX_VERSION, n, d))
            f.write(self.matrix.astype("<f4").tobytes())
            for s in [*self.doc_ids, self.checkpoint_id, self.manifest_id]:
                b = s.encode("utf-8")
                f.write(struct.pack("<I", len(b)))
                f.write(b)
        return path

    @staticmethod
    def load(path) -> "EmbeddingIndex":
        raw = Path(path).read_bytes()
        if raw[:4] != _INDEX_MAGIC:
            raise CheckpointFormatError(f"{path}: bad index magic")
        version, n, d = struct.unpack_from("<III", raw, 4)
        if version != _INDEX_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported index version {version}")
        pos = 16
        need = n * d * 4
        if len(raw) < pos + need:
            raise CheckpointFormatError(f"{path}: truncated index")
        matrix = np.frombuffer(raw, dtype="<f4", count=n * d, offset=pos).reshape(n, d).copy()
        pos += need
        strings = []
        for _ in range(n + 2):
            if len(raw) < pos + 4:
                raise CheckpointFormatError(f"{path}: truncated string table")
            (ln,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            strings.append(raw[pos : pos + ln].decode("utf-8"))
            pos += ln
        return EmbeddingIndex(strings[:n], matrix, strings[n], strings[n + 1])


@dataclass
class RankedList:
    query_id: str
    doc_ids: list[str]
    scores: list[float]  # non-increasing; ties broken by ascending doc_id


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def embed_corpus(weights: EncoderWeights, manifest: CorpusManifest, mode: str,
                 split: str | None = None, checkpoint_id: str = "",
                 manifest_id: str = "") -> EmbeddingIndex:
    """One normalized semantic embedding per selected document.

    mode picks clean originals or degraded variants. Uses the token-free
    inference pass except in bidirectional mode, where that pass is
    undefined and the full pass's semantic output is used instead.
    """
    if mode not in ("clean", "degraded"):
        raise ValueError(f"mode must be 'clean' or 'degraded', got {mode!r}")
    config = weights.config
    ids, rows = [], []
    for rec in manifest.docs:
        if rec.is_degraded != (mode == "degraded"):
            continue
        if split is not None and rec.split != split:
            continue
        path = manifest.image_path(rec)
        if not path.exists():
            raise ManifestError(f"missing image file {path}")
        img = load_image(manifest, rec)
        if config.nc_bidirectional:
            z = forward_dual(img.pixels, weights, config).z_sem
        else:
            z = forward_inference(img.pixels, weights, config)
        ids.append(rec.doc_id)
        rows.append(T.normalize(z).data.astype(np.float32))
    matrix = np.stack(rows) if rows else np.zeros((0, config.dim), dtype=np.float32)
    return EmbeddingIndex(ids, matrix, checkpoint_id, manifest_id)


def retrieve_topk(index: EmbeddingIndex, q_emb: np.ndarray, k: int,
                  query_id: str = "") -> RankedList:
    """Exact top-k by cosine score; equal scores order by ascending doc_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("cannot retrieve from an empty index")
    q = np.asarray(q_emb, dtype=np.float32)
    qn = np.linalg.norm(q)
    if qn < 1e-12:
        raise ValueError("query embedding has near-zero norm")
    scores = index.matrix @ (q / qn)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.doc_ids[i]))[:k]
    return RankedList(query_id, [index.doc_ids[i] for i in order],
                      [float(scores[i]) for i in order])


def _positives_map(query_records) -> dict[str, set[str]]:
    out = {}
    for q in query_records:
        if isinstance(q, QueryRecord):
            out[q.query_id] = set(q.positive_doc_ids)
        else:
            qid, pos = q
            out[qid] = set(pos)
    return out


def mrr_at_k(ranked_lists: list[RankedList], query_records, k: int = 10) -> float:
    """Mean over queries of 1/rank of the first positive, 0 beyond rank k."""
    positives = _positives_map(query_records)
    if not ranked_lists:
        raise ValueError("no ranked lists")
    total = 0.0
    for rl in ranked_lists:
        pos = positives.get(rl.query_id)
        if not pos:
            raise ValueError(f"query {rl.query_id!r} has no positives")
        rr = 0.0
        for rank, doc_id in enumerate(rl.doc_ids[:k], start=1):
            if doc_id in pos:
                rr = 1.0 / rank
                break
        total += rr
    return total / len(ranked_lists)


def recall_at_k(ranked_lists: list[RankedList], query_records, k: int) -> float:
    """Fraction of queries with at least one positive in the top k."""
    positives = _positives_map(query_records)
    if not ranked_lists:
        raise ValueError("no ranked lists")
    hits = 0
    for rl in ranked_lists:
        pos = positives.get(rl.query_id)
        if not pos:
            raise ValueError(f"query {rl.query_id!r} has no positives")
        if any(doc_id in pos for doc_id in rl.doc_ids[:k]):
            hits += 1
    return hits / len(ranked_lists)


def silhouette(embeddings: np.ndarray, labels) -> float:
    """Mean silhouette with Euclidean distance.

    Needs at least two labels with at least two members each; a point at
    zero distance from both its own and the nearest other cluster scores 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise ValueError("silhouette needs >=2 labels with >=2 members each")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    scores = np.empty(len(x))
    for i in range(len(x)):
        same = labels == labels[i]
        a = dist[i, same & (np.arange(len(x)) != i)].mean()
        b = min(dist[i, labels == u].mean() for u in uniq if u != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def similarity_map(weights: EncoderWeights, image, query_emb: np.ndarray) -> np.ndarray:
    """Cosine between a query embedding and each final-layer patch token,
    laid out on the (H/P) x (W/P) patch grid."""
    config = weights.config
    out = forward_dual(image, weights, config)
    tokens = out.sem_tokens.data
    if config.agg == "cls":  # drop the cls row; the grid covers patches only
        tokens = tokens[1:]
    q = np.asarray(query_emb, dtype=np.float64).reshape(-1)
    if q.shape[0] != tokens.shape[1]:
        raise ValueError(f"query dim {q.shape[0]} does not match token dim {tokens.shape[1]}")
    qn = np.linalg.norm(q)
    tn = np.linalg.norm(tokens, axis=1)
    if qn < 1e-12 or tn.min() < 1e-12:
        raise ValueError("zero-norm embedding in similarity map")
    cos = (tokens @ q) / (tn * qn)
    grid_h = config.image_h // config.patch
    grid_w = config.image_w // config.patch
    return cos.reshape(grid_h, grid_w)
