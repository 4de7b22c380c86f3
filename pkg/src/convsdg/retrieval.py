"""Lexical and dense retrieval over a passage collection.

Two engines share one result convention (descending score, ties broken by
ascending pid):

* BM25 (Lucene-style idf, k1=0.9, b=0.4) over the collection statistics.
* A dense encoder/index pair. The ``hashed_projection`` encoder hashes
  tokens into a fixed-width count vector and applies a linear projection,
  so every dense code path (training, search, persistence) runs fully
  deterministically without a pretrained model. A thin adapter with the
  same contract wraps pretrained sentence encoders when one is available.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass

import numpy as np

from .datamodel import PassageCollection, tokenize

ENCODER_MAGIC = b"CSDGENC1"
INDEX_MAGIC = b"CSDGIDX1"


@dataclass
class ScoredPassage:
    pid: str
    score: float


# ---------------------------------------------------------------------------
# BM25
# ---------------------------------------------------------------------------


def bm25_idf(term: str, collection: PassageCollection) -> float:
    n = collection.doc_count
    df = collection.df.get(term, 0)
    return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def bm25_score(
    query_terms: list[str],
    pid: str,
    collection: PassageCollection,
    k1: float = 0.9,
    b: float = 0.4,
) -> float:
    """Okapi BM25 with Lucene-style idf; query terms contribute per occurrence."""
    tf = collection.term_freqs(pid)
    dl = collection.doc_len(pid)
    avgdl = collection.avg_doc_len
    norm = k1 * (1.0 - b + b * (dl / avgdl if avgdl > 0 else 0.0))
    score = 0.0
    for term in query_terms:
        f = tf.get(term, 0)
        if f == 0:
            continue
        score += bm25_idf(term, collection) * f * (k1 + 1.0) / (f + norm)
    return score


def lexical_search(
    query: str,
    collection: PassageCollection,
    k: int,
    k1: float = 0.9,
    b: float = 0.4,
) -> list[ScoredPassage]:
    """Top-k passages by BM25; only positive-scoring passages are returned."""
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = tokenize(query)
    if not terms:
        raise ValueError("query has no tokens after tokenization")
    candidates: set[str] = set()
    for term in set(terms):
        candidates.update(collection.postings(term))
    scored = [
        (pid, bm25_score(terms, pid, collection, k1=k1, b=b)) for pid in candidates
    ]
    scored = [(pid, s) for pid, s in scored if s > 0.0]
    scored.sort(key=lambda ps: (-ps[1], ps[0]))
    return [ScoredPassage(pid, s) for pid, s in scored[:k]]


class Bm25Searcher:
    """BM25 engine with the supervision/inference search interface."""

    def __init__(self, collection: PassageCollection, k1: float = 0.9, b: float = 0.4):
        self.collection = collection
        self.k1 = k1
        self.b = b

    def search(self, query: str, k: int) -> list[ScoredPassage]:
        return lexical_search(query, self.collection, k, k1=self.k1, b=self.b)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

QUERY_ROLE = "query"
PASSAGE_ROLE = "passage"


def _truncate(tokens: list[str], role: str, max_len: int) -> list[str]:
    # Query-role encoders keep the tail: the current turn sits at the end of a
    # reformulated session and must survive truncation.
    if len(tokens) <= max_len:
        return tokens
    if role == QUERY_ROLE:
        return tokens[-max_len:]
    return tokens[:max_len]


class HashedProjectionEncoder:
    """Token-hashing count vectors followed by a learned linear projection.

    The projection matrix has shape (hash_width, dim); the query-role copy of
    it is the only trainable parameter set in this package.
    """

    backend = "hashed_projection"

    def __init__(self, role: str, dim: int, max_len: int, hash_width: int,
                 weights: np.ndarray):
        if role not in (QUERY_ROLE, PASSAGE_ROLE):
            raise ValueError(f"unknown encoder role {role!r}")
        if weights.shape != (hash_width, dim):
            raise ValueError(
                f"weights shape {weights.shape} != ({hash_width}, {dim})"
            )
        self.role = role
        self.dim = dim
        self.max_len = max_len
        self.hash_width = hash_width
        self.weights = np.asarray(weights, dtype=np.float64)

    def token_slots(self, text: str) -> dict[int, int]:
        """Hash slot -> count for the (truncated) token sequence of ``text``."""
        tokens = _truncate(tokenize(text), self.role, self.max_len)
        slots: dict[int, int] = {}
        for tok in tokens:
            slot = zlib.crc32(tok.encode("utf-8")) % self.hash_width
            slots[slot] = slots.get(slot, 0) + 1
        return slots

    def encode(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for slot, count in self.token_slots(text).items():
            vec += count * self.weights[slot]
        return vec

    def clone(self) -> "HashedProjectionEncoder":
        return HashedProjectionEncoder(
            self.role, self.dim, self.max_len, self.hash_width, self.weights.copy()
        )


def _init_weights(dim: int, hash_width: int, seed: int) -> np.ndarray:
    # Scale 1/sqrt(dim) makes E[q.p] equal the token-count overlap, so an
    # untrained encoder behaves like a noisy lexical matcher.
    rng = np.random.default_rng(seed)
    return rng.standard_normal((hash_width, dim)) / math.sqrt(dim)


def new_query_encoder(dim: int = 64, max_len: int = 64,
                      hash_width: int = 1 << 15, seed: int = 0) -> HashedProjectionEncoder:
    return HashedProjectionEncoder(
        QUERY_ROLE, dim, max_len, hash_width, _init_weights(dim, hash_width, seed)
    )


def new_passage_encoder(dim: int = 64, max_len: int = 384,
                        hash_width: int = 1 << 15, seed: int = 0) -> HashedProjectionEncoder:
    # Same seed as the paired query encoder keeps the two sides aligned
    # before any training step.
    return HashedProjectionEncoder(
        PASSAGE_ROLE, dim, max_len, hash_width, _init_weights(dim, hash_width, seed)
    )


class TransformerEncoderAdapter:
    """Adapter giving a pretrained sentence encoder the same contract.

    ``model`` must expose ``encode(text) -> 1-D array``. Truncation is applied
    on whitespace tokens before the model sees the text, mirroring the
    front/back rule of the hashed encoder.
    """

    backend = "pretrained_transformer"

    def __init__(self, role: str, dim: int, max_len: int, model):
        if role not in (QUERY_ROLE, PASSAGE_ROLE):
            raise ValueError(f"unknown encoder role {role!r}")
        self.role = role
        self.dim = dim
        self.max_len = max_len
        self.model = model

    def encode(self, text: str) -> np.ndarray:
        tokens = _truncate(text.split(), self.role, self.max_len)
        vec = np.asarray(self.model.encode(" ".join(tokens)), dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"model returned shape {vec.shape}, expected ({self.dim},)")
        return vec


def encode(text: str, encoder) -> np.ndarray:
    """Encode ``text`` with any encoder honoring the truncation contract."""
    return encoder.encode(text)


def save_encoder(encoder: HashedProjectionEncoder, path) -> None:
    if encoder.backend != "hashed_projection":
        raise ValueError("only hashed_projection encoders are serializable")
    header = {
        "backend": encoder.backend,
        "role": encoder.role,
        "dim": encoder.dim,
        "hash_width": encoder.hash_width,
        "max_len": encoder.max_len,
        "dtype": "float64",
    }
    with open(path, "wb") as fh:
        fh.write(ENCODER_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(encoder.weights, dtype=np.float64).tobytes())


def load_encoder(path) -> HashedProjectionEncoder:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != ENCODER_MAGIC:
            raise ValueError(f"{path}: not an encoder checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        data = fh.read()
    weights = np.frombuffer(data, dtype=np.float64).reshape(
        header["hash_width"], header["dim"]
    ).copy()
    return HashedProjectionEncoder(
        header["role"], header["dim"], header["max_len"], header["hash_width"], weights
    )


# ---------------------------------------------------------------------------
# Dense index and search
# ---------------------------------------------------------------------------


class DenseIndex:
    """Row-major passage embedding matrix with pid bookkeeping.

    ``matrix[i]`` is the embedding of ``pids[i]``. ANN search state (an
    inverted-file clustering) is built lazily and cached on the instance.
    """

    def __init__(self, pids: list[str], matrix: np.ndarray):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[0] != len(pids):
            raise ValueError("matrix must be (len(pids), dim)")
        self.pids = list(pids)
        self.matrix = matrix
        # Rank of each row's pid in ascending pid order, for tie-breaking.
        order = sorted(range(len(pids)), key=lambda i: pids[i])
        self._pid_rank = np.empty(len(pids), dtype=np.int64)
        for rank, i in enumerate(order):
            self._pid_rank[i] = rank
        self._ann = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.pids)

    def build_ann(self, nlist: int | None = None, nprobe: int | None = None,
                  seed: int = 0, iterations: int = 10) -> None:
        """Cluster rows into an inverted file for ANN mode.

        Rows are norm-augmented with one extra component so they all share the
        maximum norm; inner-product order then equals cosine order, which makes
        spherical k-means cells align with dot-product neighborhoods. Probed
        candidates are always rescored with exact dot products.
        """
        n = len(self.pids)
        if nlist is None:
            nlist = max(1, min(int(math.sqrt(n)), n))
        if nprobe is None:
            nprobe = max(1, math.ceil(nlist * 0.35))
        nlist = min(nlist, n)
        nprobe = min(nprobe, nlist)

        mat = self.matrix.astype(np.float64)
        norms = np.linalg.norm(mat, axis=1)
        max_norm = float(np.max(norms)) if n else 1.0
        if max_norm == 0.0:
            max_norm = 1.0
        extra = np.sqrt(np.maximum(max_norm**2 - norms**2, 0.0))
        aug = np.hstack([mat, extra[:, None]])
        aug_norms = np.linalg.norm(aug, axis=1, keepdims=True)
        aug_norms[aug_norms == 0.0] = 1.0
        unit = aug / aug_norms

        rng = np.random.default_rng(seed)
        centroids = unit[rng.choice(n, size=nlist, replace=False)]
        assign = np.zeros(n, dtype=np.int64)
        for _ in range(iterations):
            sims = unit @ centroids.T
            new_assign = np.argmax(sims, axis=1)
            if np.array_equal(new_assign, assign):
                assign = new_assign
                break
            assign = new_assign
            for c in range(nlist):
                members = np.nonzero(assign == c)[0]
                if members.size == 0:
                    continue
                mean = unit[members].mean(axis=0)
                norm = np.linalg.norm(mean)
                if norm > 0:
                    centroids[c] = mean / norm
        lists = [np.nonzero(assign == c)[0] for c in range(nlist)]
        self._ann = {"centroids": centroids, "lists": lists, "nprobe": nprobe}

    def _rank_rows(self, scores: np.ndarray, rows: np.ndarray, k: int) -> list[int]:
        # Descending score, then ascending pid; lexsort keys are applied
        # last-key-primary.
        order = np.lexsort((self._pid_rank[rows], -scores))
        return [int(rows[i]) for i in order[:k]]


def build_dense_index(collection: PassageCollection, passage_encoder) -> DenseIndex:
    if passage_encoder.role != PASSAGE_ROLE:
        raise ValueError("build_dense_index requires a passage-role encoder")
    pids = collection.pids()
    matrix = np.zeros((len(pids), passage_encoder.dim), dtype=np.float64)
    for i, pid in enumerate(pids):
        matrix[i] = passage_encoder.encode(collection.passages[pid].text)
    return DenseIndex(pids, matrix)


def dense_search(query_vec: np.ndarray, index: DenseIndex, k: int,
                 mode: str = "exact") -> list[ScoredPassage]:
    """Top-k passages by dot product; ``ann`` probes the clustered subset only."""
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if query_vec.shape != (index.dim,):
        raise ValueError(
            f"query dim {query_vec.shape} does not match index dim ({index.dim},)"
        )
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []

    if mode == "exact":
        rows = np.arange(len(index))
        scores = index.matrix.astype(np.float64) @ query_vec
    elif mode == "ann":
        if index._ann is None:
            index.build_ann()
        ann = index._ann
        # Centroids live in the norm-augmented space; the query's extra
        # component is zero there.
        centroid_scores = ann["centroids"][:, :-1] @ query_vec
        probe = np.argsort(-centroid_scores)[: ann["nprobe"]]
        rows = np.concatenate([ann["lists"][c] for c in probe]) if len(probe) else np.array([], dtype=np.int64)
        if rows.size == 0:
            return []
        scores = index.matrix[rows].astype(np.float64) @ query_vec
    else:
        raise ValueError(f"unknown search mode {mode!r}")

    top = index._rank_rows(scores, rows, k)
    row_score = dict(zip(rows.tolist(), scores.tolist()))
    return [ScoredPassage(index.pids[i], row_score[i]) for i in top]


class DenseSearcher:
    """Query-encoder + index pair with the supervision/inference interface."""

    def __init__(self, query_encoder, index: DenseIndex, mode: str = "exact"):
        if query_encoder.role != QUERY_ROLE:
            raise ValueError("DenseSearcher requires a query-role encoder")
        self.query_encoder = query_encoder
        self.index = index
        self.mode = mode

    def search(self, query: str, k: int) -> list[ScoredPassage]:
        return dense_search(self.query_encoder.encode(query), self.index, k, self.mode)


def save_index(index: DenseIndex, path) -> None:
    """Persist as header (dim, count), float32 row-major matrix, pid list."""
    header = {"dim": int(index.dim), "count": len(index)}
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(index.matrix, dtype=np.float32).tobytes())
        fh.write("\n".join(index.pids).encode("utf-8"))


def load_index(path) -> DenseIndex:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != INDEX_MAGIC:
            raise ValueError(f"{path}: not a dense index file")
        header = json.loads(fh.readline().decode("utf-8"))
        count, dim = header["count"], header["dim"]
        matrix = np.frombuffer(fh.read(count * dim * 4), dtype=np.float32).reshape(
            count, dim
        ).copy()
        pid_blob = fh.read().decode("utf-8")
    pids = pid_blob.split("\n") if pid_blob else []
    if len(pids) != count:
        raise ValueError(f"{path}: pid list length {len(pids)} != count {count}")
    return DenseIndex(pids, matrix)
