"""Item -> hierarchical semantic ID tokenization via residual k-means.

Each item embedding is quantized into an L-level code tuple. Level l runs
k-means on the residuals left after subtracting the assigned centroids of
levels < l. Codebooks are deterministic given (corpus, L, W, iters, seed).
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialization import read_container, write_container

SidSequence = tuple[int, ...]

CODEBOOK_FILE_VERSION = 1
_ASSIGN_CHUNK = 4096


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class ItemEmbedding:
    """One item's dense feature vector in an unspecified feature space."""

    item_id: str
    vector: np.ndarray


@dataclass(frozen=True)
class SidCodebooks:
    """L stacked codebooks of W centroids each, shape [L, W, d_feat]."""

    levels: np.ndarray
    seed: int
    fingerprint: str = ""

    def __post_init__(self):
        if self.levels.ndim != 3:
            raise TokenizerError("codebooks must have shape [L, W, d_feat]")
        if not np.isfinite(self.levels).all():
            raise TokenizerError("codebooks contain non-finite centroids")

    @property
    def num_levels(self) -> int:
        return self.levels.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.levels.shape[1]

    @property
    def d_feat(self) -> int:
        return self.levels.shape[2]


def _as_matrix(embeddings: list[ItemEmbedding]) -> tuple[list[str], np.ndarray]:
    if not embeddings:
        raise TokenizerError("empty embedding corpus")
    d = len(np.asarray(embeddings[0].vector).ravel())
    ids, rows = [], []
    for emb in embeddings:
        v = np.asarray(emb.vector, dtype=np.float64).ravel()
        if v.shape[0] != d:
            raise TokenizerError(
                f"item {emb.item_id!r}: dimension {v.shape[0]} != corpus d_feat {d}"
            )
        if not np.isfinite(v).all():
            raise TokenizerError(f"item {emb.item_id!r}: non-finite embedding vector")
        ids.append(emb.item_id)
        rows.append(v)
    return ids, np.stack(rows)


def _sq_dists(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # direct (x - c)^2 sum, chunked over rows; matches the exhaustive-scan
    # oracle formula so argmin tie behavior is identical
    out = np.empty((X.shape[0], centroids.shape[0]))
    for i in range(0, X.shape[0], _ASSIGN_CHUNK):
        diff = X[i : i + _ASSIGN_CHUNK, None, :] - centroids[None, :, :]
        out[i : i + _ASSIGN_CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[int(rng.integers(n))]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:  # all remaining points coincide with chosen centroids
            idx = int(rng.integers(n))
        centroids[j] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _fix_empty_clusters(
    X: np.ndarray, centroids: np.ndarray, assign: np.ndarray
) -> None:
    """Give each empty cluster the point currently farthest from its centroid."""
    k = centroids.shape[0]
    counts = np.bincount(assign, minlength=k)
    dist_own = ((X - centroids[assign]) ** 2).sum(axis=1)
    empties = deque(int(j) for j in np.flatnonzero(counts == 0))
    guard = 2 * k  # degenerate corpora (duplicates > W) cannot fully separate
    while empties and guard > 0:
        guard -= 1
        j = empties.popleft()
        far = int(dist_own.argmax())
        old = int(assign[far])
        centroids[j] = X[far]
        assign[far] = j
        dist_own[far] = 0.0
        counts[old] -= 1
        counts[j] += 1
        if counts[old] == 0:
            empties.append(old)


def _kmeans(
    X: np.ndarray, k: int, iters: int, rng: np.random.Generator
) -> np.ndarray:
    centroids = _kmeans_pp_init(X, k, rng)
    prev = None
    for _ in range(iters):
        assign = _sq_dists(X, centroids).argmin(axis=1)
        _fix_empty_clusters(X, centroids, assign)
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        for j in range(k):
            members = X[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return centroids


def _corpus_fingerprint(ids: list[str], X: np.ndarray) -> str:
    h = hashlib.sha256()
    for item_id in ids:
        h.update(item_id.encode("utf-8"))
        h.update(b"\x00")
    h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
    return h.hexdigest()


def fit_codebooks(
    embeddings: list[ItemEmbedding],
    num_levels: int,
    codebook_size: int,
    iters: int = 25,
    seed: int = 0,
) -> SidCodebooks:
    """Fit one k-means codebook per level on successive residuals."""
    if num_levels < 1 or codebook_size < 1 or iters < 1:
        raise TokenizerError("num_levels, codebook_size and iters must be >= 1")
    ids, X = _as_matrix(embeddings)
    if X.shape[0] < codebook_size:
        raise TokenizerError(
            f"insufficient corpus: {X.shape[0]} items < codebook size {codebook_size}"
        )
    rng = np.random.default_rng(seed)
    residual = X.copy()
    levels = np.empty((num_levels, codebook_size, X.shape[1]))
    for level in range(num_levels):
        centroids = _kmeans(residual, codebook_size, iters, rng)
        levels[level] = centroids
        codes = _sq_dists(residual, centroids).argmin(axis=1)
        residual -= centroids[codes]
    return SidCodebooks(
        levels=levels, seed=seed, fingerprint=_corpus_fingerprint(ids, X)
    )


def encode_corpus(
    codebooks: SidCodebooks, embeddings: list[ItemEmbedding]
) -> np.ndarray:
    """Encode every item; returns an int array of codes, shape [N, L]."""
    _, X = _as_matrix(embeddings)
    if X.shape[1] != codebooks.d_feat:
        raise TokenizerError(
            f"embedding dimension {X.shape[1]} != codebook d_feat {codebooks.d_feat}"
        )
    codes = np.empty((X.shape[0], codebooks.num_levels), dtype=np.int64)
    residual = X.copy()
    for level in range(codebooks.num_levels):
        centroids = codebooks.levels[level]
        codes[:, level] = _sq_dists(residual, centroids).argmin(axis=1)
        residual -= centroids[codes[:, level]]
    return codes


def encode_item(codebooks: SidCodebooks, embedding: ItemEmbedding) -> SidSequence:
    """Map one embedding to its L-level code tuple (nearest centroid per level)."""
    return tuple(int(c) for c in encode_corpus(codebooks, [embedding])[0])


class _TrieNode:
    __slots__ = ("children",)

    def __init__(self):
        self.children: dict[int, _TrieNode] = {}


@dataclass
class SidIndex:
    """Bidirectional item <-> SID map plus a prefix trie for decoding.

    `inverse` buckets hold all items sharing one code tuple, ordered by
    popularity (falling back to corpus insertion order).
    """

    forward: dict[str, SidSequence]
    inverse: dict[SidSequence, list[str]]
    num_levels: int
    codebook_size: int
    _root: _TrieNode = field(default_factory=_TrieNode, repr=False)

    def __post_init__(self):
        for seq in self.inverse:
            node = self._root
            for code in seq:
                node = node.children.setdefault(int(code), _TrieNode())

    def encode(self, item_id: str) -> SidSequence:
        return self.forward[item_id]

    def bucket(self, seq: SidSequence) -> list[str]:
        return list(self.inverse.get(tuple(seq), []))

    def children(self, prefix: SidSequence) -> list[int]:
        """Valid next codes after `prefix`; sorted ascending. Empty prefix
        returns all first-level codes present in the corpus."""
        node = self._root
        for code in prefix:
            node = node.children.get(int(code))
            if node is None:
                return []
        return sorted(node.children)

    def contains(self, seq: SidSequence) -> bool:
        return tuple(seq) in self.inverse

    @property
    def n_sequences(self) -> int:
        return len(self.inverse)

    @property
    def n_items(self) -> int:
        return len(self.forward)


def build_index(
    codebooks: SidCodebooks,
    embeddings: list[ItemEmbedding],
    popularity: dict[str, int] | None = None,
    disambiguate: bool = False,
) -> SidIndex:
    """Encode the corpus and build forward/inverse maps plus the prefix trie.

    With `disambiguate`, an extra level is appended holding each item's
    position inside its collision bucket, making every sequence unique.
    """
    codes = encode_corpus(codebooks, embeddings)
    forward: dict[str, SidSequence] = {}
    inverse: dict[SidSequence, list[str]] = {}
    for emb, row in zip(embeddings, codes):
        if emb.item_id in forward:
            raise TokenizerError(f"duplicate item id {emb.item_id!r}")
        seq = tuple(int(c) for c in row)
        forward[emb.item_id] = seq
        inverse.setdefault(seq, []).append(emb.item_id)
    if popularity is not None:
        for bucket in inverse.values():
            bucket.sort(key=lambda i: -popularity.get(i, 0))

    num_levels = codebooks.num_levels
    if disambiguate:
        largest = max(len(b) for b in inverse.values())
        if largest > codebooks.codebook_size:
            raise TokenizerError(
                f"disambiguation level overflow: bucket of {largest} items "
                f"exceeds codebook size {codebooks.codebook_size}"
            )
        forward = {
            item: seq + (pos,)
            for seq, bucket in inverse.items()
            for pos, item in enumerate(bucket)
        }
        inverse = {seq: [item] for item, seq in forward.items()}
        num_levels += 1

    return SidIndex(
        forward=forward,
        inverse=inverse,
        num_levels=num_levels,
        codebook_size=codebooks.codebook_size,
    )


# ---------------------------------------------------------------------------
# file formats


def save_codebooks(path, codebooks: SidCodebooks) -> None:
    manifest = {
        "L": codebooks.num_levels,
        "W": codebooks.codebook_size,
        "d_feat": codebooks.d_feat,
        "seed": codebooks.seed,
        "fingerprint": codebooks.fingerprint,
        "dtype": "<f8",
    }
    payload = np.ascontiguousarray(codebooks.levels, dtype="<f8").tobytes()
    write_container(path, CODEBOOK_FILE_VERSION, manifest, payload)


def load_codebooks(path) -> SidCodebooks:
    manifest, payload = read_container(path, CODEBOOK_FILE_VERSION)
    shape = (manifest["L"], manifest["W"], manifest["d_feat"])
    levels = np.frombuffer(payload, dtype=manifest["dtype"]).reshape(shape).copy()
    return SidCodebooks(
        levels=levels, seed=manifest["seed"], fingerprint=manifest["fingerprint"]
    )


def write_embeddings_text(path, embeddings: list[ItemEmbedding]) -> None:
    """`d_feat N` header, then one `item_id v1 ... v_dfeat` line per item."""
    _, X = _as_matrix(embeddings)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{X.shape[1]} {X.shape[0]}\n")
        for emb, row in zip(embeddings, X):
            values = " ".join(repr(float(v)) for v in row)
            f.write(f"{emb.item_id} {values}\n")


def read_embeddings_text(path) -> list[ItemEmbedding]:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise TokenizerError(f"{path}:1: expected header 'd_feat N'")
        d_feat, n = int(header[0]), int(header[1])
        out = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != d_feat + 1:
                raise TokenizerError(
                    f"{path}:{lineno}: expected item_id plus {d_feat} values, "
                    f"got {len(parts)} fields"
                )
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise TokenizerError(f"{path}:{lineno}: {exc}") from exc
            out.append(ItemEmbedding(item_id=parts[0], vector=vec))
    if len(out) != n:
        raise TokenizerError(f"{path}: header declares {n} items, found {len(out)}")
    return out


def write_embeddings_binary(path, embeddings: list[ItemEmbedding]) -> None:
    """Raw little-endian float32 row-major matrix plus a `.json` sidecar."""
    ids, X = _as_matrix(embeddings)
    payload = np.ascontiguousarray(X, dtype="<f4")
    Path(path).write_bytes(payload.tobytes())
    manifest = {
        "version": 1,
        "dtype": "<f4",
        "d_feat": int(X.shape[1]),
        "count": int(X.shape[0]),
        "item_ids": ids,
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def read_embeddings_binary(path) -> list[ItemEmbedding]:
    manifest = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    if manifest.get("version") != 1:
        raise TokenizerError(f"{path}.json: unsupported manifest version")
    n, d = manifest["count"], manifest["d_feat"]
    raw = np.frombuffer(Path(path).read_bytes(), dtype=manifest["dtype"])
    if raw.size != n * d:
        raise TokenizerError(
            f"{path}: payload holds {raw.size} floats, manifest declares {n * d}"
        )
    X = raw.reshape(n, d).astype(np.float64)
    return [
        ItemEmbedding(item_id=item_id, vector=X[i])
        for i, item_id in enumerate(manifest["item_ids"])
    ]
