import numpy as np
import pytest

from rastp.sid_tokenizer import (
    ItemEmbedding,
    SidCodebooks,
    TokenizerError,
    _fix_empty_clusters,
    build_index,
    encode_corpus,
    encode_item,
    fit_codebooks,
    load_codebooks,
    read_embeddings_binary,
    read_embeddings_text,
    save_codebooks,
    write_embeddings_binary,
    write_embeddings_text,
)


def make_embeddings(X, prefix="it"):
    return [ItemEmbedding(item_id=f"{prefix}{i:03d}", vector=v) for i, v in enumerate(X)]


def oracle_nearest(vector, centroids):
    """Exhaustive scan: squared Euclidean distance to every centroid."""
    best_code, best_dist = 0, None
    for j in range(centroids.shape[0]):
        diff = vector - centroids[j]
        dist = float((diff * diff).sum())
        if best_dist is None or dist < best_dist:
            best_code, best_dist = j, dist
    return best_code


def oracle_encode(codebooks, vector):
    residual = vector.astype(np.float64).copy()
    codes = []
    for level in range(codebooks.num_levels):
        code = oracle_nearest(residual, codebooks.levels[level])
        codes.append(code)
        residual = residual - codebooks.levels[level][code]
    return tuple(codes)


def clustered_points(n_clusters, per_cluster, d, seed, spread=1e-4):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, d)) * 3.0
    labels = np.repeat(np.arange(n_clusters), per_cluster)
    X = centers[labels] + spread * rng.normal(size=(len(labels), d))
    return X, labels


# ----------------------------------------------------------------- fitting


def test_w1_l2_centroids_are_corpus_mean_then_residual_mean():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 5))
    cb = fit_codebooks(make_embeddings(X), num_levels=2, codebook_size=1, iters=5, seed=1)
    np.testing.assert_allclose(cb.levels[0][0], X.mean(axis=0), atol=1e-12)
    residuals = X - X.mean(axis=0)
    np.testing.assert_allclose(cb.levels[1][0], residuals.mean(axis=0), atol=1e-12)


def test_w_equals_n_distinct_points_gives_unique_codes_zero_residual():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(6, 4)) * 5
    embs = make_embeddings(X)
    cb = fit_codebooks(embs, num_levels=1, codebook_size=6, iters=10, seed=2)
    codes = encode_corpus(cb, embs)[:, 0]
    assert len(set(codes.tolist())) == 6
    np.testing.assert_allclose(cb.levels[0][codes], X, atol=1e-12)


def test_level1_codes_recover_cluster_labels():
    X, labels = clustered_points(n_clusters=8, per_cluster=8, d=6, seed=7)
    embs = make_embeddings(X)
    cb = fit_codebooks(embs, num_levels=2, codebook_size=8, iters=25, seed=3)
    codes = encode_corpus(cb, embs)[:, 0]
    # brute-force nearest-centroid oracle agrees with the fitted assignment
    for i in range(len(X)):
        assert codes[i] == oracle_nearest(X[i], cb.levels[0])
    # one code per generated cluster, up to permutation
    mapping = {}
    for label, code in zip(labels, codes):
        mapping.setdefault(label, set()).add(int(code))
    assert all(len(c) == 1 for c in mapping.values())
    assert len({c.pop() for c in mapping.values()}) == 8


def test_fit_is_deterministic_given_seed():
    rng = np.random.default_rng(5)
    embs = make_embeddings(rng.normal(size=(30, 4)))
    a = fit_codebooks(embs, 3, 4, iters=15, seed=11)
    b = fit_codebooks(embs, 3, 4, iters=15, seed=11)
    assert np.array_equal(a.levels, b.levels)
    assert a.fingerprint == b.fingerprint
    c = fit_codebooks(embs, 3, 4, iters=15, seed=12)
    assert not np.array_equal(a.levels, c.levels)


def test_residual_norm_non_increasing_per_item():
    # two-level hierarchy: every level has real structure to capture, which
    # is when the per-item guarantee is meaningful
    rng = np.random.default_rng(9)
    super_centers = rng.normal(size=(4, 6)) * 10.0
    sub_offsets = rng.normal(size=(4, 6)) * 1.0
    X = np.stack(
        [
            super_centers[i] + sub_offsets[j] + 1e-3 * rng.normal(size=6)
            for i in range(4)
            for j in range(4)
            for _ in range(5)
        ]
    )
    embs = make_embeddings(X)
    cb = fit_codebooks(embs, num_levels=2, codebook_size=4, iters=25, seed=4)
    codes = encode_corpus(cb, embs)
    residual = X.astype(np.float64).copy()
    prev = (residual**2).sum(axis=1)
    for level in range(cb.num_levels):
        residual = residual - cb.levels[level][codes[:, level]]
        norms = (residual**2).sum(axis=1)
        assert (norms <= prev + 1e-9).all()
        prev = norms


def test_mean_squared_residual_non_increasing_on_generic_data():
    rng = np.random.default_rng(21)
    X = rng.normal(size=(80, 6))
    embs = make_embeddings(X)
    cb = fit_codebooks(embs, num_levels=3, codebook_size=8, iters=25, seed=5)
    codes = encode_corpus(cb, embs)
    residual = X.astype(np.float64).copy()
    prev = float((residual**2).sum(axis=1).mean())
    for level in range(cb.num_levels):
        residual = residual - cb.levels[level][codes[:, level]]
        mean_sq = float((residual**2).sum(axis=1).mean())
        assert mean_sq <= prev + 1e-9
        prev = mean_sq


def test_insufficient_corpus_error():
    embs = make_embeddings(np.eye(3))
    with pytest.raises(TokenizerError, match="insufficient corpus"):
        fit_codebooks(embs, 1, 8, iters=1, seed=0)


def test_non_finite_vector_error_names_item():
    X = np.ones((5, 3))
    X[2, 1] = np.nan
    embs = make_embeddings(X)
    with pytest.raises(TokenizerError, match="it002"):
        fit_codebooks(embs, 1, 2, iters=1, seed=0)


def test_empty_cluster_gets_farthest_point():
    X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]])
    centroids = np.array([[0.05, 0.0], [10.05, 0.0], [99.0, 99.0]])
    assign = np.array([0, 0, 1, 1])
    _fix_empty_clusters(X, centroids, assign)
    counts = np.bincount(assign, minlength=3)
    assert (counts >= 1).all()
    # the relocated centroid is one of the input points
    assert any(np.array_equal(centroids[2], x) for x in X)


# ----------------------------------------------------------------- encoding


def test_encode_exact_centroid_hit():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(10, 4))
    embs = make_embeddings(X)
    cb = fit_codebooks(embs, num_levels=1, codebook_size=4, iters=20, seed=0)
    probe = ItemEmbedding(item_id="probe", vector=cb.levels[0][2].copy())
    assert encode_item(cb, probe)[0] == 2


def test_encode_output_length_matches_levels():
    rng = np.random.default_rng(3)
    embs = make_embeddings(rng.normal(size=(12, 5)))
    cb = fit_codebooks(embs, num_levels=3, codebook_size=4, iters=10, seed=0)
    assert len(encode_item(cb, embs[0])) == 3


def test_encode_matches_exhaustive_scan_on_random_items(world):
    cb = world.codebooks
    rng = np.random.default_rng(17)
    for _ in range(100):
        vec = rng.normal(size=cb.d_feat) * rng.uniform(0.1, 3.0)
        emb = ItemEmbedding(item_id="x", vector=vec)
        assert encode_item(cb, emb) == oracle_encode(cb, vec)


def test_encode_dimension_mismatch_error(world):
    bad = ItemEmbedding(item_id="bad", vector=np.ones(world.codebooks.d_feat + 1))
    with pytest.raises(TokenizerError, match="dimension"):
        encode_item(world.codebooks, bad)


def test_tie_breaks_to_lowest_code_index():
    levels = np.zeros((1, 3, 2))
    levels[0, 0] = [1.0, 0.0]
    levels[0, 1] = [-1.0, 0.0]
    levels[0, 2] = [1.0, 0.0]  # duplicate of code 0
    cb = SidCodebooks(levels=levels, seed=0)
    probe = ItemEmbedding(item_id="t", vector=np.array([0.0, 0.0]))
    assert encode_item(cb, probe)[0] == 0


# ----------------------------------------------------------------- index


def test_identical_embeddings_share_bucket():
    X = np.ones((2, 3))
    embs = make_embeddings(X)
    cb = fit_codebooks(embs, 1, 2, iters=3, seed=0)
    index = build_index(cb, embs)
    seq = index.forward["it000"]
    assert index.forward["it001"] == seq
    assert index.bucket(seq) == ["it000", "it001"]


def test_trie_counts_and_root_fanout(world):
    index = world.index
    distinct = set(index.forward.values())
    assert index.n_sequences == len(distinct)

    def count_paths(prefix):
        kids = index.children(prefix)
        if len(prefix) == index.num_levels:
            return 1
        return sum(count_paths(prefix + (k,)) for k in kids)

    assert count_paths(()) == len(distinct)
    assert set(index.children(())) == {seq[0] for seq in distinct}
    assert index.children(()) == sorted(index.children(()))


def test_roundtrip_every_corpus_item(world):
    for emb in world.embeddings:
        seq = world.index.forward[emb.item_id]
        assert emb.item_id in world.index.bucket(seq)
        assert encode_item(world.codebooks, emb) == seq


def test_bucket_popularity_ordering():
    X = np.ones((3, 2))
    embs = make_embeddings(X)
    cb = fit_codebooks(embs, 1, 1, iters=2, seed=0)
    index = build_index(cb, embs, popularity={"it000": 1, "it001": 9, "it002": 4})
    seq = index.forward["it000"]
    assert index.bucket(seq) == ["it001", "it002", "it000"]
    # default: insertion order
    index2 = build_index(cb, embs)
    assert index2.bucket(seq) == ["it000", "it001", "it002"]


def test_disambiguation_level_makes_sequences_unique():
    X = np.ones((3, 2))
    embs = make_embeddings(X)
    cb = fit_codebooks(embs, 1, 3, iters=2, seed=0)
    index = build_index(cb, embs, disambiguate=True)
    assert index.num_levels == 2
    assert index.n_sequences == 3
    assert all(len(b) == 1 for b in index.inverse.values())
    positions = sorted(seq[-1] for seq in index.forward.values())
    assert positions == [0, 1, 2]


# ----------------------------------------------------------------- files


def test_codebook_file_roundtrip_bit_exact(tmp_path, world):
    path = tmp_path / "codebooks.bin"
    save_codebooks(path, world.codebooks)
    loaded = load_codebooks(path)
    assert np.array_equal(loaded.levels, world.codebooks.levels)
    assert loaded.seed == world.codebooks.seed
    assert loaded.fingerprint == world.codebooks.fingerprint
    # version byte leads the file
    assert path.read_bytes()[0] == 1


def test_codebook_file_rejects_wrong_version(tmp_path, world):
    path = tmp_path / "codebooks.bin"
    save_codebooks(path, world.codebooks)
    blob = bytearray(path.read_bytes())
    blob[0] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="version"):
        load_codebooks(path)


def test_embeddings_text_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    embs = make_embeddings(rng.normal(size=(7, 3)))
    path = tmp_path / "emb.txt"
    write_embeddings_text(path, embs)
    header = path.read_text().splitlines()[0]
    assert header == "3 7"
    loaded = read_embeddings_text(path)
    assert [e.item_id for e in loaded] == [e.item_id for e in embs]
    for a, b in zip(loaded, embs):
        np.testing.assert_allclose(a.vector, b.vector, rtol=0, atol=0)


def test_embeddings_text_error_reports_line(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("2 2\nit0 1.0 2.0\nit1 1.0\n")
    with pytest.raises(TokenizerError, match=r":3:"):
        read_embeddings_text(path)


def test_embeddings_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    embs = make_embeddings(rng.normal(size=(5, 4)).astype(np.float32))
    path = tmp_path / "emb.bin"
    write_embeddings_binary(path, embs)
    loaded = read_embeddings_binary(path)
    assert [e.item_id for e in loaded] == [e.item_id for e in embs]
    for a, b in zip(loaded, embs):
        np.testing.assert_allclose(a.vector, b.vector, atol=1e-7)


def test_embeddings_binary_size_mismatch(tmp_path):
    rng = np.random.default_rng(6)
    embs = make_embeddings(rng.normal(size=(5, 4)))
    path = tmp_path / "emb.bin"
    write_embeddings_binary(path, embs)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(TokenizerError, match="payload"):
        read_embeddings_binary(path)
