import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsfda.prototypes import (
    METHODS, ClusterParams, PrototypeSet, SourcePool, canonical_labels, dbscan, default_eps, inertia, kmeans,
    medoid, nearest_to_centroids, select_prototypes,
)

from oracles import best_partition, dbscan_reachability, nearest_to_centroid_brute, partition


def blobs(rng, centers, per, scale=0.3):
    pts = [rng.normal(c, scale, size=(per, len(c))) for c in centers]
    return np.concatenate(pts)


def km_inertia(x, k, seed=0):
    labels, cents = kmeans(x, k, seed)
    return inertia(x, labels, cents), labels, cents


class TestKMeans:
    def test_k_equals_n(self):
        x = np.random.default_rng(0).normal(size=(6, 2))
        val, labels, _ = km_inertia(x, 6)
        assert val == pytest.approx(0.0, abs=1e-12)
        assert sorted(labels.tolist()) == list(range(6))

    def test_k_one_is_mean(self):
        x = np.random.default_rng(1).normal(size=(9, 3))
        labels, cents = kmeans(x, 1)
        assert np.allclose(cents[0], x.mean(0))
        assert (labels == 0).all()

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4)

    def test_two_blobs_match_exhaustive_optimum(self):
        rng = np.random.default_rng(2)
        x = blobs(rng, [(0, 0), (10, 10)], 6)
        ref, _ = best_partition(x, 2)
        val, _, _ = km_inertia(x, 2)
        assert val == pytest.approx(ref, abs=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 3), st.integers(6, 9))
    def test_random_small_instances_reach_exhaustive_optimum(self, seed, k, n):
        rng = np.random.default_rng(seed)
        centers = rng.uniform(-8, 8, size=(k, 2))
        x = np.concatenate([centers[i % k] + rng.normal(0, 0.5, 2) for i in range(n)]).reshape(n, 2)
        ref, _ = best_partition(x, k)
        val, _, _ = km_inertia(x, k, seed)
        assert val == pytest.approx(ref, abs=1e-9)

    def test_inertia_non_increasing(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            x = rng.normal(size=(40, 3))
            hist = []
            kmeans(x, 4, trial, history=hist)
            assert len(hist) >= 1
            assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_seed_determinism(self):
        x = np.random.default_rng(4).normal(size=(30, 2))
        a = kmeans(x, 3, 7)
        b = kmeans(x, 3, 7)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_invariant_inertia(self, seed):
        rng = np.random.default_rng(seed)
        x = blobs(rng, [(0, 0), (5, 0), (0, 5)], 8, 0.8)
        perm = rng.permutation(len(x))
        assert km_inertia(x, 3)[0] == pytest.approx(km_inertia(x[perm], 3)[0], abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_nearest_to_centroid_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 4))
        n = int(rng.integers(k + 3, 13))
        x = rng.normal(size=(n, 2)) * 3
        ref_val, ref_labels = best_partition(x, k)
        labels, cents = kmeans(x, k, seed)
        assert inertia(x, labels, cents) == pytest.approx(ref_val, abs=1e-9)
        assert partition(labels)[0] == partition(ref_labels)[0]
        assert set(nearest_to_centroids(x, labels, cents)) == nearest_to_centroid_brute(x, ref_labels)


class TestDBSCAN:
    def test_identical_points_one_cluster(self):
        assert dbscan(np.ones((5, 2)), 0.1, 5).tolist() == [0] * 5

    def test_far_pair_is_noise(self):
        assert dbscan(np.array([[0.0, 0.0], [3.0, 0.0]]), 1.0, 2).tolist() == [-1, -1]

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            dbscan(np.zeros((2, 2)), 0.0, 1)

    def test_labels_canonical(self):
        rng = np.random.default_rng(0)
        x = blobs(rng, [(5, 5), (0, 0)], 10)
        labels = dbscan(x, 1.0, 3)
        assert labels[0] == 0 and labels[10] == 1
        assert canonical_labels([5, 5, -1, 2, 5]).tolist() == [0, 0, -1, 1, 0]

    def test_fifty_random_instances_match_reachability_oracle(self):
        rng = np.random.default_rng(123)
        for trial in range(50):
            centers = rng.uniform(-4, 4, size=(int(rng.integers(1, 4)), 2))
            x = np.stack([centers[i % len(centers)] + rng.normal(0, 0.7, 2) for i in range(20)])
            eps = float(rng.uniform(0.4, 1.5))
            ms = int(rng.integers(1, 6))
            got, got_noise = partition(dbscan(x, eps, ms))
            ref, ref_noise = dbscan_reachability(x, eps, ms)
            assert got == ref, trial
            assert got_noise == ref_noise, trial

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_keeps_partition(self, seed):
        rng = np.random.default_rng(seed)
        x = blobs(rng, [(0, 0), (4, 4)], 10, 0.5)
        perm = rng.permutation(len(x))
        a, _ = partition(dbscan(x, 0.8, 3))
        b, _ = partition(dbscan(x[perm], 0.8, 3))
        # map permuted indices back
        b = {frozenset(int(perm[i]) for i in c) for c in b}
        assert a == b


class TestHelpers:
    def test_medoid(self):
        x = np.array([[0.0], [1.0], [2.0], [10.0]])
        assert medoid(x, np.array([0, 1, 2, 3])) in (1, 2)
        assert medoid(x, np.array([0, 1, 2])) == 1

    def test_default_eps_positive(self):
        assert default_eps(np.random.default_rng(0).normal(size=(10, 2))) > 0
        assert default_eps(np.zeros((1, 2))) > 0

    def test_params_validation(self):
        with pytest.raises(ValueError):
            ClusterParams(k=0)
        with pytest.raises(ValueError):
            ClusterParams(eps=-1.0)
        with pytest.raises(ValueError):
            ClusterParams(min_samples=0)


def make_pool(n_subjects=5, per=12, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    emb, sid = [], []
    for s in range(n_subjects):
        c = rng.normal(0, 3, dim)
        # each subject: a tight main mode plus a looser minor mode
        emb.append(c + rng.normal(0, 0.2, (per - 4, dim)))
        emb.append(c + 2.0 + rng.normal(0, 0.5, (4, dim)))
        sid += [s] * per
    emb = np.concatenate(emb)
    n = len(emb)
    conf = rng.uniform(0.3, 1.0, n)
    meta = {s: {"gender": "f" if s % 2 else "m"} for s in range(n_subjects)}
    return SourcePool(emb, np.array(sid), np.ones(n, int), confidence=conf, correct=conf > 0.5, metadata=meta,
                      refs=[f"s{s}/f{i}.png" for i, s in enumerate(sid)])


EXTRA = dict(target_embeddings=np.zeros((3, 4)), target_metadata={"gender": "f"})


class TestSelection:
    @pytest.mark.parametrize("method", [m for m in METHODS if m not in ("db-all", "km-all", "match")])
    def test_one_per_subject(self, method):
        pool = make_pool()
        ps = select_prototypes(pool, method, ClusterParams(seed=1), **EXTRA)
        assert sorted(e.subject_id for e in ps.entries) == list(range(5))
        for e in ps.entries:
            assert np.array_equal(pool.embeddings[e.index], e.embedding)  # members, not centroids
            assert pool.subject_ids[e.index] == e.subject_id

    def test_km_all_returns_k(self):
        pool = make_pool()
        assert len(select_prototypes(pool, "km-all")) == 5
        assert len(select_prototypes(pool, "km-all", ClusterParams(k=3))) == 3

    def test_db_all_returns_cluster_medoids(self):
        pool = make_pool()
        ps = select_prototypes(pool, "db-all", ClusterParams(eps=1.0, min_samples=3))
        labels = dbscan(pool.embeddings, 1.0, 3)
        assert len(ps) == labels.max() + 1
        for e in ps.entries:
            members = np.flatnonzero(labels == labels[e.index])
            assert e.index == medoid(pool.embeddings, members)

    def test_match_uses_metadata(self):
        pool = make_pool()
        ps = select_prototypes(pool, "match", **EXTRA)
        assert sorted(e.subject_id for e in ps.entries) == [1, 3]
        with pytest.raises(ValueError):
            select_prototypes(pool, "match")

    def test_match_falls_back_to_random(self):
        pool = make_pool()
        ps = select_prototypes(pool, "match", target_metadata={"gender": "x"})
        assert len(ps) == 5

    def test_top_takes_most_confident_correct(self):
        pool = make_pool()
        ps = select_prototypes(pool, "top")
        for e in ps.entries:
            rows = np.flatnonzero((pool.subject_ids == e.subject_id) & pool.correct)
            assert pool.confidence[e.index] == pool.confidence[rows].max()

    def test_km_sub_is_nearest_to_subject_mean(self):
        pool = make_pool()
        ps = select_prototypes(pool, "km-sub")
        for e in ps.entries:
            rows = np.flatnonzero(pool.subject_ids == e.subject_id)
            assert nearest_to_centroid_brute(pool.embeddings[rows], np.zeros(len(rows), int)) == \
                {int(np.flatnonzero(rows == e.index)[0])}

    def test_db_sub_and_db_d_pick_the_main_mode(self):
        pool = make_pool()
        for method in ("db-sub", "db-d"):
            ps = select_prototypes(pool, method, ClusterParams(eps=0.9, min_samples=3))
            for e in ps.entries:
                # the tight mode holds the first 8 frames of each subject
                assert e.index % 12 < 8, method

    def test_db_cls_follows_target_centroid(self):
        pool = make_pool()
        s0 = pool.embeddings[pool.subject_ids == 0]
        ps = select_prototypes(pool, "db-cls", ClusterParams(eps=1.2, min_samples=2),
                               target_embeddings=s0[8:] + 0.01)
        assert ps.entries[0].index % 12 >= 8
        with pytest.raises(ValueError):
            select_prototypes(pool, "db-cls")

    def test_zero_cluster_fallback_warns(self, caplog):
        pool = make_pool()
        with caplog.at_level("WARNING"):
            ps = select_prototypes(pool, "db-sub", ClusterParams(eps=1e-6, min_samples=3))
        assert len(ps) == 5
        assert "medoid" in caplog.text
        for e in ps.entries:
            rows = np.flatnonzero(pool.subject_ids == e.subject_id)
            assert e.index == medoid(pool.embeddings, rows)

    @pytest.mark.parametrize("method", METHODS)
    def test_single_point_pool(self, method):
        pool = SourcePool(np.array([[1.0, 2.0]]), [0], [1], confidence=np.array([0.9]), correct=np.array([True]),
                          metadata={0: {"gender": "f"}})
        ps = select_prototypes(pool, method, **EXTRA)
        assert [e.index for e in ps.entries] == [0]

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            select_prototypes(make_pool(), "best")

    def test_csv_roundtrip(self, tmp_path):
        pool = make_pool()
        ps = select_prototypes(pool, "km-sub")
        path = ps.write(tmp_path / "protos.csv")
        head = path.read_text().splitlines()[0]
        assert head == "frame_path,subject_id,expression,method"
        back = PrototypeSet.read(path, pool.refs)
        assert back.indices == ps.indices
        assert back.method == "km-sub"
        assert np.allclose(np.stack([e.embedding for e in back.entries]), np.stack([e.embedding for e in ps.entries]))
        with pytest.raises(KeyError):
            PrototypeSet.read(path, ["elsewhere.png"])

    def test_entries_distinct(self):
        e = select_prototypes(make_pool(), "km-sub").entries[0]
        with pytest.raises(ValueError):
            PrototypeSet([e, e], "km-sub")
