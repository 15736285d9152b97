import itertools
import math

import numpy as np
import pytest

from pointnce.evaluation import (
    EmbeddingTable,
    InvarianceReport,
    ami,
    expected_mutual_information,
    invariance_report,
    kmeans,
    linear_probe,
    load_embeddings,
    mutual_information,
    pca_2d,
    retrieve,
    save_embeddings,
)


def multiset_permutations(values):
    """Distinct orderings of a label vector (deduplicated permutations)."""
    seen = set()
    for perm in itertools.permutations(values):
        if perm not in seen:
            seen.add(perm)
            yield perm


def mi_of(labels_a, labels_b):
    """Independent MI computation: plain dict counting and math.log."""
    n = len(labels_a)
    joint, ca, cb = {}, {}, {}
    for a, b in zip(labels_a, labels_b):
        joint[(a, b)] = joint.get((a, b), 0) + 1
        ca[a] = ca.get(a, 0) + 1
        cb[b] = cb.get(b, 0) + 1
    mi = 0.0
    for (a, b), nij in joint.items():
        mi += (nij / n) * math.log(n * nij / (ca[a] * cb[b]))
    return mi


def ami_permutation_oracle(labels_a, labels_b):
    """AMI with E[MI] averaged over every distinct rearrangement of labels_b."""
    labels_a, labels_b = list(labels_a), list(labels_b)
    n = len(labels_a)
    perms = list(multiset_permutations(labels_b))
    emi = sum(mi_of(labels_a, p) for p in perms) / len(perms)
    mi = mi_of(labels_a, labels_b)

    def entropy(labels):
        counts = {}
        for v in labels:
            counts[v] = counts.get(v, 0) + 1
        return -sum((c / n) * math.log(c / n) for c in counts.values())

    mean_h = 0.5 * (entropy(labels_a) + entropy(labels_b))
    denom = mean_h - emi
    if abs(denom) < 1e-15:
        return 1.0 if mi > 0 or mean_h == 0.0 else 0.0
    return (mi - emi) / denom


class TestAmi:
    def test_identical_labelings(self):
        assert ami([0, 1, 2, 0, 1], [0, 1, 2, 0, 1]) == 1.0
        assert ami([5, 5, 9], [1, 1, 0]) == 1.0  # identical up to renaming

    def test_single_cluster_vs_anything(self):
        assert ami([0, 0, 0, 0], [0, 1, 2, 3]) == pytest.approx(0.0, abs=1e-12)
        assert ami([0, 0, 0, 0], [0, 1, 1, 0]) == pytest.approx(0.0, abs=1e-12)

    def test_four_element_alternating(self):
        got = ami([0, 0, 1, 1], [0, 1, 0, 1])
        want = ami_permutation_oracle([0, 0, 1, 1], [0, 1, 0, 1])
        assert got == pytest.approx(want, abs=1e-9)

    def test_symmetry_and_relabeling(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            a = rng.integers(0, 3, size=12)
            b = rng.integers(0, 3, size=12)
            assert ami(a, b) == pytest.approx(ami(b, a), abs=1e-12)
            remap = np.array([2, 0, 1])
            assert ami(remap[a], b) == pytest.approx(ami(a, b), abs=1e-12)

    def test_against_permutation_oracle_random(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            n = int(rng.integers(3, 8))
            a = rng.integers(0, 3, size=n)
            b = rng.integers(0, 3, size=n)
            assert ami(a, b) == pytest.approx(ami_permutation_oracle(a, b), abs=1e-9)

    def test_expected_mi_against_permutation_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(15):
            n = int(rng.integers(4, 8))
            a = list(rng.integers(0, 3, size=n))
            b = list(rng.integers(0, 3, size=n))
            perms = list(multiset_permutations(b))
            brute = sum(mi_of(a, p) for p in perms) / len(perms)
            counts_a = np.bincount(np.unique(a, return_inverse=True)[1])
            counts_b = np.bincount(np.unique(b, return_inverse=True)[1])
            exact = expected_mutual_information(counts_a, counts_b, n)
            assert exact == pytest.approx(brute, abs=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="equal length"):
            ami([0, 1], [0, 1, 2])


class TestKmeans:
    def test_k_equals_m(self):
        rng = np.random.default_rng(3)
        vectors = rng.standard_normal((12, 4))
        result = kmeans(vectors, 12, n_init=2, rng=np.random.default_rng(0))
        assert result.inertia == pytest.approx(0.0, abs=1e-18)
        assert len(set(result.assignments.tolist())) == 12

    def test_two_blobs_recovered_exactly(self):
        rng = np.random.default_rng(4)
        blob_a = rng.normal(0.0, 0.05, size=(40, 3))
        blob_b = rng.normal(5.0, 0.05, size=(40, 3))
        vectors = np.concatenate([blob_a, blob_b])
        labels = np.array([0] * 40 + [1] * 40)
        result = kmeans(vectors, 2, rng=np.random.default_rng(1))
        assert ami(labels, result.assignments) == 1.0

    def test_three_blob_inertia_matches_restart_oracle(self):
        rng = np.random.default_rng(5)
        centers = np.array([[0, 0, 0], [6, 0, 0], [0, 6, 0]], dtype=float)
        vectors = np.concatenate(
            [rng.normal(c, 0.3, size=(10, 3)) for c in centers]
        )
        result = kmeans(vectors, 3, rng=np.random.default_rng(2))

        # oracle: many independent restarts with plain Lloyd iterations
        best = math.inf
        orng = np.random.default_rng(123)
        for _ in range(1000):
            cs = vectors[orng.choice(len(vectors), 3, replace=False)].copy()
            for _ in range(100):
                d2 = ((vectors[:, None, :] - cs[None, :, :]) ** 2).sum(axis=2)
                assign = d2.argmin(axis=1)
                new = np.array(
                    [
                        vectors[assign == c].mean(axis=0) if np.any(assign == c) else cs[c]
                        for c in range(3)
                    ]
                )
                if np.allclose(new, cs):
                    break
                cs = new
            d2 = ((vectors[:, None, :] - cs[None, :, :]) ** 2).sum(axis=2)
            best = min(best, float(d2.min(axis=1).sum()))
        assert result.inertia == pytest.approx(best, abs=1e-9)

    def test_more_clusters_than_points_rejected(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4)

    def test_duplicate_points_with_empty_cluster_path(self):
        vectors = np.array([[0.0, 0], [0, 0], [0, 0], [1, 1], [1, 1], [2, 0]])
        result = kmeans(vectors, 3, rng=np.random.default_rng(6))
        assert result.inertia == pytest.approx(0.0, abs=1e-18)

    def test_deterministic_given_rng(self):
        rng_data = np.random.default_rng(7)
        vectors = rng_data.standard_normal((50, 8))
        a = kmeans(vectors, 5, rng=np.random.default_rng(11))
        b = kmeans(vectors, 5, rng=np.random.default_rng(11))
        np.testing.assert_array_equal(a.assignments, b.assignments)
        assert a.inertia == b.inertia


class TestLinearProbe:
    def make_table(self, vectors, labels, prefix):
        return EmbeddingTable(
            ids=[f"{prefix}{i}" for i in range(len(vectors))],
            vectors=np.asarray(vectors, dtype=np.float64),
            labels=np.asarray(labels),
        )

    def test_separable_two_class(self):
        rng = np.random.default_rng(8)
        train_x = np.concatenate(
            [rng.normal(-2, 0.2, size=(30, 5)), rng.normal(2, 0.2, size=(30, 5))]
        )
        train_y = np.array([0] * 30 + [1] * 30)
        test_x = np.concatenate(
            [rng.normal(-2, 0.2, size=(10, 5)), rng.normal(2, 0.2, size=(10, 5))]
        )
        test_y = np.array([0] * 10 + [1] * 10)
        acc = linear_probe(
            self.make_table(train_x, train_y, "tr"), self.make_table(test_x, test_y, "te")
        )
        assert acc == 1.0

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((400, 6))
        y = rng.integers(0, 2, size=400)
        acc = linear_probe(
            self.make_table(x[:200], y[:200], "tr"), self.make_table(x[200:], y[200:], "te")
        )
        assert abs(acc - 0.5) <= 0.1

    def test_against_independent_perceptron_oracle(self):
        rng = np.random.default_rng(10)
        centers = np.array([[2, 0, 0, 0], [-2, 1, 0, 0], [0, -2, 2, 0]], dtype=float)
        x = np.concatenate([rng.normal(c, 0.6, size=(40, 4)) for c in centers])
        y = np.repeat(np.arange(3), 40)
        perm = rng.permutation(len(x))
        x, y = x[perm], y[perm]
        train, test = self.make_table(x[:90], y[:90], "tr"), self.make_table(x[90:], y[90:], "te")
        acc = linear_probe(train, test)

        # oracle: averaged one-vs-rest perceptron, an entirely different
        # linear trainer
        w = np.zeros((3, 4))
        b = np.zeros(3)
        w_sum, b_sum = w.copy(), b.copy()
        for _ in range(200):
            for i in range(90):
                target = np.where(y[:90][i] == np.arange(3), 1.0, -1.0)
                pred = np.sign(w @ x[:90][i] + b)
                miss = pred != target
                w[miss] += target[miss, None] * x[:90][i]
                b[miss] += target[miss]
                w_sum += w
                b_sum += b
        scores = x[90:] @ w_sum.T + b_sum
        oracle_acc = float((scores.argmax(axis=1) == y[90:]).mean())
        assert abs(acc - oracle_acc) <= 0.02

    def test_orthogonal_transform_invariance(self):
        rng = np.random.default_rng(11)
        x = np.concatenate([rng.normal(-1, 0.5, size=(50, 6)), rng.normal(1, 0.5, size=(50, 6))])
        y = np.array([0] * 50 + [1] * 50)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        base = linear_probe(
            self.make_table(x[:70], y[:70], "tr"), self.make_table(x[70:], y[70:], "te")
        )
        rotated = linear_probe(
            self.make_table(x[:70] @ q, y[:70], "tr"), self.make_table(x[70:] @ q, y[70:], "te")
        )
        assert abs(base - rotated) <= 0.01

    def test_single_class_rejected(self):
        t = self.make_table(np.ones((4, 3)), [1, 1, 1, 1], "x")
        with pytest.raises(ValueError, match="two classes"):
            linear_probe(t, t)


class TestRetrieve:
    def make_table(self, vectors):
        return EmbeddingTable(ids=[f"id{i:03d}" for i in range(len(vectors))], vectors=vectors)

    def test_duplicate_ranked_first(self):
        rng = np.random.default_rng(12)
        vectors = rng.standard_normal((10, 4))
        vectors[7] = vectors[3]
        ranked = retrieve(self.make_table(vectors), "id003", 3)
        assert ranked[0][0] == "id007"
        assert ranked[0][1] == 0.0

    def test_all_neighbors_fully_sorted(self):
        rng = np.random.default_rng(13)
        table = self.make_table(rng.standard_normal((15, 3)))
        ranked = retrieve(table, "id005", 14)
        assert len(ranked) == 14
        dists = [d for _, d in ranked]
        assert dists == sorted(dists)
        assert "id005" not in [name for name, _ in ranked]

    def test_matches_brute_force_on_random_tables(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            m = int(rng.integers(6, 21))
            table = self.make_table(rng.standard_normal((m, 8)))
            q = int(rng.integers(m))
            n = int(rng.integers(1, m))
            ranked = retrieve(table, table.ids[q], n)
            oracle = sorted(
                (float(np.linalg.norm(table.vectors[i] - table.vectors[q])), table.ids[i])
                for i in range(m)
                if i != q
            )[:n]
            assert [(name, pytest.approx(d)) for d, name in oracle] == [
                (name, pytest.approx(d)) for name, d in ranked
            ]

    def test_tie_break_by_id(self):
        vectors = np.zeros((4, 3))
        vectors[0] = [1, 0, 0]
        ranked = retrieve(self.make_table(vectors), "id000", 3)
        assert [name for name, _ in ranked] == ["id001", "id002", "id003"]

    def test_unknown_id_rejected(self):
        table = self.make_table(np.zeros((3, 2)))
        with pytest.raises(ValueError, match="unknown embedding id"):
            retrieve(table, "nope", 1)

    def test_n_too_large_rejected(self):
        table = self.make_table(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            retrieve(table, "id000", 3)


class TestInvarianceReport:
    def test_mock_invariant_encoder_scores_perfectly(self):
        rng = np.random.default_rng(15)
        shapes = []
        for i in range(6):
            cloud = rng.standard_normal((32, 3))
            cloud *= (0.2 + 0.15 * i) / np.linalg.norm(cloud, axis=1).max()
            shapes.append(cloud)

        def mock_embed(cloud):
            # rotation leaves point norms unchanged, so the rounded mean
            # norm identifies the source shape exactly
            key = int(round(np.linalg.norm(cloud, axis=1).mean() * 1e6)) % 997
            rng_local = np.random.default_rng(key)
            v = rng_local.standard_normal(16)
            return v / np.linalg.norm(v)

        report = invariance_report(shapes, 10, np.random.default_rng(0), mock_embed)
        assert report.ami == 1.0
        assert report.intra_cosine == pytest.approx(1.0, abs=1e-12)
        assert report.projection.shape == (60, 2)

    def test_preconditions(self):
        shapes = [np.random.default_rng(0).standard_normal((8, 3))]
        with pytest.raises(ValueError, match="at least two"):
            invariance_report(shapes, 5, np.random.default_rng(0), lambda c: np.ones(4))

    def test_report_fields_consistent(self):
        rng = np.random.default_rng(16)
        shapes = [rng.standard_normal((16, 3)) for _ in range(3)]

        def noisy_embed(cloud):
            v = rng.standard_normal(8)
            return v / np.linalg.norm(v)

        report = invariance_report(shapes, 4, np.random.default_rng(1), noisy_embed)
        assert isinstance(report, InvarianceReport)
        assert report.shape_index.shape == (12,)
        assert -1.0 <= report.inter_cosine <= 1.0


class TestEmbeddingTableIO:
    def test_round_trip_with_labels(self, tmp_path):
        rng = np.random.default_rng(17)
        table = EmbeddingTable(
            ids=["a", "b", "c"], vectors=rng.standard_normal((3, 5)), labels=np.array([0, 1, 0])
        )
        path = tmp_path / "emb.i3de"
        save_embeddings(path, table)
        back = load_embeddings(path)
        assert back.ids == table.ids
        np.testing.assert_array_equal(back.vectors, table.vectors)
        np.testing.assert_array_equal(back.labels, table.labels)

    def test_round_trip_without_labels(self, tmp_path):
        table = EmbeddingTable(ids=["x", "y"], vectors=np.eye(2))
        path = tmp_path / "emb.i3de"
        save_embeddings(path, table)
        back = load_embeddings(path)
        assert back.ids == ["x", "y"]
        assert back.labels is None

    def test_truncated_payload_rejected(self, tmp_path):
        table = EmbeddingTable(ids=["x", "y"], vectors=np.eye(2))
        path = tmp_path / "emb.i3de"
        save_embeddings(path, table)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(ValueError, match="truncated"):
            load_embeddings(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.i3de"
        path.write_bytes(b"nope 1 1 1\n" + b"\x00" * 8)
        with pytest.raises(ValueError, match="not an embedding table"):
            load_embeddings(path)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            EmbeddingTable(ids=["a", "a"], vectors=np.eye(2))


def test_pca_projection_deterministic_and_centered():
    rng = np.random.default_rng(18)
    vectors = rng.standard_normal((40, 10))
    p1 = pca_2d(vectors)
    p2 = pca_2d(vectors)
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_allclose(p1.mean(axis=0), 0.0, atol=1e-9)


def test_mutual_information_basics():
    table = np.array([[2, 0], [0, 2]])
    assert mutual_information(table) == pytest.approx(math.log(2.0))
    flat = np.array([[1, 1], [1, 1]])
    assert mutual_information(flat) == pytest.approx(0.0, abs=1e-15)
