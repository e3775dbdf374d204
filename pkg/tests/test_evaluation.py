import numpy as np
import pytest

from sue.align import AlignmentModel
from sue.errors import ConfigError
from sue.evaluation import (
    EvalReport,
    knn_classify,
    modality_gap,
    paired_distance_experiment,
    recall_at_k,
    rw_similarity,
    rw_universality_experiment,
    sweep,
    zero_shot,
)
from sue.io import EmbeddingSet, PairManifest
from sue.synth import SyntheticScenario, acceptance_scenario, generate


def random_orthogonal(k, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((k, k)))
    return q


class TestRecallAtK:
    def test_self_retrieval(self, rng):
        q = rng.standard_normal((20, 4))
        assert recall_at_k(q, q.copy(), [1])[1] == 100.0

    def test_random_embeddings_match_chance_level(self):
        """R@10 on 400 random queries averages 2.5% over repeated trials."""
        vals = []
        rng = np.random.default_rng(0)
        for _ in range(200):
            q = rng.standard_normal((400, 8))
            g = rng.standard_normal((400, 8))
            vals.append(recall_at_k(q, g, [10])[10])
        assert abs(np.mean(vals) - 2.5) <= 0.5

    def test_hand_ranked_instance(self):
        """Partner ranks are (2, 1, 2) by construction: R@1 = 33.3, R@5 = 100."""
        gallery = np.eye(3)
        queries = np.array([[0.6, 0.8, 0.0], [0.0, 1.0, 0.0], [0.8, 0.0, 0.6]])
        r = recall_at_k(queries, gallery, [1, 5])
        assert r[1] == pytest.approx(100.0 / 3.0, abs=1e-9)
        assert r[5] == 100.0

    def test_monotone_in_k(self, rng):
        q = rng.standard_normal((50, 6))
        g = rng.standard_normal((50, 6))
        r = recall_at_k(q, g, [1, 5, 10, 25])
        vals = [r[k] for k in (1, 5, 10, 25)]
        assert vals == sorted(vals)

    def test_rotation_invariance_exact(self, rng):
        q = rng.standard_normal((40, 5))
        g = rng.standard_normal((40, 5))
        rot = random_orthogonal(5, 7)
        assert recall_at_k(q, g, [1, 5, 10]) == recall_at_k(q @ rot, g @ rot, [1, 5, 10])

    def test_k_beyond_gallery_saturates(self, rng):
        """Every partner is in the top-k when k covers the whole gallery."""
        q = rng.standard_normal((5, 2))
        assert recall_at_k(q, rng.standard_normal((5, 2)), [10])[10] == 100.0

    def test_invalid_arguments(self, rng):
        with pytest.raises(ConfigError):
            recall_at_k(rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), [0])


class TestZeroShot:
    def test_centroid_prototypes_are_perfect(self, rng):
        centers = 10.0 * rng.standard_normal((4, 6))
        labels = np.repeat(np.arange(4), 25)
        points = centers[labels] + 0.1 * rng.standard_normal((100, 6))
        protos = np.stack([points[labels == c].mean(axis=0) for c in range(4)])
        assert zero_shot(points, protos, labels) == 100.0

    def test_single_prototype_degenerate(self, rng):
        points = rng.standard_normal((10, 3))
        assert zero_shot(points, points[:1] * 0 + 1.0, np.zeros(10, dtype=int)) == 100.0

    def test_label_out_of_range(self, rng):
        with pytest.raises(ConfigError):
            zero_shot(rng.standard_normal((5, 3)), rng.standard_normal((2, 3)), [0, 1, 2, 0, 1])

    def test_scale_invariance(self, rng):
        pts = rng.standard_normal((30, 4))
        protos = rng.standard_normal((3, 4))
        labels = rng.integers(0, 3, 30)
        assert zero_shot(pts, protos, labels) == zero_shot(5.0 * pts, protos, labels)


class TestKnnClassify:
    def test_exact_training_point(self, rng):
        train = rng.standard_normal((20, 3))
        labels = rng.integers(0, 4, 20)
        pred = knn_classify(train, labels, train[[3]], k=1)
        assert pred[0] == labels[3]

    def test_k_equals_train_size_gives_majority(self, rng):
        train = rng.standard_normal((9, 2))
        labels = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1])
        pred = knn_classify(train, labels, rng.standard_normal((5, 2)), k=9)
        assert np.all(pred == 0)

    def test_matches_brute_force_oracle(self, rng):
        """Two-cluster instance: prediction equals an independent naive vote."""
        centers = np.array([[4.0, 0.0], [-4.0, 0.0]])
        labels = np.repeat([0, 1], 30)
        train = centers[labels] + rng.standard_normal((60, 2))
        test = centers[np.repeat([0, 1], 10)] + rng.standard_normal((20, 2))
        pred = knn_classify(train, labels, test, k=5)

        unit_tr = train / np.linalg.norm(train, axis=1, keepdims=True)
        unit_te = test / np.linalg.norm(test, axis=1, keepdims=True)
        expected = []
        for row in unit_te:
            d = 1.0 - unit_tr @ row
            order = sorted(range(60), key=lambda j: (d[j], j))[:5]
            votes = {}
            for j in order:
                cnt, tot = votes.get(labels[j], (0, 0.0))
                votes[labels[j]] = (cnt + 1, tot + d[j])
            expected.append(min(votes, key=lambda c: (-votes[c][0], votes[c][1], c)))
        np.testing.assert_array_equal(pred, expected)

    def test_rescale_invariance(self, rng):
        train = rng.standard_normal((30, 3))
        labels = rng.integers(0, 3, 30)
        test = rng.standard_normal((10, 3))
        np.testing.assert_array_equal(
            knn_classify(train, labels, test, 5), knn_classify(2.5 * train, labels, 7 * test, 5)
        )

    def test_empty_train_rejected(self):
        with pytest.raises(ConfigError):
            knn_classify(np.zeros((0, 2)), [], np.ones((1, 2)), 1)


class TestRwSimilarity:
    def test_equal_matrices(self):
        p = np.full((3, 3), 1 / 3)
        assert rw_similarity(p, p) == 0.0

    def test_disjoint_supports(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        b = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert rw_similarity(a, b) == pytest.approx(1.0)

    def test_hand_computed_value(self):
        a = np.diag([1.0, 1.0, 1.0])
        b = np.full((3, 3), 1 / 3)
        expected = np.linalg.norm(a - b) / np.linalg.norm(a + b)
        assert rw_similarity(a, b) == pytest.approx(expected, abs=1e-15)

    def test_symmetry(self, rng):
        a = rng.uniform(size=(4, 4))
        b = rng.uniform(size=(4, 4))
        assert rw_similarity(a, b) == rw_similarity(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            rw_similarity(np.ones((2, 2)), np.ones((3, 3)))


class TestRwUniversality:
    def test_rotated_copy_is_detected(self, rng):
        """A cosine-preserving rotation gives near-zero paired distances."""
        x = rng.standard_normal((300, 6))
        y = x @ random_orthogonal(6, 5)
        pairs = PairManifest(np.column_stack([np.arange(300)] * 2))
        report = rw_universality_experiment(
            EmbeddingSet(x), EmbeddingSet(y), pairs, batch_size=16, n_batches=40, seed=0
        )
        assert report.metrics["rw_dist_paired_mean"] <= 1e-6
        assert report.metrics["rw_dist_shuffled_mean"] > 0.1
        assert report.metrics["p_value"] < 0.05

    def test_independent_resample_is_null(self, rng):
        """Unrelated modalities: paired and shuffled are indistinguishable."""
        x = rng.standard_normal((400, 6))
        y = rng.standard_normal((400, 6))
        pairs = PairManifest(np.column_stack([np.arange(400)] * 2))
        report = rw_universality_experiment(
            EmbeddingSet(x), EmbeddingSet(y), pairs, batch_size=16, n_batches=60, seed=1
        )
        assert report.metrics["p_value"] > 0.05

    def test_zero_batches_rejected(self, rng):
        x = EmbeddingSet(rng.standard_normal((50, 3)))
        pairs = PairManifest(np.column_stack([np.arange(50)] * 2))
        with pytest.raises(ConfigError):
            rw_universality_experiment(x, x, pairs, batch_size=9, n_batches=0)

    def test_insufficient_pairs(self, rng):
        x = EmbeddingSet(rng.standard_normal((50, 3)))
        with pytest.raises(ConfigError, match="pairs"):
            rw_universality_experiment(x, x, PairManifest(np.array([[0, 0]])), batch_size=9)


def identity_model():
    return AlignmentModel(spectral_x=None, spectral_y=None, cca=None, residual=None)


class TestPairedDistance:
    def test_identical_modalities_have_zero_paired_mean(self, rng):
        pts = rng.standard_normal((30, 4))
        report = paired_distance_experiment(identity_model(), pts, pts.copy(), seed=0)
        assert report.metrics["paired_mean"] == pytest.approx(0.0, abs=1e-12)
        assert report.metrics["shuffled_mean"] > 0.0

    def test_single_pair_rejected(self, rng):
        with pytest.raises(ConfigError):
            paired_distance_experiment(identity_model(), rng.standard_normal((1, 3)),
                                       rng.standard_normal((1, 3)))


class TestModalityGap:
    def test_identical_clouds(self, rng):
        x = rng.standard_normal((40, 3))
        assert modality_gap(x, x.copy()) == 0.0

    def test_separated_unit_clouds_match_sampling_oracle(self):
        """1-D unit clouds 10 apart: gap is 10 / mean|deviation| of the sample."""
        rng = np.random.default_rng(3)
        x = rng.standard_normal((20_000, 1))
        y = rng.standard_normal((20_000, 1)) + 10.0
        gap = modality_gap(x, y)
        spread = np.concatenate([np.abs(x - x.mean()), np.abs(y - y.mean())]).mean()
        centroid_dist = abs(x.mean() - y.mean())
        assert gap == pytest.approx(centroid_dist / spread, rel=1e-12)
        assert gap == pytest.approx(10.0 / np.sqrt(2.0 / np.pi), rel=0.05)

    def test_interleaved_identical_distributions(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((5000, 3))
        y = rng.standard_normal((5000, 3))
        assert modality_gap(x, y) <= 0.05

    def test_too_few_points(self, rng):
        with pytest.raises(ConfigError):
            modality_gap(rng.standard_normal((1, 2)), rng.standard_normal((5, 2)))


class TestEvalReport:
    def test_json_round_trip_lossless(self):
        report = EvalReport(
            task="t", metrics={"r_at_10": 12.345678901234567, "p": 1e-300},
            config={"alpha": [1, 2]}, seed=3, n_test=7,
            samples={"paired": [0.1, 0.2]},
        )
        back = EvalReport.from_json(report.to_json())
        assert back.metrics == report.metrics
        assert back.samples == report.samples
        assert back.config == report.config

    def test_csv_shapes(self):
        report = EvalReport(task="t", metrics={"b": 1.0, "a": 2.0},
                            samples={"s": [1.0, 2.0], "t": [3.0]})
        lines = report.metrics_csv().splitlines()
        assert lines[0] == "metric,value"
        assert lines[1].startswith("a,")
        sample_lines = report.samples_csv().splitlines()
        assert sample_lines[0] == "s,t"
        assert sample_lines[2] == "2.0,"


class TestZeroShotEndToEnd:
    def test_cross_modal_labelling_beats_chance(self):
        """Label prototypes from modality X classify mapped Y points."""
        from dataclasses import replace

        from sue.align import SueConfig, fit_sue
        from sue.synth import weaken

        scen = SyntheticScenario(
            latent_kind="gaussian_mixture", latent_dim=6, n=600, n_components=5,
            component_spread=3.0, d1=24, d2=32, noise=0.05, seed=2,
        )
        x_all, y_all, labels = generate(replace(scen, n=700))
        train_x = EmbeddingSet(x_all.data[:600], labels=labels[:600])
        train_y = EmbeddingSet(y_all.data[:600], labels=labels[:600])
        weak = weaken(train_x, train_y, m=40, seed=2)
        cfg = SueConfig(k_neighbors=40, se_dim=12, cca_dim=8, mmd_epochs=30,
                        mmd_batch_size=128, seed=2)
        model = fit_sue(weak.x_set, weak.y_set, weak.manifest, cfg)
        mapped_x = model.map_x(weak.x_set.data)
        prototypes = np.stack(
            [mapped_x[weak.x_set.labels == c].mean(axis=0) for c in range(5)]
        )
        acc = zero_shot(model.map_y(y_all.data[600:]), prototypes, labels[600:])
        assert acc > 20.0  # strictly above the 5-class chance level


class TestSweep:
    def test_empty_grid(self):
        from sue.align import SueConfig

        assert sweep([], acceptance_scenario(n=100), SueConfig()) == []

    def test_errors_recorded_not_raised(self):
        from sue.align import SueConfig

        scen = SyntheticScenario(latent_kind="gaussian_mixture", latent_dim=4, n=80,
                                 n_components=3, d1=8, d2=8, seed=0)
        cfg = SueConfig(k_neighbors=10, se_dim=6, cca_dim=4, mmd_epochs=2, mmd_batch_size=8)
        grid = [
            {"m_pairs": 0, "seed": 0},  # fails at the pairing stage
            {"m_pairs": 20, "seed": 0, "use_mmd": False},
        ]
        reports = sweep(grid, scen, cfg, n_test=20, ks=(1, 5))
        assert reports[0].task == "error"
        assert "error" in reports[0].config
        assert reports[1].task.startswith("retrieval")

    def test_unknown_grid_key_rejected(self):
        from sue.align import SueConfig

        with pytest.raises(ConfigError, match="unknown sweep keys"):
            sweep([{"bogus": 1}], acceptance_scenario(n=100), SueConfig())
