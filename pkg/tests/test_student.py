import numpy as np
import pytest

from relsearch import evalmetrics as em
from relsearch import neuralcore as nc
from relsearch import student as stu
from relsearch.corpus import SoftLabel
from relsearch.features import FeatureLayout, StudentFeatureVector


def small_layout():
    return FeatureLayout(
        d_query_emb=3,
        d_pin_emb=2,
        numerical_names=("bm25:t", "overlap:t", "engagement_rate"),
        d_num=2,
        categorical=(("topic", ("x", "y")),),
        d_cat=2,
    )


def random_fv(rng, layout, rate=None):
    return StudentFeatureVector(
        query_embedding=rng.normal(size=layout.d_query_emb),
        pin_embedding=rng.normal(size=layout.d_pin_emb),
        bm25=rng.uniform(0.0, 2.0, size=1),
        overlap=rng.uniform(0.0, 1.0, size=1),
        engagement_rate=float(rng.uniform()) if rate is None else rate,
        flags=np.array([1.0, 0.0]),
        categorical_ids=(int(rng.integers(0, 3)),),
        layout_hash=layout.layout_hash(),
    )


def labeled_batch(rng, layout, n, target_of=None):
    pairs = []
    for _ in range(n):
        fv = random_fv(rng, layout)
        if target_of is None:
            probs = rng.dirichlet(np.ones(5))
            label = SoftLabel(tuple(float(p) for p in probs))
        else:
            label = target_of(fv)
        pairs.append((fv, label))
    return stu.FeatureBatch.from_pairs(pairs, layout)


class TestFeatureBatch:
    def test_from_pairs_layout(self):
        layout = small_layout()
        rng = np.random.default_rng(0)
        fv = random_fv(rng, layout, rate=0.25)
        batch = stu.FeatureBatch.from_pairs([(fv, SoftLabel.one_hot(2))], layout)
        assert len(batch) == 1
        assert batch.query_emb.shape == (1, 3)
        assert batch.pin_emb.shape == (1, 2)
        assert batch.numerical.shape == (1, 3)
        # numerical row is bm25 fields, then overlaps, then the rate
        assert batch.numerical[0].tolist() == [
            float(fv.bm25[0]),
            float(fv.overlap[0]),
            0.25,
        ]
        assert batch.cat_ids.shape == (1, 1)
        assert batch.flags.shape == (1, 2)
        assert batch.targets.shape == (1, 5)
        assert batch.layout_hash == layout.layout_hash()

    def test_unlabeled_has_no_targets(self):
        layout = small_layout()
        rng = np.random.default_rng(1)
        batch = stu.FeatureBatch.from_pairs(
            [(random_fv(rng, layout), None), (random_fv(rng, layout), None)], layout
        )
        assert batch.targets is None
        assert len(batch) == 2

    def test_mixed_labels_rejected(self):
        layout = small_layout()
        rng = np.random.default_rng(2)
        pairs = [
            (random_fv(rng, layout), SoftLabel.one_hot(1)),
            (random_fv(rng, layout), None),
        ]
        with pytest.raises(stu.StudentError, match="mixed"):
            stu.FeatureBatch.from_pairs(pairs, layout)

    def test_foreign_layout_rejected(self):
        layout = small_layout()
        rng = np.random.default_rng(3)
        fv = random_fv(rng, layout)
        fv.layout_hash = "0" * 16
        with pytest.raises(stu.StudentError, match="layout"):
            stu.FeatureBatch.from_pairs([(fv, None)], layout)

    def test_empty_iterable(self):
        layout = small_layout()
        batch = stu.FeatureBatch.from_pairs([], layout)
        assert len(batch) == 0
        assert batch.targets is None

    def test_take_subset(self):
        layout = small_layout()
        rng = np.random.default_rng(4)
        batch = labeled_batch(rng, layout, 5)
        sub = batch.take(np.array([3, 0]))
        assert len(sub) == 2
        assert np.array_equal(sub.numerical[0], batch.numerical[3])
        assert np.array_equal(sub.targets[1], batch.targets[0])
        assert sub.layout_hash == batch.layout_hash


class TestForward:
    def test_probabilities(self):
        layout = small_layout()
        rng = np.random.default_rng(5)
        model = stu.init_student(layout, stu.StudentConfig(8, 6), seed=0)
        batch = labeled_batch(rng, layout, 4)
        probs = stu.student_forward(model, batch)
        assert probs.shape == (4, 5)
        assert probs.sum(axis=1) == pytest.approx(np.ones(4))
        assert np.all(probs >= 0.0)

    def test_hash_mismatch_rejected(self):
        layout = small_layout()
        rng = np.random.default_rng(6)
        model = stu.init_student(layout, stu.StudentConfig(8, 6), seed=0)
        batch = labeled_batch(rng, layout, 2)
        batch.layout_hash = "f" * 16
        with pytest.raises(stu.StudentError, match="layout"):
            stu.student_forward(model, batch)

    def test_score_one_matches_batch(self):
        layout = small_layout()
        rng = np.random.default_rng(7)
        model = stu.init_student(layout, stu.StudentConfig(8, 6), seed=0)
        fv = random_fv(rng, layout)
        label = stu.score_one(model, fv)
        batch = stu.FeatureBatch.from_pairs([(fv, None)], layout)
        row = stu.student_forward(model, batch)[0]
        assert label.probs == tuple(float(p) for p in row)

    def test_init_shapes(self):
        layout = small_layout()
        model = stu.init_student(layout, stu.StudentConfig(8, 6), seed=0)
        assert model.params["num_w"].shape == (3, 2)
        assert model.params["cat:topic"].shape == (3, 2)  # 2 values + OOV row
        assert model.params["fc1_w"].shape == (8, layout.input_dim)
        assert model.params["out_w"].shape == (5, 6)


class TestExpectedGain:
    def test_endpoints(self):
        assert stu.expected_gain(np.eye(5)[0]) == pytest.approx(0.0)
        assert stu.expected_gain(np.eye(5)[4]) == pytest.approx(1.0)

    def test_uniform(self):
        assert stu.expected_gain(np.full(5, 0.2)) == pytest.approx(0.5)

    def test_matrix(self):
        probs = np.array([[1, 0, 0, 0, 0], [0, 0, 0, 0, 1]], dtype=np.float64)
        assert stu.expected_gain(probs).tolist() == [0.0, 1.0]


class TestGradients:
    def test_match_finite_differences(self):
        layout = small_layout()
        rng = np.random.default_rng(8)
        config = stu.StudentConfig(6, 4)
        model = stu.init_student(layout, config, seed=1)
        batch = labeled_batch(rng, layout, 7)

        def loss_fn(params):
            m = stu.StudentModel(params=params, layout=layout, config=config)
            return stu.student_loss_and_grads(m, batch)

        assert nc.grad_check(loss_fn, model.params, n_probes=150, seed=2) < 1e-5

    def test_missing_targets_rejected(self):
        layout = small_layout()
        rng = np.random.default_rng(9)
        model = stu.init_student(layout, stu.StudentConfig(6, 4), seed=1)
        batch = stu.FeatureBatch.from_pairs([(random_fv(rng, layout), None)], layout)
        with pytest.raises(stu.StudentError, match="targets"):
            stu.student_loss_and_grads(model, batch)


def rate_task_label(fv):
    return SoftLabel.one_hot(5 if fv.engagement_rate > 0.5 else 1)


class TestTraining:
    def test_learns_separable_task(self):
        layout = small_layout()
        rng = np.random.default_rng(10)
        train = labeled_batch(rng, layout, 120, target_of=rate_task_label)
        valid = labeled_batch(rng, layout, 40, target_of=rate_task_label)
        config = stu.StudentTrainConfig(
            epochs=60, batch_size=32, seed=3, lr=0.02, model=stu.StudentConfig(16, 8)
        )
        model, history = stu.train_student(train, valid, config, layout)
        assert max(h["valid_accuracy"] for h in history) >= 0.9
        assert history[0]["train_loss"] > history[-1]["train_loss"]

    def test_empty_batch_rejected(self):
        layout = small_layout()
        empty = stu.FeatureBatch.from_pairs([], layout)
        with pytest.raises(stu.StudentError, match="empty"):
            stu.train_student(empty, None, stu.StudentTrainConfig(), layout)

    def test_unlabeled_batch_rejected(self):
        layout = small_layout()
        rng = np.random.default_rng(11)
        batch = stu.FeatureBatch.from_pairs([(random_fv(rng, layout), None)], layout)
        with pytest.raises(stu.StudentError, match="targets"):
            stu.train_student(batch, None, stu.StudentTrainConfig(), layout)

    def test_deterministic(self):
        layout = small_layout()
        rng = np.random.default_rng(12)
        train = labeled_batch(rng, layout, 40)
        config = stu.StudentTrainConfig(
            epochs=3, batch_size=16, seed=3, model=stu.StudentConfig(8, 6)
        )
        model_a, hist_a = stu.train_student(train, train, config, layout)
        model_b, hist_b = stu.train_student(train, train, config, layout)
        assert hist_a == hist_b
        for name in model_a.params:
            assert np.array_equal(model_a.params[name], model_b.params[name])


class TestEval:
    def _trained(self):
        layout = small_layout()
        rng = np.random.default_rng(13)
        train = labeled_batch(rng, layout, 120, target_of=rate_task_label)
        config = stu.StudentTrainConfig(
            epochs=40, batch_size=32, seed=3, lr=0.02, model=stu.StudentConfig(16, 8)
        )
        model, _ = stu.train_student(train, None, config, layout)
        return layout, rng, model

    def test_report_without_ranking(self):
        layout, rng, model = self._trained()
        test = labeled_batch(rng, layout, 30, target_of=rate_task_label)
        report = stu.eval_student(model, test)
        assert report.n_examples == 30
        assert report.accuracy >= 0.8
        assert report.ndcg_at_k == {}

    def test_ranking_metrics_per_query(self):
        layout, rng, model = self._trained()
        pairs, query_ids = [], []
        for q in range(6):
            for rate, level in ((0.9, 5), (0.1, 1)):
                fv = random_fv(rng, layout, rate=rate)
                pairs.append((fv, SoftLabel.one_hot(level)))
                query_ids.append(f"q{q}")
        batch = stu.FeatureBatch.from_pairs(pairs, layout)
        report = stu.eval_student(model, batch, query_ids=query_ids, ks=(2,))
        # the all-maximal ideal caps a perfect [5, 1] ranking below 1.0
        perfect = em.ndcg_at_k([5, 1], 2)
        flipped = em.ndcg_at_k([1, 5], 2)
        assert report.ndcg_at_k[2] == pytest.approx(perfect)
        assert report.ndcg_at_k[2] > flipped
        assert report.precision_at_k[2] == pytest.approx(0.5)

    def test_query_ids_length_checked(self):
        layout, rng, model = self._trained()
        test = labeled_batch(rng, layout, 4)
        with pytest.raises(stu.StudentError, match="query_ids"):
            stu.eval_student(model, test, query_ids=["q1"])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        layout = small_layout()
        model = stu.init_student(layout, stu.StudentConfig(8, 6), seed=4)
        path = tmp_path / "student.json"
        stu.save_student(model, path)
        loaded = stu.load_student(path)
        assert loaded.layout == layout
        assert loaded.config == model.config
        for name in model.params:
            assert np.array_equal(loaded.params[name], model.params[name])

    def test_expected_layout_enforced(self, tmp_path):
        layout = small_layout()
        model = stu.init_student(layout, stu.StudentConfig(8, 6), seed=4)
        path = tmp_path / "student.json"
        stu.save_student(model, path)
        other = FeatureLayout(
            d_query_emb=4,
            d_pin_emb=2,
            numerical_names=("a",),
            d_num=2,
            categorical=(),
            d_cat=2,
        )
        with pytest.raises(stu.StudentError, match="layout"):
            stu.load_student(path, expected_layout=other)
        assert stu.load_student(path, expected_layout=layout) is not None

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "x.json"
        nc.save_checkpoint(path, {"w": np.zeros(2)}, meta={"kind": "teacher"})
        with pytest.raises(stu.StudentError, match="not a student"):
            stu.load_student(path)

    def test_tampered_layout_hash_rejected(self, tmp_path):
        layout = small_layout()
        model = stu.init_student(layout, stu.StudentConfig(8, 6), seed=4)
        path = tmp_path / "x.json"
        nc.save_checkpoint(
            path,
            model.params,
            meta={
                "kind": "student",
                "layout": layout.to_dict(),
                "layout_hash": "0" * 16,
                "hidden1": 8,
                "hidden2": 6,
            },
        )
        with pytest.raises(stu.StudentError, match="hash"):
            stu.load_student(path)

    def test_trunk_shape_checked(self, tmp_path):
        layout = small_layout()
        model = stu.init_student(layout, stu.StudentConfig(8, 6), seed=4)
        bad = dict(model.params)
        bad["fc1_w"] = np.zeros((8, 4))
        path = tmp_path / "x.json"
        nc.save_checkpoint(
            path,
            bad,
            meta={
                "kind": "student",
                "layout": layout.to_dict(),
                "layout_hash": layout.layout_hash(),
                "hidden1": 8,
                "hidden2": 6,
            },
        )
        with pytest.raises(stu.StudentError, match="trunk"):
            stu.load_student(path)
