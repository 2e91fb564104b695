import json
import math

import jsonschema
import numpy as np
import pytest

from smcmix.analysis import (
    REPORT_SCHEMA,
    accuracy_report,
    centers_from_features,
    class_centers,
    cosine_matrix,
    features_of,
    inter_class_score,
    render_report,
    semantic_similarity_by_split,
    semantic_similarity_score,
)
from smcmix.dataset import ClassStats, Dataset, SemanticVectors, split_classes
from smcmix.model import init_model
from smcmix.tensor import ContractViolation
from smcmix.trainer import Checkpoint, TrainConfig


def random_rotation(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class TestInterClass:
    def test_identical_centers(self):
        np.testing.assert_allclose(inter_class_score(np.ones((4, 3))), 1.0, atol=1e-6)

    def test_two_class_hand_value(self):
        is_k = inter_class_score(np.array([[0.0, 0.0], [6.0, 8.0]]), 10.0)
        np.testing.assert_allclose(is_k, math.exp(-0.5), atol=1e-6)
        assert round(is_k[0], 4) == 0.6065

    def test_scaling_decreases(self, rng):
        c = rng.normal(size=(5, 4))
        assert (inter_class_score(2.5 * c) < inter_class_score(c)).all()

    def test_range_and_permutation_equivariance(self, rng):
        c = rng.normal(size=(6, 3))
        is_k = inter_class_score(c)
        assert ((is_k > 0) & (is_k <= 1)).all()
        perm = rng.permutation(6)
        np.testing.assert_allclose(inter_class_score(c[perm]), is_k[perm], rtol=1e-12)

    def test_raw_sum_metric(self):
        c = np.array([[0.0, 0.0], [1.0, 2.0]])
        # signed sums: row 0 sees -3, row 1 sees +3
        np.testing.assert_allclose(inter_class_score(c, 1.0, "raw-sum"), np.exp([1.5, -1.5]))

    @pytest.mark.parametrize("kwargs", [{"tau_prime": 0.0}, {"metric": "cosine"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ContractViolation):
            inter_class_score(np.ones((2, 2)), **kwargs)


class TestSemanticSimilarity:
    def test_identical_is_zero(self, rng):
        c = rng.normal(size=(5, 3))
        assert semantic_similarity_score(c, c)[0] == pytest.approx(0.0, abs=1e-6)

    def test_hand_case(self):
        # S^s = I, S^c has off-diagonal 0.5 (60 degrees apart)
        sem = np.array([[1.0, 0.0], [0.0, 1.0]])
        centers = np.array([[1.0, 0.0], [0.5, math.sqrt(3) / 2]])
        ss, mats = semantic_similarity_score(centers, sem)
        assert ss == pytest.approx(0.25, abs=1e-6)
        np.testing.assert_allclose(mats.centers, [[1, 0.5], [0.5, 1]], atol=1e-12)

    def test_rotation_and_scaling_invariance(self, rng):
        c, s = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
        base = semantic_similarity_score(c, s)[0]
        assert semantic_similarity_score(c @ random_rotation(4, rng), s)[0] == pytest.approx(base, abs=1e-12)
        scale = rng.uniform(0.1, 10, size=(6, 1))
        assert semantic_similarity_score(c * scale, s)[0] == pytest.approx(base, abs=1e-12)

    def test_matrices_well_formed(self, rng):
        _, mats = semantic_similarity_score(rng.normal(size=(7, 5)), rng.normal(size=(7, 2)))
        for m in (mats.semantic, mats.centers):
            assert np.array_equal(m, m.T)
            np.testing.assert_allclose(np.diag(m), 1.0, atol=1e-12)
            assert m.min() >= -1 and m.max() <= 1

    def test_zero_norm_named(self):
        with pytest.raises(ContractViolation, match="class 1"):
            cosine_matrix(np.array([[1.0, 2.0], [0.0, 0.0]]), "center")

    def test_class_count_mismatch(self):
        with pytest.raises(ContractViolation):
            semantic_similarity_score(np.ones((3, 2)), np.ones((2, 2)))

    def test_by_split(self):
        sem = np.eye(2)
        centers = np.array([[1.0, 0.0], [0.5, math.sqrt(3) / 2]])
        _, mats = semantic_similarity_score(centers, sem)
        out = semantic_similarity_by_split(mats, split_classes([500, 5]))
        assert out == pytest.approx({"many": 0.25, "few": 0.25, "all": 0.25})


class TestCenters:
    def test_two_samples(self):
        c = centers_from_features(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0]), 1)
        np.testing.assert_array_equal(c.centers, [[0.5, 0.5]])

    def test_duplicates_leave_centers(self, rng):
        feats, labels = rng.normal(size=(6, 3)), np.array([0, 1, 2, 0, 1, 2])
        a = centers_from_features(feats, labels, 3).centers
        b = centers_from_features(np.concatenate([feats, feats]), np.concatenate([labels, labels]), 3).centers
        np.testing.assert_allclose(a, b, rtol=1e-15)

    def test_single_sample_equals_feature(self, rng):
        params = init_model([16], 3, (1, 8, 8), seed=0)
        data = Dataset(rng.uniform(size=(3, 1, 8, 8)).astype(np.float32), np.array([2, 0, 1]), 3)
        feats = features_of(params, data.pixels)
        np.testing.assert_array_equal(class_centers(params, data).centers, feats[[1, 2, 0]])

    def test_missing_class_named(self):
        with pytest.raises(ContractViolation, match="class 2"):
            centers_from_features(np.ones((2, 2)), np.array([0, 1]), 3)


def perfect_checkpoint(C):
    # one-hot pixels standardize to +-1; relu(2 * x) keeps only the hot channel
    params = init_model([C], C, (C, 1, 1), seed=0, head_dim=4)
    params.encoder[0][0].values = 2.0 * np.eye(C)
    params.classifier[0].values = np.eye(C)
    counts = [500, 300, 60, 10][:C]
    config = TrainConfig(encoder_widths=[C], head_dim=4)
    return Checkpoint(params, config, ClassStats.from_counts(counts), 0, {}, [], [])


class TestReport:
    def test_perfect_model(self):
        C = 4
        ck = perfect_checkpoint(C)
        labels = np.repeat(np.arange(C), 5)
        data = Dataset(np.eye(C)[labels].reshape(-1, C, 1, 1).astype(np.float32), labels, C)
        report = accuracy_report(ck, data, SemanticVectors(np.eye(C) + 0.1))
        assert report["accuracy"] == {"many": 1.0, "medium": 1.0, "few": 1.0, "all": 1.0}
        assert report["config-hash"] == ck.config.config_hash()
        jsonschema.validate(json.loads(json.dumps(report)), REPORT_SCHEMA)
        text = render_report(report)
        assert len({len(line) for line in text.splitlines()}) == 1

    def test_schema_rejects_unknown_split(self):
        bad = {"inter_class": {"tail": 0.1}, "semantic_similarity": {}, "accuracy": {}, "config-hash": "x"}
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(bad, REPORT_SCHEMA)
