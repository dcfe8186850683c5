"""The scikit-learn facade: fit/predict/score, params, and input checking."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cwtseg.estimator import BinaryPixelClassifier, FewShotSegmenter
from cwtseg.taskgen import DatasetSpec, VariationKnobs, generate_dataset


def separable_pixels(n=200, d=8, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    return X, (X @ w > 0).astype(np.uint8)


@pytest.fixture(scope="module")
def tiny_dataset():
    spec = DatasetSpec(
        domain="shapesA", num_classes=6, images_per_class=6, image_size=16,
        seed=3,
        variation=VariationKnobs(scale_range=(0.35, 0.55), position_jitter=0.2,
                                 rotation_range=0.3, color_jitter=0.05,
                                 occlusion_prob=0.0))
    return generate_dataset(spec)


@pytest.fixture(scope="module")
def fitted_segmenter(tiny_dataset):
    seg = FewShotSegmenter(feature_dim=8, attn_dim=16, num_heads=2,
                           pretrain_epochs=2, meta_epochs=1,
                           episodes_per_epoch=8, inner_iterations=8,
                           split_index=0, num_splits=3, seed=0)
    return seg.fit(tiny_dataset)


class TestBinaryPixelClassifier:
    def test_learns_a_separable_problem(self):
        X, y = separable_pixels()
        clf = BinaryPixelClassifier(iterations=150, lr=0.5).fit(X, y)
        assert clf.score(X, y) >= 0.95

    def test_predict_is_binary_and_matches_decision_sign(self):
        X, y = separable_pixels()
        clf = BinaryPixelClassifier(iterations=50).fit(X, y)
        pred = clf.predict(X)
        assert set(np.unique(pred)) <= {0, 1}
        assert np.array_equal(pred, clf.decision_function(X) > 0)

    def test_fit_is_deterministic(self):
        X, y = separable_pixels()
        w1 = BinaryPixelClassifier(iterations=30, seed=5).fit(X, y).weights_
        w2 = BinaryPixelClassifier(iterations=30, seed=5).fit(X, y).weights_
        assert np.array_equal(w1, w2)

    def test_sklearn_params_and_clone(self):
        clf = BinaryPixelClassifier(iterations=7, lr=0.2)
        params = clf.get_params()
        assert params["iterations"] == 7
        dup = clone(clf)
        assert dup.get_params() == params
        clf.set_params(lr=0.9)
        assert clf.lr == 0.9

    def test_predict_before_fit(self):
        with pytest.raises(NotFittedError):
            BinaryPixelClassifier().predict(np.zeros((3, 4)))

    def test_rejects_non_binary_labels(self):
        X = np.zeros((4, 2))
        with pytest.raises(ValueError, match="binary"):
            BinaryPixelClassifier().fit(X, np.array([0, 1, 2, 0]))

    def test_rejects_mismatched_lengths(self):
        with pytest.raises(ValueError, match="y must be 1-d"):
            BinaryPixelClassifier().fit(np.zeros((4, 2)), np.array([0, 1]))

    def test_rejects_wrong_width_at_predict(self):
        X, y = separable_pixels(d=8)
        clf = BinaryPixelClassifier(iterations=5).fit(X, y)
        with pytest.raises(ValueError, match="features"):
            clf.predict(np.zeros((2, 5)))

    def test_invalid_inner_config_surfaces(self):
        X, y = separable_pixels()
        with pytest.raises(Exception, match="iterations"):
            BinaryPixelClassifier(iterations=-1).fit(X, y)


class TestFewShotSegmenter:
    def test_fit_sets_fitted_state(self, fitted_segmenter):
        seg = fitted_segmenter
        assert seg.backbone_.frozen
        assert seg.cwt_ is not None
        assert set(seg.base_class_ids_) | set(seg.novel_class_ids_) == set(range(1, 7))
        assert not set(seg.base_class_ids_) & set(seg.novel_class_ids_)
        assert len(seg.pretrain_losses_) == 2
        assert len(seg.meta_losses_) == 8

    def test_predict_shape_and_values(self, fitted_segmenter, tiny_dataset):
        novel = tiny_dataset.restrict(fitted_segmenter.novel_class_ids_)
        support, query = novel.samples[0], novel.samples[1]
        masks = fitted_segmenter.predict(
            [query.image, query.image],
            support_images=[support.image],
            support_masks=[(support.mask > 0).astype(np.uint8)])
        assert masks.shape == (2, 16, 16)
        assert set(np.unique(masks)) <= {0, 1}

    def test_predict_requires_support(self, fitted_segmenter, tiny_dataset):
        with pytest.raises(ValueError, match="support"):
            fitted_segmenter.predict([tiny_dataset.samples[0].image])

    def test_predict_before_fit(self):
        with pytest.raises(NotFittedError):
            FewShotSegmenter().predict([np.zeros((3, 16, 16))])

    def test_fit_requires_a_dataset(self):
        with pytest.raises(TypeError, match="Dataset"):
            FewShotSegmenter().fit(np.zeros((4, 3, 16, 16)))

    def test_score_is_a_unit_interval_float(self, fitted_segmenter, tiny_dataset):
        s = fitted_segmenter.score(tiny_dataset, trials=1, episodes_per_trial=3)
        assert isinstance(s, float)
        assert 0.0 <= s <= 1.0

    def test_sklearn_clone_preserves_params(self):
        seg = FewShotSegmenter(feature_dim=8, attn_dim=16, num_heads=2, seed=4)
        dup = clone(seg)
        assert dup.get_params() == seg.get_params()
        assert dup.get_params()["seed"] == 4

    def test_invalid_precision_rejected(self, tiny_dataset):
        seg = FewShotSegmenter(precision="f16", pretrain_epochs=1,
                               meta_epochs=0, num_splits=3)
        with pytest.raises(Exception, match="precision"):
            seg.fit(tiny_dataset)
