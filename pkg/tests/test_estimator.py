import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from adaseg.estimator import ADASegmenter, UNetSegmenter
from adaseg.unet import save_checkpoint
from adaseg.validation import check_image_mask_pair, check_images, check_masks

SMALL = dict(base_channels=2, batch_size=4, epochs=2)


class TestParams:
    def test_get_params_and_clone(self):
        est = ADASegmenter(method="gradcam", z=4, cycles=1, ada_epochs=1, **SMALL)
        params = est.get_params()
        assert params["method"] == "gradcam" and params["z"] == 4 and params["base_channels"] == 2
        twin = clone(est)
        assert twin.get_params() == params and twin is not est

    def test_set_params(self):
        est = UNetSegmenter().set_params(epochs=3, dropout=0.1)
        assert est.epochs == 3 and est.dropout == 0.1


class TestFitPredict:
    def test_fit_predict_score(self, small_data):
        train, val = small_data
        est = UNetSegmenter(**SMALL).fit(train.images, train.masks, eval_set=(val.images, val.masks))
        assert len(est.history_) == 2
        pred = est.predict(val.images)
        assert pred.shape == val.masks.shape and set(np.unique(pred)) <= {0, 1}
        assert 0 <= est.score(val.images, val.masks) <= 100
        assert est.evaluate(val.images, val.masks).count == len(val)

    def test_deterministic(self, small_data):
        train, val = small_data
        a = UNetSegmenter(**SMALL, random_state=3).fit(train.images, train.masks).predict_proba(val.images)
        b = UNetSegmenter(**SMALL, random_state=3).fit(train.images, train.masks).predict_proba(val.images)
        np.testing.assert_array_equal(a, b)

    def test_not_fitted(self, small_data):
        with pytest.raises(NotFittedError):
            UNetSegmenter().predict(small_data[1].images)

    def test_wrong_size(self, small_data):
        train, _ = small_data
        est = UNetSegmenter(**SMALL).fit(train.images, train.masks)
        with pytest.raises(ValueError, match="16x16"):
            est.predict(np.zeros((1, 32, 32)))

    def test_ada_fork_from_estimator_and_checkpoint(self, small_data, tmp_path):
        train, _ = small_data
        base = UNetSegmenter(**SMALL).fit(train.images, train.masks)
        before = base.model_.params["head.weight"].data.copy()
        ada = ADASegmenter(method="vanilla", z=4, cycles=2, ada_epochs=1, init_model=base,
                           **{**SMALL, "epochs": 0}).fit(train.images, train.masks)
        assert len(ada.history_) == 2 and ada.model_.epochs_trained == 4
        np.testing.assert_array_equal(base.model_.params["head.weight"].data, before)  # base untouched
        save_checkpoint(base.model_, base.adam_state_, tmp_path / "b.ckpt")
        again = ADASegmenter(method="vanilla", z=4, cycles=2, ada_epochs=1, init_model=str(tmp_path / "b.ckpt"),
                             **{**SMALL, "epochs": 0}).fit(train.images, train.masks)
        assert again.model_.epochs_trained == 4

    def test_fork_size_mismatch(self, small_data):
        train, _ = small_data
        base = UNetSegmenter(**SMALL).fit(train.images, train.masks)
        with pytest.raises(ValueError, match="expects 16x16"):
            ADASegmenter(init_model=base, z=4, **SMALL).fit(np.zeros((2, 32, 32)), np.zeros((2, 32, 32)))


class TestValidation:
    def test_images(self):
        assert check_images(np.zeros((4, 4))).shape == (1, 4, 4)
        assert check_images(np.zeros((2, 1, 4, 4))).shape == (2, 4, 4)
        for bad in (np.zeros((2, 4, 5)), np.full((1, 4, 4), 1.5), np.full((1, 4, 4), np.nan)):
            with pytest.raises(ValueError):
                check_images(bad)

    def test_masks(self):
        assert check_masks(np.ones((4, 4), bool)).dtype == np.uint8
        with pytest.raises(ValueError, match="binary"):
            check_masks(np.full((4, 4), 2))
        with pytest.raises(ValueError, match="do not match"):
            check_image_mask_pair(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))
