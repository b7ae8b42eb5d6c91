import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import max_gradient_error
from lvseg.errors import DimensionMismatch, EmptyMask, InvalidSpec, InvalidThreshold
from lvseg.locate import (ORIGINAL, ArchVariant, Geometry, LocatorCNN, RoiBox, cnn_forward,
                          crop_roi, downsample_slice, mask_to_box, paste_roi, train_cnn)
from lvseg.numerics import LossConfig
from lvseg.train import TrainConfig

SMALL = Geometry(input_size=16, filter_size=5, pool=2, out_grid=4, second_filter_size=3,
                 second_filters=2)
SMALL_VARIANT = ArchVariant(width=3)


def small_model(seed=0, variant=SMALL_VARIANT, scale=0.5):
    model = LocatorCNN(variant, SMALL)
    rng = np.random.default_rng(seed)
    model.set_params({k: rng.normal(0, scale, size=v.shape) for k, v in model.params().items()})
    return model


class TestArchVariant:
    def test_original(self):
        assert ORIGINAL == ArchVariant("one_conv", 100, "sigmoid", "average")
        assert ORIGINAL.name == "original"

    def test_names(self):
        assert ArchVariant(depth="two_conv").name == "deeper"
        assert ArchVariant(width=200, pooling="max").name == "width200+maxpool"

    @pytest.mark.parametrize("kw", [{"depth": "three"}, {"activation": "tanh"},
                                    {"pooling": "median"}, {"width": 0}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidSpec):
            ArchVariant(**kw)


class TestCnnForward:
    @pytest.fixture(scope="class")
    @staticmethod
    def original():
        return LocatorCNN().init(seed=0)

    def test_full_shape_chain(self, original, rng):
        assert original.shape_chain(rng.random((64, 64))) == oracles.CNN_CHAIN

    def test_parameter_extents(self, original):
        shapes = {k: v.shape for k, v in original.params().items()}
        assert shapes == {"conv_filters": (11, 11, 1, 100), "conv_bias": (100,),
                          "fc_weights": (1024, 8100), "fc_bias": (1024,)}

    def test_zero_parameters_give_half(self, rng):
        model = LocatorCNN()
        model.set_params({k: np.zeros_like(v) for k, v in model.params().items()})
        np.testing.assert_array_equal(cnn_forward(rng.random((64, 64)), model), 0.5)

    def test_two_conv_chain(self, rng):
        model = LocatorCNN(ArchVariant(depth="two_conv")).init(seed=0)
        assert model.shape_chain(rng.random((64, 64))) == oracles.TWO_CONV_CHAIN
        assert cnn_forward(rng.random((64, 64)), model).shape == (32, 32)

    def test_outputs_are_probabilities(self, original, rng):
        out = original.forward(rng.normal(size=(3, 64, 64)))
        assert out.shape == (3, 32, 32)
        assert np.all((out > 0) & (out < 1))

    def test_pure_function(self, original, rng):
        x = rng.random((64, 64))
        np.testing.assert_array_equal(cnn_forward(x, original), cnn_forward(x, original))

    def test_wrong_input_extent(self, original):
        with pytest.raises(DimensionMismatch):
            cnn_forward(np.zeros((60, 60)), original)

    def test_checkpoint_variant_mismatch(self, original):
        with pytest.raises(DimensionMismatch, match="fc_weights"):
            LocatorCNN.from_tensors(original.to_tensors(), ArchVariant(depth="two_conv"))

    def test_tensor_roundtrip(self, rng):
        model = small_model()
        back = LocatorCNN.from_tensors(model.to_tensors(), SMALL_VARIANT, SMALL)
        x = rng.random((2, 16, 16))
        np.testing.assert_array_equal(back.forward(x), model.forward(x))

    def test_downsample(self):
        img = np.kron(np.arange(64 * 64, dtype=np.float64).reshape(64, 64), np.ones((4, 4)))
        np.testing.assert_array_equal(downsample_slice(img), img[::4, ::4])


class TestGradient:
    @pytest.mark.parametrize("variant", [SMALL_VARIANT, ArchVariant("two_conv", 3),
                                         ArchVariant(width=3, activation="relu", pooling="max")])
    def test_reduced_clone(self, rng, variant):
        """16x16 input, 3 filters of 5x5, pool 2, fc to 4x4 under the composite loss."""
        # small weights keep the sigmoid out of saturation, where differences lose precision
        model = small_model(1, variant, scale=0.1)
        x = rng.normal(size=(2, 16, 16, 1))
        y = (rng.random((2, 4, 4)) > 0.5).astype(np.float64)
        fc_sigmoid = len(model.net.layers) - 2
        err = max_gradient_error(model.net, x, y, LossConfig(1e-3, 0.1, 0.3), (fc_sigmoid,))
        assert err < oracles.FD_RTOL


class TestTrainCnn:
    def test_overfit_single_pair(self, rng):
        x = rng.random((1, 16, 16))
        y = np.zeros((1, 4, 4))
        y[0, 1:3, 1:3] = 1.0
        model, hist = train_cnn(x, y, TrainConfig(learning_rate=5.0, epochs=300, batch_size=1,
                                                  stop_window=0, width=3), geometry=SMALL)
        assert np.mean((model.forward(x) - y) ** 2) < 1e-3

    def test_small_rate_non_increasing(self, rng):
        x = rng.random((8, 16, 16))
        y = (rng.random((8, 4, 4)) > 0.5).astype(np.float64)
        _, hist = train_cnn(x, y, TrainConfig(learning_rate=1e-3, epochs=20, batch_size=8,
                                              stop_window=0, width=3), geometry=SMALL)
        assert all(b <= a for a, b in zip(hist.losses, hist.losses[1:]))

    def test_pretrained_initial_loss_not_worse(self, rng):
        """Paired comparison over 10 seeds of the initial training loss.

        The dense layer starts at zero, so every initial prediction is 0.5
        whatever the filters; the comparison therefore ties in every seed.
        """
        x = rng.random((6, 16, 16, 1))
        y = (rng.random((6, 4, 4)) > 0.5).astype(np.float64)
        wins = 0
        for seed in range(10):
            filters = np.random.default_rng(100 + seed).normal(0, 0.1, size=(5, 5, 1, 3))
            pre = LocatorCNN(SMALL_VARIANT, SMALL).init(seed, filters)
            rand = LocatorCNN(SMALL_VARIANT, SMALL).init(seed)
            wins += np.mean((pre.forward(x) - y) ** 2) <= np.mean((rand.forward(x) - y) ** 2)
        assert wins >= 8

    def test_pretrained_filter_shape_checked(self):
        with pytest.raises(DimensionMismatch):
            LocatorCNN(SMALL_VARIANT, SMALL).init(0, np.zeros((5, 5, 1, 4)))

    def test_callback_sees_model(self, rng):
        seen = []
        train_cnn(rng.random((2, 16, 16)), np.zeros((2, 4, 4)),
                  TrainConfig(epochs=3, batch_size=2, stop_window=0, width=3), geometry=SMALL,
                  callback=lambda epoch, loss, model: seen.append((epoch, type(model))))
        assert [e for e, _ in seen] == [0, 1, 2]
        assert all(t is LocatorCNN for _, t in seen)


class TestMaskToBox:
    def test_single_cell_maps_into_its_block(self):
        """Cell 16 covers source rows 128..135; its centre rounds to 132."""
        m = np.zeros((32, 32))
        m[16, 16] = 1.0
        box = mask_to_box(m)
        assert box.center == (132, 132)
        assert 128 <= box.center[0] < 136

    def test_uniform_mask_centre(self):
        box = mask_to_box(np.ones((32, 32)))
        assert abs(box.center[0] - oracles.UNIFORM_MASK_CENTER[0]) <= 1
        assert abs(box.center[1] - oracles.UNIFORM_MASK_CENTER[1]) <= 1

    def test_corner_clamp(self):
        m = np.zeros((32, 32))
        m[1, 1] = 1.0
        assert mask_to_box(m).start == oracles.CORNER_BOX_START

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            mask_to_box(np.full((32, 32), 0.49))

    @pytest.mark.parametrize("t", [0.0, 1.0, 1.5])
    def test_threshold_domain(self, t):
        with pytest.raises(InvalidThreshold):
            mask_to_box(np.ones((32, 32)), t)

    @given(seed=st.integers(0, 10_000), density=st.floats(0.001, 1.0))
    def test_box_always_inside_frame(self, seed, density):
        m = np.random.default_rng(seed).random((32, 32)) * density
        m[np.unravel_index(int(np.argmax(m)), m.shape)] = 1.0
        box = mask_to_box(m)
        r0, c0 = box.start
        assert 0 <= r0 <= 156 and 0 <= c0 <= 156


class TestCrop:
    def test_reference_rows(self):
        box = RoiBox.around((128, 128))
        img = np.arange(256 * 256, dtype=np.float64).reshape(256, 256)
        roi = crop_roi(img, box)
        lo, hi = oracles.CROP_ROWS_AT_128
        np.testing.assert_array_equal(roi, img[lo:hi + 1, lo:hi + 1])

    def test_constant_image(self):
        np.testing.assert_array_equal(crop_roi(np.full((256, 256), 0.3), RoiBox.around((40, 200))),
                                      0.3)

    @given(r=st.integers(-50, 300), c=st.integers(-50, 300))
    def test_crop_paste_inverse(self, r, c):
        img = np.random.default_rng([r + 50, c + 50]).random((256, 256))
        box = RoiBox.around((r, c))
        roi = crop_roi(img, box)
        assert roi.shape == (100, 100)
        np.testing.assert_array_equal(paste_roi(np.zeros_like(img), roi, box)[box.slices()],
                                      img[box.slices()])
        np.testing.assert_array_equal(paste_roi(img, roi, box), img)
