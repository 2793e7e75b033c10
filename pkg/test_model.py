import numpy as np
import pytest

from services.model import (
    PRESETS, BackboneConfig, Prediction, as_batch, backbone_stage_of, build_model, classify, decide,
    coordinate_planes, extract_features, localize, parameter_count, predict, predict_batch, preset, to_pixels,
    trainable_selector,
)
from services.records import DEFECT, NO_DEFECT
from services.tensor import backward, checking_mode
from utils.validation import ValidationError


def _images(n, size=16, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, size, size)).astype(np.float32)


def test_features_end_with_constant_one(tiny_model):
    psi = extract_features(_images(3), tiny_model)
    assert psi.shape == (3, tiny_model.config.feature_dim)
    assert tiny_model.d == 9
    assert np.all(psi.numpy()[:, -1] == 1.0)


def test_feature_extraction_is_deterministic(tiny_backbone):
    a = build_model(tiny_backbone, seed=11)
    b = build_model(tiny_backbone, seed=11)
    images = _images(2)
    assert np.array_equal(extract_features(images, a).numpy(), extract_features(images, b).numpy())
    c = build_model(tiny_backbone, seed=12)
    assert not np.array_equal(a["stem.conv.weight"].numpy(), c["stem.conv.weight"].numpy())


def test_heads_are_linear_maps():
    psi = np.array([[1.0, 2.0, 1.0]])
    w_c = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]])
    w_r = np.array([[0.1, 0.0], [0.0, 0.1], [0.2, 0.3]])
    with checking_mode():
        np.testing.assert_allclose(classify(psi, w_c).numpy(), [[1.5, 1.5]])
        np.testing.assert_allclose(localize(psi, w_r).numpy(), [[0.3, 0.5]])
        np.testing.assert_allclose(classify(psi[0], w_c).numpy(), [[1.5, 1.5]])


def test_heads_match_explicit_sum():
    rng = np.random.default_rng(3)
    psi, w = rng.normal(size=(4, 6)), rng.normal(size=(6, 2))
    expected = np.zeros((4, 2))
    for n in range(4):
        for k in range(2):
            expected[n, k] = sum(w[i, k] * psi[n, i] for i in range(6))
    with checking_mode():
        np.testing.assert_allclose(classify(psi, w).numpy(), expected, rtol=1e-12)
    with pytest.raises(ValidationError):
        localize(psi, rng.normal(size=(5, 2)))


def test_decide_breaks_ties_toward_defect():
    assert decide(np.array([1.5, 1.5])) == DEFECT
    assert decide(np.array([0.0, 0.1])) == NO_DEFECT
    assert decide(np.array([2.0, -1.0])) == DEFECT


def test_to_pixels_spans_the_frame():
    assert to_pixels((0.0, 1.0), 64) == (0.0, 63.0)
    assert to_pixels((0.5, 0.5), 32) == (15.5, 15.5)


def test_regression_head_starts_at_image_centre(tiny_model):
    assert np.all(tiny_model.W_r.data[-1] == 0.5)
    pred = predict(_images(1)[0], tiny_model)
    x, y = pred.center_px
    assert abs(x - 7.5) < 3 and abs(y - 7.5) < 3


def test_input_shape_and_range_checks(tiny_model):
    with pytest.raises(ValidationError):
        extract_features(_images(1, size=20), tiny_model)
    with pytest.raises(ValidationError):
        extract_features(_images(1) * 2.0, tiny_model)
    with pytest.raises(ValidationError):
        as_batch(np.zeros((1, 3, 16, 16)), 16)
    assert as_batch(np.zeros((16, 16)), 16).shape == (1, 1, 16, 16)
    assert as_batch(np.zeros((2, 16, 16)), 16).shape == (2, 1, 16, 16)
    assert as_batch(np.zeros((2, 1, 16, 16)), 16).shape == (2, 1, 16, 16)


def test_parameter_count_of_tiny_backbone(tiny_model):
    # stem 36+8, stage1 144+8+144+8, stage2 288+16+576+16+32 (projection), heads 2*9*2
    # plus coordinate filters 72 (stem), 72 (stage1), 144 (stage2)
    assert parameter_count(tiny_model) == 1600
    plain = build_model(tiny_model.config.model_copy(update={"coord_channels": False}))
    assert parameter_count(plain) == 1312
    assert not any(name.endswith("coord_weight") for name in plain.params)


def test_presets():
    assert set(PRESETS) == {"tiny", "small", "base", "wide"}
    assert preset("wide").widths == (64, 128, 256)
    assert preset("tiny", input_size=32).input_size == 32
    with pytest.raises(ValidationError):
        preset("huge")
    with pytest.raises(ValueError):
        BackboneConfig(widths=(4, 0))
    small, wide = build_model(preset("small", input_size=16)), build_model(preset("wide", input_size=16))
    assert parameter_count(wide) > parameter_count(small)


def test_plain_blocks_have_no_projection():
    model = build_model(BackboneConfig(widths=(4, 8), blocks_per_stage=1, block_type="plain", input_size=16))
    assert not any(name.endswith("proj.weight") for name in model.params)
    assert extract_features(_images(2), model).shape == (2, 9)


def test_trainable_selector_sets(tiny_model):
    names = list(tiny_model.params)
    heads = [n for n in names if trainable_selector(tiny_model, "heads")(n)]
    tail = [n for n in names if trainable_selector(tiny_model, "heads+tail")(n)]
    everything = [n for n in names if trainable_selector(tiny_model, "all")(n)]
    assert heads == ["head.W_c", "head.W_r"]
    assert set(tail) - set(heads) == {n for n in names if n.startswith("stage2.")}
    assert everything == names
    with pytest.raises(ValidationError):
        trainable_selector(tiny_model, "neck")
    assert backbone_stage_of("stage1.block0.conv1.weight") == "stage1"
    assert backbone_stage_of("stem.bn.gamma") == "stem"
    assert backbone_stage_of("head.W_c") is None


def test_batch_and_single_predictions_agree(tiny_model):
    images = _images(4, seed=5)
    batch = predict_batch(images, tiny_model)
    for image, expected in zip(images, batch):
        single = predict(image, tiny_model)
        assert single.predicted_class == expected.predicted_class or \
            abs(expected.scores[0] - expected.scores[1]) < 1e-5
        np.testing.assert_allclose(single.scores, expected.scores, rtol=1e-4, atol=1e-6)
        np.testing.assert_allclose(single.center_px, expected.center_px, rtol=1e-4, atol=1e-4)


def test_training_mode_updates_running_stats_only(tiny_model):
    before = tiny_model.buffers["stem.bn"].mean.copy()
    extract_features(_images(2), tiny_model, training=False)
    assert np.array_equal(tiny_model.buffers["stem.bn"].mean, before)
    extract_features(_images(2), tiny_model, training=True)
    assert not np.array_equal(tiny_model.buffers["stem.bn"].mean, before)


def test_state_arrays_round_trip(tiny_backbone):
    source, target = build_model(tiny_backbone, seed=1), build_model(tiny_backbone, seed=2)
    target.load_state_arrays(source.state_arrays())
    images = _images(2)
    assert np.array_equal(extract_features(images, source).numpy(), extract_features(images, target).numpy())
    arrays = dict(source.state_arrays())
    arrays.pop("head.W_c")
    with pytest.raises(ValidationError):
        target.load_state_arrays(arrays)


def test_defect_probability():
    assert Prediction(np.array([0.0, 0.0]), DEFECT, (0.0, 0.0)).defect_probability == pytest.approx(0.5)
    assert Prediction(np.array([10.0, 0.0]), DEFECT, (0.0, 0.0)).defect_probability > 0.99


def test_coordinate_planes_span_the_map():
    planes = coordinate_planes(2, 3, 5).numpy()
    assert planes.shape == (2, 2, 3, 5)
    assert planes[1, 0, 2].tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert planes[0, 1, :, 4].tolist() == [-1.0, 0.0, 1.0]


def test_coordinate_filters_receive_gradients(tiny_model):
    psi = extract_features(_images(2), tiny_model, training=True)
    backward(localize(psi, tiny_model["head.W_r"]).sum())
    for name in ("stem.conv.coord_weight", "stage1.block0.conv1.coord_weight", "stage2.block0.conv1.coord_weight"):
        grad = tiny_model.params[name].tensor.grad
        assert grad is not None and np.any(grad != 0), name


def test_frozen_layers_keep_running_stats(tiny_model):
    before = {name: (s.mean.copy(), s.var.copy()) for name, s in tiny_model.buffers.items()}
    tail = trainable_selector(tiny_model, "heads+tail")
    extract_features(_images(4), tiny_model, training=True, trainable=tail)
    for name, stats in tiny_model.buffers.items():
        moved = not np.array_equal(stats.mean, before[name][0])
        assert moved == name.startswith("stage2."), name
    frozen = {name: (s.mean.copy(), s.var.copy()) for name, s in tiny_model.buffers.items()}
    extract_features(_images(4, seed=1), tiny_model, training=True,
                     trainable=trainable_selector(tiny_model, "heads"))
    for name, stats in tiny_model.buffers.items():
        assert np.array_equal(stats.mean, frozen[name][0]) and np.array_equal(stats.var, frozen[name][1])
