import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from xctbench import autodiff as ad
from xctbench.metrics import iou
from xctbench.phantom import PhantomSpec, generate_phantom
from xctbench.segnet import (SliceDataset, TrainConfig, TrainingError, UNet25Config, build_unet25,
                             inverse_frequency_weights, make_slice_dataset, one_hot, predict_volume, slice_window,
                             train, unet25_param_count, weighted_dice_loss, weighted_dice_score, write_history_csv)
from xctbench.tomo import ScanConfig, simulate_scan


def random_probs(rng, shape):
    e = np.exp(rng.standard_normal(shape))
    return e / e.sum(axis=1, keepdims=True)


def test_perfect_prediction_loss_near_zero():
    rng = np.random.default_rng(0)
    truth = one_hot(rng.integers(0, 4, size=(2, 16, 16)), 4)
    assert weighted_dice_loss(truth, truth, np.array([0.5, 1, 2, 3])).item() < 1e-6


def test_uniform_weights_equal_plain_dice():
    rng = np.random.default_rng(1)
    for _ in range(20):
        truth = one_hot(rng.integers(0, 3, size=(2, 8, 8)), 3)
        pred = random_probs(rng, truth.shape)
        plain = 1 - (2 * np.sum(pred * truth) + 1e-6) / (np.sum(pred) + np.sum(truth) + 1e-6)
        assert weighted_dice_loss(pred, truth, np.ones(3)).item() == pytest.approx(plain, rel=1e-12)


def test_two_class_hand_case():
    p = np.array([[[1.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]]])
    g = np.array([[[1.0, 1.0], [0.0, 0.0]], [[1.0, 1.0], [0.0, 0.0]]])
    w = np.array([1.0, 2.0])
    # intersection 1 per class, sum p = 1, sum g = 2 per class
    expected = 1 - (2 * (1 * 1 + 2 * 1) + 1e-6) / ((1 * 3 + 2 * 3) + 1e-6)
    assert weighted_dice_loss(p, g, w, class_axis=0).item() == pytest.approx(expected, rel=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 4))
def test_loss_bounds(seed, n_classes):
    rng = np.random.default_rng(seed)
    truth = one_hot(rng.integers(0, n_classes, size=(2, 6, 6)), n_classes)
    pred = random_probs(rng, truth.shape)
    loss = weighted_dice_loss(pred, truth, rng.uniform(0.1, 5, n_classes)).item()
    assert 0.0 <= loss <= 1.0


@pytest.mark.parametrize("seed", range(20))
def test_dice_loss_gradcheck(seed):
    rng = np.random.default_rng(seed)
    truth = (rng.random((2, 8, 8)) > 0.5).astype(float)
    pred = rng.uniform(0.05, 0.95, (2, 8, 8))
    w = rng.uniform(0.5, 2.0, 2)
    rep = ad.grad_check(lambda p: weighted_dice_loss(p, truth, w, class_axis=0), [pred])
    assert rep.passed, rep.worst


@given(arrays(np.bool_, (6, 6)), arrays(np.bool_, (6, 6)))
def test_dice_iou_identity(a, b):
    if not (a.any() or b.any()):
        return
    score = weighted_dice_score(a[None].astype(float), b[None].astype(float), np.ones(1), eps=0.0,
                                class_axis=0).item()
    j = iou(a, b)
    assert score == pytest.approx(2 * j / (1 + j), abs=1e-12)


def test_loss_errors():
    with pytest.raises(ad.ShapeError):
        weighted_dice_loss(np.zeros((2, 4)), np.zeros((2, 5)), np.ones(2))
    with pytest.raises(ValueError):
        weighted_dice_loss(np.zeros((2, 4)), np.zeros((2, 4)), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        weighted_dice_loss(np.zeros((2, 4)), np.full((2, 4), 0.5), np.ones(2))


def test_inverse_frequency_weights():
    labels = np.array([0] * 90 + [1] * 9 + [2])
    w = inverse_frequency_weights(labels, 3)
    assert w.mean() == pytest.approx(1.0) and w[2] > w[1] > w[0]
    assert w[1] / w[0] == pytest.approx(10.0)
    w2 = inverse_frequency_weights(labels, 3, power=2)
    assert w2[1] / w2[0] == pytest.approx(100.0)


def _volume():
    return np.arange(6 * 2 * 2, dtype=float).reshape(6, 2, 2)


def test_slice_window_rules():
    v = _volume()
    assert np.array_equal(slice_window(v, 3), v[1:6])
    assert np.array_equal(slice_window(v, 0), v[[0, 0, 0, 1, 2]])
    assert np.array_equal(slice_window(v, 5), v[[3, 4, 5, 5, 5]])
    assert np.array_equal(slice_window(v, 2, window=1), v[2:3])
    with pytest.raises(ValueError):
        slice_window(v, 0, window=7)
    with pytest.raises(ValueError):
        slice_window(v, 0, window=4)


def closed_form_count(cin, width, depth, n_classes):
    # layer list: two 3x3 convs per encoder level, a two-conv bottleneck, per decoder level an
    # up-conv, a conv over the concatenated skip and one more conv, then a 1x1 head
    def c3(i, o):
        return 9 * i * o + o
    ws = [width * 2 ** l for l in range(depth + 1)]
    n = 0
    prev = cin
    for w in ws[:-1]:
        n += c3(prev, w) + c3(w, w)
        prev = w
    n += c3(ws[-2], ws[-1]) + c3(ws[-1], ws[-1])
    for l in range(depth):
        n += c3(ws[l + 1], ws[l]) + c3(2 * ws[l], ws[l]) + c3(ws[l], ws[l])
    return n + ws[0] * n_classes + n_classes


def test_unet_param_count_and_output():
    cfg = UNet25Config()
    model = build_unet25(cfg)
    assert model.params.count() == unet25_param_count(cfg) == closed_form_count(5, 8, 3, 4)
    assert model.params.count(trainable=False) == 0
    rng = np.random.default_rng(0)
    out = model.forward(rng.standard_normal((2, 5, 32, 32))).value
    assert out.shape == (2, 4, 32, 32)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)
    zero = np.zeros((1, 5, 16, 16))
    a, b = model.forward(zero).value, model.forward(zero).value
    assert np.all(np.isfinite(a)) and np.array_equal(a, b)


def test_unet_config_invariants():
    with pytest.raises(ValueError):
        UNet25Config(in_channels=4)
    with pytest.raises(ValueError):
        UNet25Config(patch_size=60)
    with pytest.raises(ad.ShapeError):
        build_unet25(UNet25Config()).forward(np.zeros((1, 5, 12, 12)))


def test_train_config_invariants():
    for kw in ({"val_fraction": 0.0}, {"val_fraction": 1.0}, {"class_weights": (1.0, 0.0, 1.0, 1.0)},
               {"lr_decay_factor": 1.5}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def tiny_model():
    return build_unet25(UNet25Config(base_width=2, depth=1, patch_size=8))


def test_plateau_schedule_with_noise_labels(tmp_path):
    rng = np.random.default_rng(0)
    ds = SliceDataset(rng.standard_normal((10, 5, 8, 8)), rng.integers(0, 4, size=(10, 8, 8)))
    cfg = TrainConfig(lr_init=1e-12, max_epochs=40, batch_size=4, prior_bias_init=False)
    res = train(tiny_model(), ds, cfg)
    lrs = [h["lr"] for h in res.history]
    resets = [h["epoch"] for h in res.history if h["reset_flag"]]
    # epoch 1 improves on +inf; epochs 2..16 are the 15 stagnant epochs
    assert resets[0] == 16
    assert lrs[15] == lrs[0] and res.history[16]["lr"] == lrs[0] * 0.5
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    for prev, cur in zip(res.history, res.history[1:]):
        assert (cur["lr"] < prev["lr"]) == bool(prev["reset_flag"])
    write_history_csv(tmp_path / "h.csv", res.history)
    rows = list(csv.DictReader((tmp_path / "h.csv").open()))
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "val_dice", "lr", "reset_flag"]
    assert len(rows) == len(res.history)


def test_train_determinism_and_errors():
    rng = np.random.default_rng(1)
    ds = SliceDataset(rng.standard_normal((8, 5, 8, 8)), rng.integers(0, 4, size=(8, 8, 8)))
    cfg = TrainConfig(max_epochs=3, batch_size=4)
    a, b = train(tiny_model(), ds, cfg), train(tiny_model(), ds, cfg)
    assert a.history == b.history
    assert a.model.params.fingerprint() == b.model.params.fingerprint()
    with pytest.raises(TrainingError):
        train(tiny_model(), SliceDataset(np.zeros((0, 5, 8, 8)), np.zeros((0, 8, 8), int)), cfg)


@pytest.mark.slow
def test_learning_progress_on_phantom_slices():
    spec = PhantomSpec(grid_shape=(200, 32, 32), mu_material=4.0, mu_inclusion=8.0, pore_density_target=0.03,
                       inclusion_density_target=0.006, flaw_size_range=(1.5, 3.0), seed=2)
    labels, mu = generate_phantom(spec)
    rec, _ = simulate_scan(labels, mu, ScanConfig(n_views=90, noise_model="gaussian(0.3)", seed=2))
    ds = make_slice_dataset(rec, labels, scale=4.0)
    assert len(ds) == 200
    res = train(build_unet25(UNet25Config(patch_size=32)), ds,
                TrainConfig(max_epochs=30, class_weight_power=2.0))
    assert max(h["val_dice"] for h in res.history[1:]) > res.history[0]["val_dice"]
    assert res.best_val_dice > res.history[0]["val_dice"]
    pred = predict_volume(res.model, rec, scale=4.0)
    assert pred.shape == labels.shape
