import numpy as np
import pytest

from oracles import pairwise_auc
from sonarmatch.detect import detect_pair
from sonarmatch.errors import DatasetError, ImageTooSmallError
from sonarmatch.imagecore import GrayImage, IntensityCurve
from sonarmatch.net import ArchConfig, SiameseModel
from sonarmatch.patches import Patch, SamplePair, build_dataset
from sonarmatch.synth import SurveyConfig, gen_seafloor, make_survey_pair, random_survey_transform
from sonarmatch.train import (TrainConfig, evaluate_model, evaluate_scores, pretrain, rank_auc,
                              split_by_correspondence, train_model)


def survey(seed, size=128):
    t = random_survey_transform(np.random.default_rng(seed), size, size)
    cfg = SurveyConfig(seed=seed, width=size, height=size, transform=t, curve_a=IntensityCurve.gamma(0.7),
                       curve_b=IntensityCurve.gamma(1.6), speckle_strength=0.3, shading_direction="left")
    return make_survey_pair(gen_seafloor(seed, size, size), cfg)


def overfit_data():
    # five correspondences: one goes to validation, leaving eight training pairs
    a, b, t = make_survey_pair(gen_seafloor(1, 128, 128), SurveyConfig(
        seed=3, width=128, height=128, curve_a=IntensityCurve.gamma(0.7), curve_b=IntensityCurve.gamma(1.6),
        speckle_strength=0.3, shading_direction="left"))
    fa, fb = detect_pair(a, b, t, margin=10)
    return build_dataset(a, b, fa[:5], fb[:5], 8, 8, seed=0)


OVERFIT_CFG = TrainConfig(epochs=500, batch_size=8, seed=0)


@pytest.fixture(scope="module")
def overfit_run():
    data = overfit_data()
    return data, train_model(SiameseModel.init(seed=0), data, OVERFIT_CFG)


def test_overfit_eight_pairs(overfit_run):
    data, (_, history) = overfit_run
    train_idx, _ = split_by_correspondence(data, OVERFIT_CFG.validation_fraction, np.random.default_rng(0))
    assert len(train_idx) == 8
    assert len(history) == 500
    assert history[-1].loss < 0.05
    assert history[-1].train_acc == 1.0


def test_overfit_smoothed_loss_non_increasing(overfit_run):
    losses = np.array([e.loss for e in overfit_run[1][1]])
    windows = losses.reshape(-1, 20).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)


def test_training_is_bit_reproducible(overfit_run):
    data, (model, history) = overfit_run
    again, history2 = train_model(SiameseModel.init(seed=0), data, OVERFIT_CFG)
    assert again.equals(model)
    assert [e.loss for e in history2] == [e.loss for e in history]


def test_training_leaves_input_untouched():
    data = overfit_data()
    init = SiameseModel.init(seed=1)
    snapshot = init.copy()
    train_model(init, data, TrainConfig(epochs=3, batch_size=4))
    assert init.equals(snapshot)


def test_different_seed_changes_trajectory():
    data = overfit_data()
    m1, _ = train_model(SiameseModel.init(seed=0), data, TrainConfig(epochs=5, batch_size=2, seed=0))
    m2, _ = train_model(SiameseModel.init(seed=0), data, TrainConfig(epochs=5, batch_size=2, seed=1))
    assert not m1.equals(m2)


def test_single_class_rejected():
    rng = np.random.default_rng(0)
    data = [SamplePair(Patch(rng.random((8, 8))), Patch(rng.random((8, 8))), 1) for _ in range(6)]
    with pytest.raises(DatasetError):
        train_model(SiameseModel.init(), data, TrainConfig(epochs=1))
    with pytest.raises(DatasetError):
        train_model(SiameseModel.init(), data[:1], TrainConfig(epochs=1))


def test_split_keeps_correspondences_together():
    data = overfit_data()
    for seed in range(10):
        tr, va = split_by_correspondence(data, 0.4, np.random.default_rng(seed))
        assert len(tr) + len(va) == len(data) and not set(tr) & set(va)
        train_a = {data[i].patch_a.data.tobytes() for i in tr}
        assert not any(data[i].patch_a.data.tobytes() in train_a for i in va)


def test_train_config_validation():
    for bad in (dict(validation_fraction=0.0), dict(validation_fraction=1.0), dict(batch_size=0),
                dict(lr_schedule="step")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cos = TrainConfig(epochs=10, lr=1.0, lr_schedule="cosine")
    assert cos.lr_at(0) == 1.0 and cos.lr_at(5) == pytest.approx(0.5)


# -- evaluation ----------------------------------------------------------------


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(4)
    for trial in range(20):
        n = int(rng.integers(2, 200))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = np.round(rng.random(n), 1 if trial % 2 else 6)  # odd trials force ties
        assert rank_auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


def test_model_auc_matches_pairwise_count(overfit_run):
    data, (model, _) = overfit_run
    rep = evaluate_model(model, data)
    xa = np.stack([s.patch_a.data for s in data])
    xb = np.stack([s.patch_b.data for s in data])
    assert rep.auc == pytest.approx(pairwise_auc(model.predict(xa, xb), [s.label for s in data]))


def test_oracle_and_constant_predictors():
    labels = np.array([1, 0] * 10)
    perfect = evaluate_scores(labels.astype(float), labels)
    assert perfect.accuracy == 1.0 and perfect.auc == 1.0
    flat = evaluate_scores(np.full(20, 0.5), labels)
    assert flat.accuracy == 0.5 and flat.tp == 10 and flat.fp == 10 and flat.auc == 0.5


def test_confusion_counts_sum_to_size():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n = int(rng.integers(1, 50))
        rep = evaluate_scores(rng.random(n), rng.integers(0, 2, n), float(rng.random()))
        assert rep.n == n
        assert all(0 <= v <= 1 for v in (rep.accuracy, rep.precision, rep.recall, rep.auc))


def test_evaluate_empty():
    with pytest.raises(DatasetError):
        evaluate_model(SiameseModel.init(), [])


# -- pretraining -----------------------------------------------------------------


def test_pretrain_keeps_architecture():
    arch = ArchConfig(channels=(4, 4, 4), embed_dim=64, head_hidden=8)
    init = SiameseModel.init(arch, seed=0)
    out = pretrain(init, [gen_seafloor(0, 64, 64)], TrainConfig(epochs=1), m=4, n=4, pairs_per_image=8)
    assert out.arch == init.arch
    assert {k: v.shape for k, v in out.params.items()} == {k: v.shape for k, v in init.params.items()}


def test_pretrain_errors():
    with pytest.raises(DatasetError):
        pretrain(SiameseModel.init(), [], TrainConfig(epochs=1))
    with pytest.raises(ImageTooSmallError):
        pretrain(SiameseModel.init(), [GrayImage(np.zeros((40, 40)))], TrainConfig(epochs=1), m=8, n=8)


def epochs_to_reach(history, target):
    return next((e.epoch for e in history if e.val_acc >= target), len(history) + 1)


@pytest.mark.slow
def test_pretraining_reaches_target_no_later_than_scratch():
    a, b, t = survey(11)
    fa, fb = detect_pair(a, b, t, margin=12)
    data = build_dataset(a, b, fa[:100], fb[:100], 8, 8, seed=0)
    assert len(data) == 200
    waterfalls = [gen_seafloor(100 + i, 128, 128) for i in range(2)]
    warm = pretrain(SiameseModel.init(seed=0), waterfalls, TrainConfig(epochs=10, seed=0), m=8, n=8,
                    pairs_per_image=128)
    fine = TrainConfig(epochs=30, seed=1)
    target = 0.65
    _, h_scratch = train_model(SiameseModel.init(seed=0), data, fine)
    _, h_warm = train_model(warm, data, fine)
    assert epochs_to_reach(h_warm, target) <= 30
    assert epochs_to_reach(h_warm, target) <= epochs_to_reach(h_scratch, target)
