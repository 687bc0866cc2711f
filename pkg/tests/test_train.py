import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import log_softmax, softmax

from spapnet.pose_ingest import ManifestRecord
from spapnet.train import (Adam, ReduceOnPlateau, TrainConfig, focal_loss,
                           inverse_frequency_alpha, make_folds, read_config, write_history)


def logits_for(p_t):
    """Two-class logits whose softmax puts ``p_t`` on class 0."""
    return np.array([[math.log(p_t / (1 - p_t)), 0.0]])


def test_focal_examples():
    assert focal_loss(np.zeros((1, 2)), [0], gamma=0.0) == pytest.approx(math.log(2), abs=1e-15)
    loss = focal_loss(logits_for(0.9), [0], gamma=2.0)
    assert loss == pytest.approx(0.01 * -math.log(0.9), abs=1e-15)
    assert round(loss, 8) == 0.00105361


def test_focal_perfect_prediction_is_zero():
    for gamma in (0.5, 2.0, 5.0):
        assert focal_loss(np.array([[800.0, 0.0]]), [0], gamma) == 0.0


def test_focal_clamp_keeps_loss_finite():
    loss, grad = focal_loss(np.array([[0.0, 1e4]]), [0], gamma=2.0, return_grad=True)
    assert loss == pytest.approx(-math.log(1e-12))
    assert np.isfinite(grad).all()


def test_focal_alpha_and_mean():
    z = np.array([[0.0, 0.0], [2.0, -1.0]])
    per = [focal_loss(z[i:i + 1], [y], 2.0, [0.25, 4.0]) for i, y in enumerate([1, 0])]
    assert focal_loss(z, [1, 0], 2.0, [0.25, 4.0]) == pytest.approx(np.mean(per), abs=1e-15)


@given(arrays(np.float64, (6, 4), elements=st.floats(-30, 30)),
       st.lists(st.integers(0, 3), min_size=6, max_size=6))
def test_gamma_zero_is_cross_entropy(z, y):
    y = np.array(y)
    ce = -log_softmax(z, axis=1)[np.arange(6), y]
    ce = np.minimum(ce, -math.log(1e-12)).mean()
    loss, grad = focal_loss(z, y, gamma=0.0, return_grad=True)
    assert abs(loss - ce) < 1e-12
    onehot = np.eye(4)[y]
    unclamped = (-log_softmax(z, axis=1)[np.arange(6), y]) < -math.log(1e-12)
    expected = (softmax(z, axis=1) - onehot) / 6 * unclamped[:, None]
    np.testing.assert_allclose(grad, expected, atol=1e-12)


@given(arrays(np.float64, (5, 3), elements=st.floats(-20, 20)),
       st.lists(st.integers(0, 2), min_size=5, max_size=5), st.floats(0, 5))
def test_focal_non_negative(z, y, gamma):
    assert focal_loss(z, y, gamma) >= 0


def test_inverse_frequency_alpha():
    np.testing.assert_allclose(inverse_frequency_alpha(np.array([0, 0, 0, 1]), 2), [2 / 3, 2])
    np.testing.assert_allclose(inverse_frequency_alpha(np.array([0, 0]), 3), [1 / 3, 0, 0])


def test_plateau_arithmetic():
    sched = ReduceOnPlateau(0.01, factor=0.1, patience=25, floor=1e-5)
    sched.step(1.0)
    for _ in range(50):
        lr = sched.step(1.0)
    assert lr == pytest.approx(1e-4, rel=1e-12)
    for _ in range(200):
        lr = sched.step(1.0)
    assert lr == 1e-5


def test_plateau_resets_on_improvement():
    sched = ReduceOnPlateau(0.01, patience=3)
    for metric in [1.0, 1.0, 1.0, 0.5, 0.6, 0.6]:
        lr = sched.step(metric)
    assert lr == 0.01


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0])}
    Adam(p, lr=0.1).step(p, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-7)


def records(n_per_class, participants=None):
    out = []
    for label in ("positive", "negative"):
        for i in range(n_per_class):
            vid = f"{label}_{i}"
            pid = participants(label, i) if participants else vid
            out.append(ManifestRecord(vid, pid, label))
    return out


def test_folds_even_split_and_partition():
    plan = make_folds(records(5), k=5, seed=3)
    assert [len(f) for f in plan.folds] == [2] * 5
    all_ids = [v for f in plan.folds for v in f]
    assert sorted(all_ids) == sorted(r.video_id for r in records(5))
    for fold in range(5):
        train, val = plan.split(fold)
        assert not set(train) & set(val)
        assert len(train) + len(val) == 10
        # stratified: one video of each class per fold
        assert sorted(v.split("_")[0] for v in val) == ["negative", "positive"]


def test_folds_deterministic():
    assert make_folds(records(8), 5, seed=11) == make_folds(records(8), 5, seed=11)
    assert make_folds(records(8), 5, seed=11) != make_folds(records(8), 5, seed=12)


def test_participant_grouping():
    recs = records(10, participants=lambda lab, i: f"{lab}-p{i // 2}")
    plan = make_folds(recs, 5, seed=0, group_by="participant")
    owner = {r.video_id: r.participant_id for r in recs}
    for a in range(5):
        for b in range(a + 1, 5):
            assert not {owner[v] for v in plan.folds[a]} & {owner[v] for v in plan.folds[b]}


def test_small_class_warns_and_falls_back():
    recs = records(6)[:8]  # 6 positive, 2 negative
    with pytest.warns(UserWarning, match="not stratified"):
        plan = make_folds(recs, 5, seed=0)
    assert sorted(v for f in plan.folds for v in f) == sorted(r.video_id for r in recs)


def test_fold_errors():
    with pytest.raises(ValueError):
        make_folds(records(1), k=5)
    with pytest.raises(ValueError):
        make_folds(records(5), k=1)


def test_config_defaults_by_mode():
    assert (TrainConfig().lr, TrainConfig().batch_size) == (0.01, 16)
    mc = TrainConfig(mode="multiclass")
    assert (mc.lr, mc.batch_size, mc.max_epochs) == (0.001, 8, 500)
    for bad in ({"lr": 0}, {"batch_size": 0}, {"focal_gamma": -1}, {"focal_alpha": [1, -1]},
                {"mode": "ternary"}, {"group_by": "site"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# comment\nmode = multiclass\nlr = 0.005\nmax_epochs: 40\n"
                    "focal_alpha = 1,2,3,4,5\n")
    cfg = read_config(path, max_epochs=7, seed=None)
    assert (cfg.mode, cfg.lr, cfg.max_epochs, cfg.batch_size) == ("multiclass", 0.005, 7, 8)
    assert cfg.focal_alpha == [1, 2, 3, 4, 5]
    path.write_text("learning_rate = 1\n")
    with pytest.raises(ValueError, match="unknown config key"):
        read_config(path)


def test_history_header(tmp_path):
    write_history(tmp_path / "h.csv", [{"epoch": 1, "train_loss": 0.5, "val_loss": 0.4,
                                        "val_bal_acc": 1.0, "lr": 0.01}])
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_bal_acc,lr"
    assert lines[1] == "1,0.5,0.4,1.0,0.01"


def test_no_unexpected_warnings_in_stratified_case():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        make_folds(records(5), 5, seed=0)
