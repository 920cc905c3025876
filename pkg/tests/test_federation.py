import warnings
from collections import OrderedDict

import numpy as np
import pytest

import fedsem.autodiff as ad
from fedsem import mimo
from fedsem.autodiff import Tensor
from fedsem.config import ExperimentConfig
from fedsem.federation import (KdLossConfig, SemanticLink, Teacher,
                               aggregate_results_classification,
                               aggregate_results_reconstruction, build_link,
                               build_task_data, fedavg_aggregate, kd_loss,
                               link_forward_batch, local_update, recon_loss,
                               run_federated_training, stitch_panorama,
                               train_teacher, transmit_batch, _shard_arrays)
from fedsem.nn import AdamW
from fedsem.seeding import Purpose, substream

RNG = np.random.default_rng(88)


def _log_softmax(x):
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- losses -------------------------------------------------------------------

def test_kd_lambda_zero_is_smoothed_ce():
    cls = RNG.normal(size=(4, 4))
    dis = RNG.normal(size=(4, 4))
    teacher = RNG.normal(size=(4, 4))
    labels = np.array([0, 1, 2, 3])
    cfg = KdLossConfig(lam=0.0, tau_k=0.5, mu=0.2)
    got = kd_loss(Tensor(cls), Tensor(dis), labels, teacher, cfg).item()
    one_hot = np.eye(4)[labels]
    smoothed = 0.8 * one_hot + 0.2 / 4
    expected = -np.mean((smoothed * _log_softmax(cls)).sum(axis=-1))
    assert got == pytest.approx(expected, abs=1e-12)


def test_kd_lambda_one_matched_student_is_zero():
    logits = RNG.normal(size=(3, 4))
    labels = np.array([0, 1, 2])
    cfg = KdLossConfig(lam=1.0, tau_k=0.5, mu=0.2)
    got = kd_loss(Tensor(logits), Tensor(logits.copy()), labels,
                  logits.copy(), cfg).item()
    assert got == pytest.approx(0.0, abs=1e-12)


def test_kd_hand_oracle_midpoint():
    cls = RNG.normal(size=(2, 4))
    dis = RNG.normal(size=(2, 4))
    teacher = RNG.normal(size=(2, 4))
    labels = np.array([3, 0])
    lam, tau, mu = 0.5, 0.5, 0.2
    cfg = KdLossConfig(lam=lam, tau_k=tau, mu=mu)
    got = kd_loss(Tensor(cls), Tensor(dis), labels, teacher, cfg).item()
    one_hot = np.eye(4)[labels]
    smoothed = (1 - mu) * one_hot + mu / 4
    ce = -np.mean((smoothed * _log_softmax(cls)).sum(axis=-1))
    p_s = _softmax(dis / tau)
    kl = np.mean((p_s * (_log_softmax(dis / tau)
                         - _log_softmax(teacher / tau))).sum(axis=-1))
    expected = (1 - lam) * ce + lam * tau ** 2 * kl
    assert got == pytest.approx(expected, abs=1e-12)


def test_kd_config_validation():
    with pytest.raises(ValueError):
        KdLossConfig(lam=1.2)
    with pytest.raises(ValueError):
        KdLossConfig(lam=-0.1)
    with pytest.raises(ValueError):
        KdLossConfig(tau_k=0.0)
    with pytest.raises(ValueError):
        KdLossConfig(mu=1.0)


def test_kd_gradient_continuity_in_lambda():
    cls = RNG.normal(size=(2, 4))
    dis = RNG.normal(size=(2, 4))
    teacher = RNG.normal(size=(2, 4))
    labels = np.array([1, 2])
    values = [kd_loss(Tensor(cls), Tensor(dis), labels, teacher,
                      KdLossConfig(lam=l)).item()
              for l in (0.0, 0.25, 0.5, 0.75, 1.0)]
    # linear in lambda: second differences vanish
    second = np.diff(values, n=2)
    assert np.abs(second).max() < 1e-12


def test_kd_teacher_shape_mismatch_rejected():
    cfg = KdLossConfig()
    with pytest.raises(ValueError):
        kd_loss(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))),
                np.array([0, 1]), np.zeros((3, 4)), cfg)


def test_recon_loss_per_image_sum_batch_mean():
    pred = Tensor(np.ones((2, 3, 4, 4)))
    target = np.zeros((2, 3, 4, 4))
    # each image contributes 3*4*4 = 48; mean over batch stays 48
    assert recon_loss(pred, target).item() == pytest.approx(48.0)


# -- fedavg -------------------------------------------------------------------

def _state(values):
    return OrderedDict((k, np.array(v, dtype=np.float64))
                       for k, v in values.items())


def test_fedavg_idempotent():
    s = _state({"w": [[1.0, 2.0]], "b": [0.5]})
    out = fedavg_aggregate([(s, 7), (s, 7)])
    for k in s:
        assert np.allclose(out[k], s[k], atol=1e-15)


def test_fedavg_symmetry_cancellation():
    a = _state({"w": [[1.0, -2.0]]})
    b = _state({"w": [[-1.0, 2.0]]})
    out = fedavg_aggregate([(a, 3), (b, 3)])
    assert np.allclose(out["w"], 0.0, atol=1e-15)


def test_fedavg_weighted_mean_oracle():
    a = _state({"w": [1.0]})
    b = _state({"w": [4.0]})
    out = fedavg_aggregate([(a, 1), (b, 3)])
    assert out["w"][0] == pytest.approx((1 * 1.0 + 3 * 4.0) / 4.0, abs=1e-12)


def test_fedavg_includes_buffers_and_validates():
    a = _state({"w": [1.0], "buffer.bn.running_mean": [0.0]})
    b = _state({"w": [2.0], "buffer.bn.running_mean": [1.0]})
    out = fedavg_aggregate([(a, 2), (b, 2)])
    assert out["buffer.bn.running_mean"][0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fedavg_aggregate([])
    with pytest.raises(ValueError):
        fedavg_aggregate([(a, 1), (_state({"other": [1.0]}), 1)])
    with pytest.raises(ValueError):
        fedavg_aggregate([(a, 1),
                          (_state({"w": [[1.0, 2.0]],
                                   "buffer.bn.running_mean": [0.0]}), 1)])


# -- result aggregation -------------------------------------------------------

def test_classification_aggregation_oracle():
    a = np.array([0.7, 0.1, 0.1, 0.1])
    b = np.array([0.1, 0.6, 0.2, 0.1])
    assert aggregate_results_classification([a, b]) == 0  # mean: .4 vs .35
    assert aggregate_results_classification([b, a]) == 0  # order invariant
    c = np.array([0.05, 0.8, 0.1, 0.05])
    assert aggregate_results_classification([a, b, c]) == 1


def test_classification_aggregation_validates_simplex():
    with pytest.raises(ValueError):
        aggregate_results_classification([np.array([0.5, 0.2, 0.2, 0.2])])
    with pytest.raises(ValueError):
        aggregate_results_classification([])


def test_panorama_full_overlap_is_mean():
    a, b = RNG.random((8, 8, 3)), RNG.random((8, 8, 3))
    canvas, covered = stitch_panorama([a, b], [(0, 0), (0, 0)])
    assert canvas.shape == (8, 8, 3)
    assert covered.all()
    assert np.allclose(canvas, 0.5 * (a + b), atol=1e-12)


def test_panorama_no_overlap_copies():
    a, b = RNG.random((4, 4)), RNG.random((4, 4))
    canvas, covered = stitch_panorama([a, b], [(0, 0), (4, 0)])
    assert canvas.shape == (4, 8)
    assert covered.all()
    assert np.array_equal(canvas[:, :4], a)
    assert np.array_equal(canvas[:, 4:], b)


def test_panorama_partial_overlap_average():
    a = np.ones((2, 4))
    b = np.zeros((2, 4))
    canvas, _ = stitch_panorama([a, b], [(0, 0), (2, 0)])
    assert np.allclose(canvas[:, :2], 1.0)
    assert np.allclose(canvas[:, 2:4], 0.5)
    assert np.allclose(canvas[:, 4:], 0.0)


def test_panorama_gap_warns():
    a = np.ones((2, 2))
    with pytest.warns(UserWarning, match="uncovered"):
        canvas, covered = stitch_panorama([a, a], [(0, 0), (4, 0)])
    assert not covered[:, 2:4].any()
    assert np.all(canvas[:, 2:4] == 0.0)
    assert aggregate_results_reconstruction


def test_panorama_validates():
    with pytest.raises(ValueError):
        stitch_panorama([], [])
    with pytest.raises(ValueError):
        stitch_panorama([np.ones((2, 2))], [])
    with pytest.raises(ValueError):
        stitch_panorama([np.ones((2, 2)), np.ones((3, 3))], [(0, 0), (0, 0)])


# -- differentiable transmission ---------------------------------------------

def test_transmit_batch_matches_reference_chain():
    rng = np.random.default_rng(5)
    h = mimo.draw_channel(rng)
    h_est = h + 0.05 * mimo.draw_channel(rng)
    sigma = mimo.snr_to_noise_std(8.0)
    y_np = rng.normal(size=(4, 24))
    out = transmit_batch(Tensor(y_np, requires_grad=True), h, h_est, sigma,
                         np.random.default_rng(42))
    noise = mimo.complex_noise(np.random.default_rng(42), (4, 2, 6), sigma)
    svd = mimo.svd_decompose(h_est)
    for i in range(4):
        block = mimo.pack_and_normalize(y_np[i])
        z_hat = h @ mimo.precode(block.values, svd.v_p) + noise[i]
        expected = mimo.unpack(mimo.detect(z_hat, svd.u, svd.sv), block.scale)
        assert np.allclose(out.data[i], expected, atol=1e-12)


def test_transmit_batch_gradient_is_linear_map():
    # with noise fixed, d out/d y must match the effective matrix algebra
    rng = np.random.default_rng(6)
    h = mimo.draw_channel(rng)
    y_np = rng.normal(size=(1, 8))
    y = Tensor(y_np, requires_grad=True)
    out = transmit_batch(y, h, h, 0.0, np.random.default_rng(0))
    out.sum().backward()
    g_analytic = y.grad.copy()
    eps = 1e-6
    g_fd = np.zeros_like(y_np)
    for j in range(8):
        for sign, store in ((1, 1), (-1, -1)):
            bumped = y_np.copy()
            bumped[0, j] += sign * eps
            val = transmit_batch(Tensor(bumped), h, h, 0.0,
                                 np.random.default_rng(0)).data.sum()
            g_fd[0, j] += store * val
    g_fd /= 2 * eps
    # scale is treated as a constant, so compare against that convention:
    # re-linearize around y with frozen scale
    assert np.allclose(g_analytic, g_fd, rtol=1e-3, atol=1e-5)


def test_transmit_batch_rejects_bad_width():
    h = mimo.draw_channel(np.random.default_rng(0))
    with pytest.raises(ValueError):
        transmit_batch(Tensor(np.zeros((2, 6))), h, h, 0.1,
                       np.random.default_rng(0))


def test_link_forward_batch_shapes():
    link = build_link("classify", "desk", 0.04, substream(0, Purpose.INIT))
    h = mimo.draw_channel(np.random.default_rng(1))
    x_hat, planes, h_u = link_forward_batch(
        link, Tensor(RNG.random((2, 1, 32, 32))), h, 0.1,
        np.random.default_rng(2), np.random.default_rng(3))
    assert x_hat.shape == (2, 64)
    assert planes.shape == (1, 2, 2, 2)
    assert h_u.shape == (2, 2)


# -- teacher ------------------------------------------------------------------

def _teacher_data(n=64):
    rng = np.random.default_rng(4)
    views = np.zeros((n, 1, 16, 16))
    labels = rng.integers(0, 4, size=n)
    for i, lab in enumerate(labels):
        if lab == 0:
            views[i, 0, ::2] = 1.0
        elif lab == 1:
            views[i, 0, :, ::2] = 1.0
        elif lab == 2:
            views[i, 0, :8] = 1.0
        else:
            views[i, 0, :, :8] = 1.0
        views[i] += rng.normal(0, 0.05, size=(1, 16, 16))
    return views, labels


def test_teacher_trains_to_threshold():
    views, labels = _teacher_data()
    teacher, acc = train_teacher(views, labels, master_seed=0, steps=200)
    assert acc >= 0.9
    logits = teacher(Tensor(views)).data
    assert logits.shape == (64, 4)


def test_teacher_underfit_rejected():
    views, labels = _teacher_data()
    with pytest.raises(RuntimeError, match="below"):
        train_teacher(views, labels, master_seed=0, steps=0)


def test_teacher_rejects_empty():
    with pytest.raises(ValueError):
        train_teacher(np.zeros((0, 1, 16, 16)), np.zeros(0), master_seed=0)


# -- local training and the full loop ----------------------------------------

def _tiny_cfg(task, **kw):
    defaults = dict(task=task, devices=2, delta=0.6,
                    bandwidth_ratio=0.08 if task == "reconstruct" else 0.04,
                    snr_db=10.0, rounds=1, local_epochs=1, batch_size=4,
                    train_scenes=8, test_scenes=4, seed=2)
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def test_local_update_deterministic():
    cfg = _tiny_cfg("classify")
    data = build_task_data(cfg)
    views, labels = _shard_arrays(data.train_shards[0])
    teacher_logits = RNG.normal(size=(views.shape[0], 4))
    states = []
    for _ in range(2):
        link = build_link("classify", "desk", 0.04, substream(2, Purpose.INIT))
        opt = AdamW(link.parameters(), lr=1e-4, weight_decay=0.05)
        loss = local_update(link, opt, views, labels, teacher_logits,
                            KdLossConfig(), 10.0, 2, 0, 0, 1, 4)
        assert np.isfinite(loss)
        states.append(link.state_dict())
    for k in states[0]:
        assert np.array_equal(states[0][k], states[1][k]), k


def test_local_update_zero_epochs_no_change():
    cfg = _tiny_cfg("classify")
    data = build_task_data(cfg)
    views, labels = _shard_arrays(data.train_shards[0])
    link = build_link("classify", "desk", 0.04, substream(2, Purpose.INIT))
    before = link.state_dict()
    opt = AdamW(link.parameters(), lr=1e-4)
    loss = local_update(link, opt, views, labels,
                        np.zeros((views.shape[0], 4)), KdLossConfig(),
                        10.0, 2, 0, 0, 0, 4)
    assert np.isnan(loss)
    after = link.state_dict()
    for k in before:
        assert np.array_equal(before[k], after[k])


def test_local_update_changes_weights_and_reduces_loss():
    cfg = _tiny_cfg("reconstruct", train_scenes=12)
    data = build_task_data(cfg)
    views, _ = _shard_arrays(data.train_shards[0])
    link = build_link("reconstruct", "desk", 0.08, substream(3, Purpose.INIT))
    opt = AdamW(link.parameters(), lr=5e-4, weight_decay=0.05)
    first = local_update(link, opt, views, None, None, KdLossConfig(),
                         10.0, 3, 0, 0, 2, 4)
    later = local_update(link, opt, views, None, None, KdLossConfig(),
                         10.0, 3, 1, 0, 2, 4)
    assert later < first


def test_run_federated_training_classify_records():
    cfg = _tiny_cfg("classify", rounds=2, train_scenes=12)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = run_federated_training(cfg)
    assert len(result.records) == 2
    for t, rec in enumerate(result.records):
        assert rec.round == t
        assert rec.metric_name == "accuracy"
        assert 0.0 <= rec.metric_value <= 1.0
        assert rec.device_count == 2
        assert rec.seed == 2
    assert result.teacher_state is not None
    assert result.teacher_accuracy >= 0.9
    assert any(k.startswith("encoder.") for k in result.state)


def test_run_federated_training_reconstruct_records():
    cfg = _tiny_cfg("reconstruct", rounds=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = run_federated_training(cfg)
    rec = result.records[0]
    assert rec.metric_name == "psnr"
    assert np.isfinite(rec.metric_value)
    assert result.teacher_state is None


def test_run_warns_without_refiner():
    cfg = _tiny_cfg("reconstruct")
    with pytest.warns(UserWarning, match="refiner"):
        run_federated_training(cfg)


def test_single_device_degenerates_to_local():
    # N=1: the federated loop equals one device training alone
    cfg = _tiny_cfg("classify", devices=1, delta=0.0, train_scenes=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = run_federated_training(cfg)
    assert len(result.records) == 1


def test_identical_participants_aggregate_to_themselves():
    link = build_link("classify", "desk", 0.04, substream(4, Purpose.INIT))
    state = link.state_dict()
    merged = fedavg_aggregate([(state, 5), (state, 5), (state, 5)])
    for k in state:
        assert np.allclose(merged[k], state[k], atol=1e-12)
