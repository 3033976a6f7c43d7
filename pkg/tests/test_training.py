import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vhm import autodiff as ad
from vhm.model import build, tiny_config
from vhm.training import (Adam, NormStats, PatchSet, TrainConfig, apply_norm, compute_norm_stats, fit, load_norm,
                          loss, predict_centers, save_norm, split_by_location, write_log)


def test_norm_stats_examples():
    x = np.zeros((2, 1, 1, 1))
    x[1] = 10
    s = compute_norm_stats(x)
    assert s.mean[0] == 5 and s.std[0] == 5
    assert apply_norm(x, s).ravel().tolist() == [-1, 1]
    with pytest.raises(ValueError):
        compute_norm_stats(np.ones((3, 2, 4, 4)))
    with pytest.raises(ValueError):
        compute_norm_stats(np.zeros((0, 2, 4, 4)))


def test_normalized_training_moments(tmp_path):
    x = np.random.default_rng(0).normal([[[[3.0]], [[-7.0]], [[100.0]]]], [[[[2.0]], [[0.1]], [[50.0]]]],
                                        size=(50, 3, 15, 15))
    s = compute_norm_stats(x)
    z = apply_norm(x, s).astype(np.float64)
    assert np.allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-3)
    assert np.allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-3)
    save_norm(s, tmp_path / "n.txt")
    back = load_norm(tmp_path / "n.txt")
    assert np.array_equal(back.mean, s.mean) and np.array_equal(back.std, s.std)


def test_loss_examples():
    assert loss([[1.0, 2.0]], [[1.0, 2.0]], [], 0.0) == 0
    assert loss([[10.0, 20.0]], [[12.0, 16.0]], [], 0.0) == 3
    assert loss([[1.0, 2.0]], [[1.0, 2.0]], [np.array([1.0, -2.0])], 0.5) == 2.5


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_loss_properties(seed, lam):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    theta = [rng.normal(size=3)]
    perm = rng.permutation(6)
    assert loss(p, t, [], 0) == pytest.approx(loss(p[perm], t[perm], [], 0), rel=1e-12)
    v = loss(p, t, theta, lam)
    assert v >= 0
    assert loss(t, t, theta, lam) == pytest.approx(lam * float(theta[0] @ theta[0]))


def test_training_objective_matches_numeric_loss():
    m = build(tiny_config(), seed=0, dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(3, 15, 15, 5))
    y = np.random.default_rng(1).normal(size=(3, 2))
    tape = ad.Tape()
    out = m.apply(ad.Tensor(x), training=True, tape=tape)
    c = ad.pixel(out, 7, 7, tape)
    total = ad.add_scalars(ad.mean_abs_error(c, y, tape), ad.l2_penalty(m.params.trainable(), 1e-3, tape), tape)
    expect = loss(c.value, y, [p.value for p in m.params.trainable()], 1e-3)
    assert float(total.value) == pytest.approx(expect, rel=1e-12)
    assert all(p.kind != "bn_stat" for p in m.params.trainable())


def adam_scalar_reference(grads, lr, b1=0.9, b2=0.999, eps=1e-8, theta=0.0):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        theta -= lr * mh / (vh**0.5 + eps)
        out.append(theta)
    return out


def _run_adam(grads, lr):
    p = ad.Param("p", np.zeros(1))
    opt = Adam([p], lr)
    out = []
    for g in grads:
        p.grad[:] = g
        opt.step()
        out.append(float(p.value[0]))
    return out


def test_adam_first_steps():
    assert _run_adam([0.0], 1e-3) == [0.0]
    assert _run_adam([1.0], 1e-5)[0] == pytest.approx(-1e-5 / (1 + 1e-8), rel=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_adam_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    grads = rng.normal(0, rng.uniform(0.01, 10), 100).tolist()
    lr = float(rng.uniform(1e-5, 1e-2))
    got, ref = _run_adam(grads, lr), adam_scalar_reference(grads, lr)
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-15)


def test_adam_update_bounded_for_alternating_signs():
    lr = 1e-3
    traj = [0.0] + _run_adam([1.0, -1.0] * 50, lr)
    steps = np.abs(np.diff(traj))
    assert steps.max() <= lr / (1 - 0.9) + 1e-12


@settings(max_examples=50)
@given(st.lists(st.integers(0, 30), min_size=2, max_size=200), st.floats(0.05, 0.95), st.integers(0, 100))
def test_split_is_location_disjoint(locs, frac, seed):
    locs = np.array(locs)
    if len(np.unique(locs)) < 2:
        with pytest.raises(ValueError):
            split_by_location(locs, frac, seed)
        return
    tr, va = split_by_location(locs, frac, seed)
    assert set(locs[tr]).isdisjoint(locs[va])
    assert len(tr) + len(va) == len(locs) and len(tr) and len(va)


def _linear_set(n=600, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5, 15, 15)).astype(np.float32)
    ym = 10 + 3 * x[:, 0, 7, 7] + 2 * x[:, 1, 7, 7]
    y = np.stack([ym, ym + 4 + x[:, 2, 7, 7]], axis=1).astype(np.float32)
    return PatchSet(x, y, np.arange(n), np.full(n, 2021))


def test_zero_iterations_returns_initial_model():
    m = build(tiny_config(), seed=0)
    before = m.params.state()
    res = fit(m, _linear_set(50), TrainConfig(iterations=0))
    assert res.log == []
    assert all(np.array_equal(before[n], p.value) for n, p in zip(before, m.params))


def test_same_seed_identical_logs(tmp_path):
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, iterations=20, val_interval=10, log_interval=5)
    logs = []
    for k in range(2):
        res = fit(build(tiny_config(), seed=0), _linear_set(80), cfg)
        write_log(res.log, tmp_path / f"log{k}.csv")
        logs.append((tmp_path / f"log{k}.csv").read_bytes())
    assert logs[0] == logs[1]
    assert logs[0].startswith(b"iteration,split,loss,mae,mbe\n")


def test_fit_beats_constant_baseline_on_linear_data():
    data = _linear_set()
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, iterations=2000, val_interval=500, epoch_sample=4000)
    res = fit(build(tiny_config(), seed=0), data, cfg)
    xv = apply_norm(data.x[res.val_index], res.norm)
    yv = data.y[res.val_index]
    mae = np.abs(predict_centers(res.model, xv) - yv).mean()
    baseline = np.abs(yv - data.y[res.train_index].mean(axis=0)).mean()
    assert mae < baseline
    val = [r for r in res.log if r["split"] == "val"]
    assert res.best_val_mae < val[0]["mae"]


def test_predict_centers_equals_full_patch_eval():
    m = build(tiny_config(), seed=0)
    x = np.random.default_rng(0).normal(size=(3, 5, 15, 15)).astype(np.float32)
    full = m(x)[:, :, 7, 7]
    assert np.allclose(predict_centers(m, x), full, atol=1e-5)


def test_config_text():
    cfg = TrainConfig.from_text("batch_size=8\nlearning_rate=0.01\ninit_head_bias=false\n", iterations=7)
    assert (cfg.batch_size, cfg.learning_rate, cfg.init_head_bias, cfg.iterations) == (8, 0.01, False, 7)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_text("momentum=3\n")


def test_norm_text_round_trip():
    n = NormStats(np.array([0.1, 2.0]), np.array([1e-3, 7.5]))
    back = NormStats.from_text(n.to_text())
    assert np.array_equal(back.mean, n.mean) and np.array_equal(back.std, n.std)
