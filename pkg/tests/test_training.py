import numpy as np
import pytest

from splatparts.avatar import Avatar, Gaussians, to_global_space
from splatparts.errors import TrainingDiverged, ZeroScale
from splatparts.hashgrid import HashGridConfig, SparseGrad
from splatparts.network import PARAM_NAMES, DisentangleModel, NetConfig
from splatparts.synthetic import make_synthetic_avatar, three_band_sphere_spec
from splatparts.training import Adam, assign_segments, build_targets, train

from conftest import tiny_avatar

FAST = dict(hidden_dim=16, batch_size=256, dtype="float64", hash=HashGridConfig(levels=4, table_size=2 ** 10))


def global_tiny():
    return to_global_space(tiny_avatar())


def test_targets_examples():
    av = global_tiny()
    g = av.gaussians
    g.sh[0, 0] = 3.0
    g.sh[0, 1] = -3.0
    g.scale[0] = [2, 2, 1]
    g.rot[0] = [0, 0, 0, 2]
    t = build_targets(av)
    assert t.features.shape == (6, 56) and t.reconstruction.shape == (6, 52)
    assert t.reconstruction[0, 4] == 2.4 and t.reconstruction[0, 5] == -2.4
    assert np.allclose(t.reconstruction[0, :3], [2 / 3, 2 / 3, 1 / 3])
    assert np.allclose(t.features[0, :4], [0, 0, 0, 1])
    assert t.reconstruction[0, 3] == g.opacity[0]


def test_targets_need_global_space():
    with pytest.raises(ValueError):
        build_targets(tiny_avatar())


def test_targets_zero_scale():
    av = global_tiny()
    # bypass validation to inject a degenerate scale
    av.gaussians.scale[1] = 0.0
    with pytest.raises(ZeroScale):
        build_targets(av)


def test_zero_steps_returns_init():
    av, _ = make_synthetic_avatar(three_band_sphere_spec(seed=0, stacks=8, slices=8))
    cfg = NetConfig(total_steps=0, seed=3, **FAST)
    model, log = train(av, cfg)
    ref = DisentangleModel.init(cfg, np.random.default_rng(3))
    for k in PARAM_NAMES:
        assert np.array_equal(model.params[k], ref.params[k])
    assert np.array_equal(model.hash_state.embeddings, ref.hash_state.embeddings)
    assert log.steps == []


def test_training_deterministic_and_learns():
    av, _ = make_synthetic_avatar(three_band_sphere_spec(seed=0, stacks=10, slices=12))
    cfg = NetConfig(total_steps=60, seed=1, lr=3e-3, usage_weight=0.1, **FAST)
    m1, log1 = train(av, cfg)
    m2, log2 = train(av, cfg)
    for k in PARAM_NAMES:
        assert np.array_equal(m1.params[k], m2.params[k])
    assert np.array_equal(m1.hash_state.embeddings, m2.hash_state.embeddings)
    assert log1.total == log2.total
    assert np.mean(log1.reconstruction[-10:]) < np.mean(log1.reconstruction[:10])
    assert log1.channel_usage.sum() == len(av)
    assert log1.tau[0] == 1.0 and log1.tau[-1] == pytest.approx(0.1)


def test_raw_xyz_and_plain_softmax_run():
    av, _ = make_synthetic_avatar(three_band_sphere_spec(seed=0, stacks=8, slices=8))
    cfg = NetConfig(total_steps=5, encoder="raw_xyz", activation="plain_softmax", **FAST)
    model, _ = train(av, cfg)
    assert model.hash_state is None
    assert assign_segments(model, av).shape == (len(av),)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported():
    av, _ = make_synthetic_avatar(three_band_sphere_spec(seed=0, stacks=8, slices=8))
    cfg = NetConfig(total_steps=50, lr=1e120, lr_hash=1e120, **FAST)
    with pytest.raises(TrainingDiverged):
        train(av, cfg)


def test_empty_avatar_rejected():
    av = tiny_avatar()
    with pytest.raises(ValueError):
        train(Avatar(av.mesh, Gaussians.empty()), NetConfig(**FAST))


def test_assign_segments_tie_and_shift():
    av = tiny_avatar()
    cfg = NetConfig(encoder="raw_xyz", hidden_dim=4, bottleneck=3)
    model = DisentangleModel.init(cfg, np.random.default_rng(0))
    model.params["W3"][:] = 0
    model.params["b3"][:] = [1.0, 1.0, 0.0]
    assert np.all(assign_segments(model, av) == 0)
    model.params["b3"][:] = [5.0, 0.0, 0.0]
    assert np.all(assign_segments(model, av) == 0)
    model.params["b3"][:] = [0.0, 0.0, 1.0]
    labels = assign_segments(model, av)
    model.params["b3"] += 100.0
    assert np.array_equal(assign_segments(model, av), labels)


def test_lazy_adam_matches_dense_reference(rng):
    cfg = NetConfig(**FAST)
    model = DisentangleModel.init(cfg, rng)
    ref = model.hash_state.embeddings.reshape(-1, 2).copy()
    opt = Adam(model, cfg)
    m, v = np.zeros_like(ref), np.zeros_like(ref)
    grads = {k: np.zeros_like(p) for k, p in model.params.items()}
    for t in range(1, 4):
        idx = np.unique(rng.integers(0, len(ref), 20))
        vals = rng.normal(size=(len(idx), 2))
        opt.step(model, {**grads, "embeddings": SparseGrad(idx, vals)})
        # reference: moments of touched rows only, bias correction on the global step
        m[idx] = 0.9 * m[idx] + 0.1 * vals
        v[idx] = 0.99 * v[idx] + 0.01 * vals ** 2
        ref[idx] -= cfg.lr_hash * (m[idx] / (1 - 0.9 ** t)) / (np.sqrt(v[idx] / (1 - 0.99 ** t)) + cfg.adam_eps)
    assert np.allclose(model.hash_state.embeddings.reshape(-1, 2), ref, atol=1e-15)
