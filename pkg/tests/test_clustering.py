import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatparts.avatar import Avatar, Gaussians, Mesh
from splatparts.clustering import (NOISE, DbscanConfig, Segmentation, dbscan, refine_segments,
                                   segmentation_metrics, sweep)

from oracles import brute_force_dbscan, same_partition


def test_config_validation():
    with pytest.raises(ValueError):
        DbscanConfig(eps=0)
    with pytest.raises(ValueError):
        DbscanConfig(min_samples=0)


def test_two_blobs(rng):
    pts = np.concatenate([rng.normal(0, 0.01, (200, 3)), rng.normal(0, 0.01, (200, 3)) + [1, 0, 0]])
    lab = dbscan(pts, DbscanConfig(0.05, 50))
    ref, _ = brute_force_dbscan(pts, 0.05, 50)
    assert set(lab.tolist()) == {0, 1}
    assert same_partition(lab, ref)


def test_isolated_point_is_noise():
    assert dbscan(np.zeros((1, 3)), DbscanConfig(0.1, 2))[0] == NOISE


def test_identical_points_one_cluster():
    lab = dbscan(np.ones((30, 3)), DbscanConfig(0.001, 30))
    assert np.all(lab == 0)


def test_radius_inclusive_and_self_counted():
    pts = np.array([[0, 0, 0], [0.5, 0, 0]])
    # distance exactly eps: neighbours; each point counts itself -> 2 >= 2
    assert np.all(dbscan(pts, DbscanConfig(0.5, 2)) == 0)
    assert np.all(dbscan(pts, DbscanConfig(0.4999, 2)) == NOISE)
    # a single point is core when min_samples == 1
    assert dbscan(pts[:1], DbscanConfig(0.1, 1))[0] == 0


def test_border_point_goes_to_lower_cluster():
    # two dense lines with a border point equidistant to both ends
    a = np.stack([np.linspace(0, 0.9, 10), np.zeros(10), np.zeros(10)], 1)
    b = a + [2.2, 0, 0]
    border = np.array([[1.55, 0, 0]])
    pts = np.concatenate([b, border, a])  # b's core points come first in index order
    lab = dbscan(pts, DbscanConfig(0.7, 4))
    ref, core = brute_force_dbscan(pts, 0.7, 4)
    assert not core[10]
    assert lab[10] == lab[0] == 0
    assert same_partition(lab, ref)


def test_empty_input():
    assert dbscan(np.zeros((0, 3)), DbscanConfig()).shape == (0,)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 300), st.floats(0.01, 0.3), st.integers(1, 20))
def test_matches_brute_force(seed, n, eps, min_samples):
    rng = np.random.default_rng(seed)
    centers = rng.random((3, 3))
    pts = centers[rng.integers(0, 3, n)] + rng.normal(0, 0.05, (n, 3))
    lab = dbscan(pts, DbscanConfig(eps, min_samples))
    ref, _ = brute_force_dbscan(pts, eps, min_samples)
    assert same_partition(lab, ref)


def test_permutation_invariance_of_core_partition(rng):
    pts = rng.random((300, 3)) * 0.2
    cfg = DbscanConfig(0.03, 5)
    lab = dbscan(pts, cfg)
    perm = rng.permutation(300)
    lab_p = np.empty_like(lab)
    lab_p[perm] = dbscan(pts[perm], cfg)
    _, core = brute_force_dbscan(pts, 0.03, 5)
    assert same_partition(lab[core], lab_p[core])
    assert np.array_equal(lab == NOISE, lab_p == NOISE)


def test_noise_monotone_in_eps(rng):
    pts = rng.random((400, 3))
    noise = [np.sum(dbscan(pts, DbscanConfig(e, 6)) == NOISE) for e in (0.02, 0.05, 0.08, 0.12, 0.2)]
    assert all(a >= b for a, b in zip(noise, noise[1:]))


# -- refinement -------------------------------------------------------------------

def point_avatar(mu):
    """Global-space avatar with one Gaussian per point bound to a single triangle."""
    n = len(mu)
    mesh = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]))
    g = Gaussians(mu, np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), 0.01), np.full(n, 0.5),
                  np.zeros((n, 48)), np.zeros(n, dtype=int))
    return Avatar(mesh, g, "global", "points")


def test_refine_single_blob(rng):
    av = point_avatar(rng.normal(0, 0.001, (150, 3)))
    seg = refine_segments(av, np.zeros(150, int))
    assert seg.n_clusters(0) == 1 and not seg.noise.any()


def test_refine_two_strips(rng):
    strip = np.stack([rng.uniform(0, 0.02, 300), rng.uniform(0, 0.004, 300), np.zeros(300)], 1)
    mu = np.concatenate([strip, strip + [0.03, 0, 0], rng.normal(0.5, 0.001, (200, 3))])
    labels = np.r_[np.zeros(600, int), np.ones(200, int)]
    seg = refine_segments(point_avatar(mu), labels, DbscanConfig(0.003, 20))
    assert seg.n_clusters(0) == 2 and seg.n_clusters(1) == 1
    ref, _ = brute_force_dbscan(mu[:600], 0.003, 20)
    assert same_partition(seg.cluster[:600], ref)


def test_refine_sparse_is_all_noise(rng):
    av = point_avatar(rng.random((200, 3)))
    seg = refine_segments(av, np.zeros(200, int), DbscanConfig(0.01, 50))
    assert seg.noise.all()


def test_refine_per_channel_configs(rng):
    mu = rng.normal(0, 0.001, (100, 3))
    labels = np.r_[np.zeros(50, int), np.ones(50, int)]
    seg = refine_segments(point_avatar(mu), labels, {0: DbscanConfig(0.05, 10), 1: DbscanConfig(0.05, 100)})
    assert seg.n_clusters(0) == 1 and seg.n_clusters(1) == 0


def test_refine_length_mismatch(rng):
    with pytest.raises(ValueError):
        refine_segments(point_avatar(rng.random((5, 3))), np.zeros(4, int))


def test_flat_labels_and_partition():
    seg = Segmentation([0, 0, 1, 1, 2], [0, NOISE, 0, 1, 0])
    flat = seg.flat_labels()
    assert flat[1] == NOISE
    assert len(set(flat[flat >= 0].tolist())) == 4


# -- metrics ------------------------------------------------------------------

def test_metrics_identity():
    t = np.repeat([0, 1, 2], 10)
    assert segmentation_metrics(t, t) == pytest.approx((1, 1, 1))


def test_metrics_purity_single_cluster():
    assert segmentation_metrics(np.zeros(10, int), np.repeat([0, 1], 5))[2] == pytest.approx(0.5)


def test_metrics_random_baseline(rng):
    ari, _, _ = segmentation_metrics(rng.integers(0, 3, 1000), rng.integers(0, 3, 1000))
    assert abs(ari) < 0.05


def test_metrics_noise_handling():
    truth = np.array([0, 0, 0, 1, 1, 1])
    seg = Segmentation([0, 0, 0, 1, 1, 1], [0, 0, NOISE, 0, 0, 0])
    ari, nmi, purity = segmentation_metrics(seg, truth)
    assert purity == 1.0  # noise left out
    assert ari < 1.0  # noise is its own singleton cluster


def test_metrics_length_mismatch():
    with pytest.raises(ValueError):
        segmentation_metrics([0, 1], [0, 1, 1])


def test_sweep_table(rng):
    mu = np.concatenate([rng.normal(0, 0.001, (120, 3)), rng.normal(1, 0.001, (120, 3))])
    rows = sweep(point_avatar(mu), np.zeros(240, int), [0.01, 5.0], [50])
    assert [r["clusters"] for r in rows] == [2, 1]
    assert all(r["noise_fraction"] == 0 for r in rows)
