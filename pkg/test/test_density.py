import numpy as np
import pytest
from fake_scene import SMALL_NETWORK

from wrfgs.config import DensityConfig
from wrfgs.em import logit
from wrfgs.scene import ConditioningKind, DensityStats, densify_and_prune, init_random, should_densify
from wrfgs.scene.store import MU, OPACITY, SCALE

BOUNDS = np.array([[0.0, 0.0, 0.0], [6.0, 4.0, 3.0]])


def _store(n=20):
    store = init_random(
        BOUNDS,
        n,
        0,
        network=SMALL_NETWORK,
        pipeline="wrfgsplus",
        cond_kind=ConditioningKind.TX_POSITION,
        d_sig=1,
    )
    store.params[SCALE][:] = np.log(0.02)
    return store


def _stats(n, hot=(), radius=None):
    stats = DensityStats.empty(n)
    grad = np.zeros((n, 3))
    for i in hot:
        grad[i] = (0.0, -0.01, 0.0)
    stats.add(grad, np.ones(n, dtype=bool), np.zeros(n) if radius is None else radius)
    return stats


@pytest.mark.parametrize(
    ("iteration", "expected"),
    [(500, False), (600, True), (650, False), (15_000, True), (15_100, False)],
)
def test_should_densify_schedule(iteration, expected):
    assert should_densify(iteration, DensityConfig()) is expected


def test_stats_only_count_visible():
    stats = DensityStats.empty(3)
    grad = np.array([[3.0, 4.0, 0.0], [1.0, 0.0, 0.0], [9.0, 9.0, 9.0]])
    visible = np.array([True, True, False])
    stats.add(grad, visible, np.array([1.0, 2.0, 50.0]))
    stats.add(grad, np.array([True, False, False]), np.array([4.0, 9.0, 9.0]))
    np.testing.assert_allclose(stats.average(), [5.0, 1.0, 0.0])
    np.testing.assert_allclose(stats.max_radius, [4.0, 2.0, 0.0])
    np.testing.assert_array_equal(stats.count, [2, 1, 0])


def test_clone_split_and_prune():
    store = _store()
    store.params[SCALE][1] = np.log(0.5)
    before = {k: v.copy() for k, v in store.params.items()}
    radius = np.zeros(20)
    radius[5] = 200.0
    stats = _stats(20, hot=(0, 1), radius=radius)
    config = DensityConfig(grad_threshold=1e-3)

    result = densify_and_prune(
        store,
        stats,
        config,
        canvas_width=360,
        prune_by_opacity=False,
        rng=np.random.default_rng(0),
    )

    assert (result.cloned, result.split, result.pruned) == (1, 1, 1)
    assert store.n_gaussians == 21
    expected_source = [0, *range(2, 5), *range(6, 20), -1, -1, -1]
    np.testing.assert_array_equal(result.source, expected_source)
    # 克隆体沿负梯度方向移动一个最大尺度
    np.testing.assert_allclose(store.params[MU][18], before[MU][0] + [0.0, 0.02, 0.0])
    np.testing.assert_allclose(store.params[MU][0], before[MU][0])
    np.testing.assert_allclose(store.params[SCALE][19:], np.log(0.5 / 1.6))
    assert store.grads[MU].shape == (21, 3)


def test_opacity_pruning_only_when_enabled():
    store = _store()
    store.params[OPACITY][7] = logit(1e-4)
    kwargs = {"canvas_width": 360, "rng": np.random.default_rng(0)}
    kept = densify_and_prune(
        store.copy(), _stats(20), DensityConfig(), prune_by_opacity=False, **kwargs
    )
    assert kept.pruned == 0
    pruned = densify_and_prune(store, _stats(20), DensityConfig(), prune_by_opacity=True, **kwargs)
    assert pruned.pruned == 1
    assert 7 not in pruned.source
    assert store.n_gaussians == 19


def test_pruning_stops_at_minimum():
    store = _store(n=17)
    store.params[OPACITY][:] = logit(1e-4)
    result = densify_and_prune(
        store,
        _stats(17),
        DensityConfig(),
        canvas_width=360,
        prune_by_opacity=True,
        rng=np.random.default_rng(0),
    )
    assert result.pruned == 1
    assert store.n_gaussians == 16


def test_growth_respects_maximum():
    store = _store(n=20)
    stats = _stats(20, hot=range(20))
    config = DensityConfig(grad_threshold=1e-3, max_gaussians=22)
    result = densify_and_prune(
        store, stats, config, canvas_width=360, prune_by_opacity=False, rng=np.random.default_rng(0)
    )
    assert result.cloned == 2
    assert store.n_gaussians == 22


def test_no_hot_gaussians_is_a_no_op():
    store = _store()
    before = store.params[MU].copy()
    result = densify_and_prune(
        store,
        _stats(20),
        DensityConfig(),
        canvas_width=360,
        prune_by_opacity=True,
        rng=np.random.default_rng(0),
    )
    np.testing.assert_array_equal(result.source, np.arange(20))
    np.testing.assert_array_equal(store.params[MU], before)
