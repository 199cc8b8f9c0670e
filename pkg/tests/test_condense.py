import numpy as np
import pytest

from dcgm.condense import (
    CondenseConfig,
    DivergenceError,
    _should_stop,
    condense,
    default_loops,
    loss_csv_text,
    momentum_step,
    sample_class_minibatch,
    sgd_step,
)
from dcgm.dataio import Dataset
from dcgm.nets import ArchSpec

TINY = ArchSpec.parse("convnet:W=8,D=2")


def tiny_cfg(**kw):
    base = dict(K=2, real_batch=8, early_stop_window=0, seed=0)
    base.update(kw)
    return CondenseConfig(**base)


def test_sgd_step_examples():
    (x,) = sgd_step([np.array([1.0, 2.0])], [np.array([1.0, 1.0])], 0.5)
    np.testing.assert_array_equal(x, [0.5, 1.5])
    (y,) = sgd_step([np.array([1.0, 2.0])], [np.array([3.0, 3.0])], 0.0)
    np.testing.assert_array_equal(y, [1.0, 2.0])
    with pytest.raises(ValueError):
        sgd_step([np.ones(2)], [np.ones(3)], 0.1)


def test_sgd_converges_on_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    curv = np.array([1.0, 2.0, 0.5])
    x = np.zeros(3)
    for _ in range(100):
        (x,) = sgd_step([x], [curv * (x - target)], 0.5)
    assert np.max(np.abs(x - target)) < 1e-6


def test_momentum_step():
    (x,), (v,) = momentum_step([np.array([1.0])], [np.array([2.0])], [np.array([1.0])], 0.1, 0.5)
    assert v[0] == 2.5 and x[0] == pytest.approx(0.75)


def test_default_loops():
    assert default_loops(1) == (1, 1)
    assert default_loops(10) == (10, 50)
    assert default_loops(50) == (50, 10)
    assert default_loops(20) == (20, 25)
    cfg = CondenseConfig(ipc=10)
    assert (cfg.T, cfg.steps_net, cfg.K, cfg.lr_syn, cfg.lr_net) == (10, 50, 1000, 0.1, 0.01)


def test_config_validation():
    CondenseConfig(steps_net=0)  # allowed for T == 1
    for bad in (dict(steps_net=0, T=2), dict(K=0), dict(init="zeros"), dict(distance="l1"),
                dict(momentum_net=1.0), dict(real_batch=0)):
        with pytest.raises(ValueError):
            CondenseConfig(**bad)


def test_minibatch_sampling(small_toy):
    train, _ = small_toy
    rng = np.random.default_rng(0)
    members = train.images[train.labels == 2]
    whole = sample_class_minibatch(train, 2, len(members), rng)
    assert sorted(map(bytes, whole)) == sorted(map(bytes, members))
    a = sample_class_minibatch(train, 1, 5, np.random.default_rng(9))
    b = sample_class_minibatch(train, 1, 5, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()
    assert len(sample_class_minibatch(train, 0, 10_000, rng)) == 40
    with pytest.raises(ValueError):
        sample_class_minibatch(train, 4, 1, rng)


def test_single_draws_cover_class_uniformly():
    from scipy.stats import chisquare

    images = np.arange(20, dtype=np.float32).reshape(20, 1, 1, 1)
    data = Dataset(images, np.zeros(20, np.int64), "u", "train", np.zeros(1), np.ones(1), 1)
    rng = np.random.default_rng(1)
    counts = np.zeros(20)
    for _ in range(4000):
        counts[int(sample_class_minibatch(data, 0, 1, rng)[0, 0, 0, 0])] += 1
    assert chisquare(counts).pvalue > 1e-3


def test_output_shape_and_labels(small_toy):
    train, _ = small_toy
    syn, hist = condense(train, TINY, tiny_cfg())
    assert syn.images.shape == (4, 1, 8, 8) and syn.images.dtype == np.float32
    np.testing.assert_array_equal(syn.labels, [0, 1, 2, 3])
    assert hist.steps == 2 and len(hist.depths) == 2
    assert "seed=0" in syn.provenance and "convnet" in syn.provenance


def test_toy_sized_output(toy):
    train, _ = toy
    syn, _ = condense(train, ArchSpec.parse("convnet:W=8"), tiny_cfg(K=1))
    assert syn.images.shape == (10, 1, 16, 16)
    np.testing.assert_array_equal(syn.labels, np.arange(10))


def test_deterministic(small_toy):
    train, _ = small_toy
    a, ha = condense(train, TINY, tiny_cfg(ipc=2, T=2, steps_net=2))
    b, hb = condense(train, TINY, tiny_cfg(ipc=2, T=2, steps_net=2))
    assert a.bitwise_equal(b) and ha.losses == hb.losses
    c, _ = condense(train, TINY, tiny_cfg(ipc=2, T=2, steps_net=2, seed=1))
    assert not a.bitwise_equal(c)


def test_parallel_classes_match_sequential(small_toy):
    train, _ = small_toy
    a, _ = condense(train, TINY, tiny_cfg())
    b, _ = condense(train, TINY, tiny_cfg(parallel_classes=3))
    assert a.images.tobytes() == b.images.tobytes()


def test_class_updates_use_only_their_class(small_toy):
    train, _ = small_toy
    edited = train.images.copy()
    edited[train.labels == 3] *= -1.0
    other = Dataset(edited, train.labels, train.name, "train", train.mean, train.std, train.num_classes)
    a, _ = condense(train, TINY, tiny_cfg(K=1))
    b, _ = condense(other, TINY, tiny_cfg(K=1))
    assert a.images[:3].tobytes() == b.images[:3].tobytes()
    assert a.images[3].tobytes() != b.images[3].tobytes()


@pytest.mark.parametrize("init", ["noise", "real"])
def test_init_modes(small_toy, init):
    train, _ = small_toy
    syn, _ = condense(train, TINY, tiny_cfg(K=1, lr_syn=0.0, init=init))
    if init == "real":
        pool = {bytes(x) for x in train.images}
        assert all(bytes(x) in pool for x in syn.images)
    else:
        assert abs(float(syn.images.mean())) < 1.0 and 0.5 < float(syn.images.std()) < 1.5


def test_batchnorm_network_condenses(small_toy):
    train, _ = small_toy
    syn, hist = condense(train, ArchSpec.parse("convnet:W=8,D=2,N=batch"), tiny_cfg(ipc=2, T=2, steps_net=1))
    assert np.isfinite(syn.images).all() and hist.steps == 2


@pytest.mark.parametrize("distance", ["layerwise", "euclidean", "cosine"])
def test_alternative_distances(small_toy, distance):
    train, _ = small_toy
    syn, hist = condense(train, TINY, tiny_cfg(K=1, distance=distance))
    assert np.isfinite(hist.losses).all()


def test_divergence_carries_snapshot(small_toy):
    train, _ = small_toy
    with pytest.raises(DivergenceError) as info:
        condense(train, TINY, tiny_cfg(K=3, lr_syn=1e38, distance="euclidean"))
    snap = info.value.snapshot
    assert {"k", "t", "images", "losses"} <= set(snap)


def test_too_few_samples(small_toy):
    train, _ = small_toy
    with pytest.raises(ValueError, match="fewer than ipc"):
        condense(train, TINY, tiny_cfg(ipc=41))


def test_early_stop_rule():
    flat = [1.0] * 20
    assert _should_stop(flat, 10, 1e-3)
    improving = list(np.linspace(2.0, 1.0, 20))
    assert not _should_stop(improving, 10, 1e-3)
    assert not _should_stop(flat[:19], 10, 1e-3)
    assert not _should_stop(flat, 0, 1e-3)


def test_early_stop_ends_run(small_toy):
    train, _ = small_toy
    _, hist = condense(train, TINY, tiny_cfg(K=50, lr_syn=0.0, early_stop_window=2, early_stop_tol=0.5))
    assert hist.stopped_early and hist.steps < 50


def test_depth_independent_of_inner_step(small_toy):
    train, _ = small_toy
    seen = []
    condense(train, TINY, tiny_cfg(K=2, ipc=2, T=4, steps_net=2), on_step=lambda i: seen.append(i))
    depths = {d["depth"] for d in seen}
    assert len(depths) == 1
    assert {d["t"] for d in seen} == {0, 1, 2, 3}


def test_loss_csv_format():
    from dcgm.condense import CondenseHistory

    text = loss_csv_text(CondenseHistory(losses=[1.5, 0.25]))
    assert text == "step,mean_loss\n0,1.5\n1,0.25\n"


@pytest.mark.slow
def test_toy_run_learns(toy):
    from dcgm.coresets import random_select
    from dcgm.evalharness import train_from_scratch

    train, test = toy
    syn, hist = condense(train, ArchSpec(), CondenseConfig(K=100, real_batch=64, early_stop_window=0, seed=0))
    assert np.mean(hist.losses[50:100]) < np.mean(hist.losses[:50])
    cond = [train_from_scratch(syn.as_dataset(), ArchSpec(), test, seed=s) for s in range(5)]
    rand = [train_from_scratch(train.subset(random_select(train, 1, s)), ArchSpec(), test, seed=s) for s in range(5)]
    assert np.mean(cond) > np.mean(rand)
