import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcgm.condense import CondenseConfig
from dcgm.dataio import Dataset
from dcgm.evalharness import (
    EvalReport,
    RunError,
    TrainConfig,
    TrainingDivergence,
    accuracy,
    average_ranks,
    cross_arch_matrix,
    evaluate_protocol,
    fit,
    nas_search,
    parse_grid,
    search_space,
    spearman,
    train_from_scratch,
    validation_split,
)
from dcgm.nets import ArchSpec
from stats_oracles import rank_formula_spearman

MLP = ArchSpec(kind="mlp", width=16, depth=1)


def make_set(images, labels, classes, name="t"):
    images = np.asarray(images, np.float32)
    return Dataset(images, np.asarray(labels, np.int64), name, "train", np.zeros(images.shape[1], np.float32),
                   np.ones(images.shape[1], np.float32), classes)


def separable(n, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, 1, 4, 4))
    w = np.random.default_rng(123).standard_normal((1, 4, 4))  # shared separating direction
    score = (x * w).sum((1, 2, 3))
    keep = np.abs(score) > 0.5  # margin
    return make_set(x[keep], (score[keep] > 0).astype(int), 2)


def test_separable_mlp():
    acc = train_from_scratch(separable(600, 0), MLP, separable(600, 1), epochs=30, lr=0.05, batch_size=32)
    assert acc >= 0.95


def test_memorises_one_sample_per_class(small_toy):
    train = small_toy[0]
    one = train.subset([train.class_indices(c)[0] for c in range(4)])
    params = fit(one, ArchSpec(width=16, depth=2), TrainConfig(epochs=100), seed=0)
    assert accuracy(params, one) == 1.0


def test_zero_epochs_is_chance(toy):
    accs = [train_from_scratch(toy[0], ArchSpec(width=16, depth=2), toy[1], epochs=0, seed=s) for s in range(5)]
    # 1000 test images: 5 runs average within a few sigma of 1/10
    assert abs(np.mean(accs) - 0.1) < 0.08


def test_divergence_is_reported(small_toy):
    with pytest.raises(TrainingDivergence, match="diverged"):
        fit(small_toy[0], ArchSpec(width=16, depth=1, norm="none"), TrainConfig(epochs=5, lr=1e6), seed=0)


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        fit(make_set(np.zeros((0, 1, 4, 4)), [], 2), MLP)


def test_report_statistics():
    r = EvalReport([0.5, 0.7], 1, 2)
    assert r.mean == pytest.approx(0.6) and r.std == pytest.approx(0.1)
    assert r.to_csv().splitlines() == ["set_id,model_id,accuracy", "0,0,0.5", "0,1,0.7"]
    with pytest.raises(ValueError):
        EvalReport([0.5], 2, 2)


@given(st.lists(st.floats(0, 1), min_size=6, max_size=6), st.randoms())
def test_report_mean_is_order_invariant(accs, rnd):
    shuffled = accs[:]
    rnd.shuffle(shuffled)
    assert EvalReport(accs, 2, 3).mean == pytest.approx(EvalReport(shuffled, 3, 2).mean, abs=1e-12)


def test_protocol_with_stub(monkeypatch, small_toy):
    import dcgm.evalharness as eh

    monkeypatch.setattr(eh, "_train_task", lambda args: 0.25)
    rep = evaluate_protocol(lambda s: small_toy[0], MLP, small_toy[1], n_sets=5, n_models=20)
    assert len(rep.accuracies) == 100 and rep.std == 0.0 and rep.mean == 0.25
    assert len(rep.to_csv().splitlines()) == 101


def test_protocol_errors_name_the_run(small_toy):
    def broken(s):
        raise OSError("disk")

    with pytest.raises(RunError, match="building set 0"):
        evaluate_protocol(broken, MLP, small_toy[1], n_sets=1, n_models=1)
    bad_spec = ArchSpec(width=16, depth=1, norm="none")
    with pytest.raises(RunError, match="set 0 model 0"):
        evaluate_protocol(lambda s: small_toy[0], bad_spec, small_toy[1], n_sets=1, n_models=1,
                          train=TrainConfig(epochs=5, lr=1e6))


def test_protocol_is_deterministic_and_parallel_safe(small_toy):
    args = (lambda s: small_toy[0], MLP, small_toy[1], 2, 2, TrainConfig(epochs=3), 4)
    a = evaluate_protocol(*args)
    b = evaluate_protocol(*args, workers=2)
    assert a.accuracies == b.accuracies


# -- spearman ----------------------------------------------------------------------------

def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)
    assert average_ranks([3, 1, 3, 2]).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_spearman_errors():
    with pytest.raises(ValueError, match="length"):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(ValueError, match="two"):
        spearman([1], [1])
    with pytest.raises(ValueError, match="variance"):
        spearman([1, 1, 1], [1, 2, 3])


def spearman_oracle_trials(n_pairs: int = 1000, seed: int = 0) -> float:
    """Largest deviation from the exact tie-corrected rank formula."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_pairs:
        n = int(rng.integers(2, 51))
        levels = int(rng.integers(2, 2 * n + 1))  # few levels give many ties
        xs = rng.integers(0, levels, n).tolist()
        ys = rng.integers(0, levels, n).tolist()
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            continue
        worst = max(worst, abs(spearman(xs, ys) - rank_formula_spearman(xs, ys)))
        done += 1
    return worst


def test_spearman_matches_rank_formula_small():
    assert spearman_oracle_trials(200, seed=9) < 1e-12


def test_spearman_matches_scipy():
    from scipy.stats import spearmanr

    rng = np.random.default_rng(3)
    x, y = rng.integers(0, 5, 30), rng.standard_normal(30)
    assert spearman(x, y) == pytest.approx(spearmanr(x, y).statistic, abs=1e-12)


@given(st.lists(st.integers(-20, 20), min_size=3, max_size=30).filter(lambda v: len(set(v)) > 1),
       st.randoms())
def test_spearman_monotone_invariance(xs, rnd):
    ys = xs[:]
    rnd.shuffle(ys)
    if len(set(ys)) < 2:
        return
    base = spearman(xs, ys)
    assert spearman([math.exp(v / 5) for v in xs], [v ** 3 for v in ys]) == pytest.approx(base, abs=1e-12)


# -- search space and ranking ----------------------------------------------------------------

def test_full_grid_size():
    assert len(search_space()) == 720 == 4 * 4 * 5 * 3 * 3


def test_sub_grid():
    space = search_space("W=32,64;D=1,2")
    assert len(space) == 4 * 5 * 3 * 3
    axes = parse_grid("N=instance,none;A=relu;P=avg,max")
    assert axes["N"] == ("instance", "none") and len(search_space(axes)) == 4 * 4 * 2 * 1 * 2
    for bad in ("X=1", "W=", "W"):
        with pytest.raises(ValueError):
            parse_grid(bad)


def test_validation_split(small_toy):
    train = small_toy[0]
    rest, val = validation_split(train, 0.1, seed=2)
    assert len(val) == 16 and len(rest) == 144
    again = validation_split(train, 0.1, seed=2)[1]
    assert np.array_equal(val.images, again.images)


def test_two_arch_ranking(small_toy):
    train, test = small_toy
    weak = ArchSpec(width=1, depth=1, act="sigmoid", pool="none", norm="none")
    strong = ArchSpec(width=16, depth=2)
    res = nas_search([weak, strong], train, test, TrainConfig(epochs=10, batch_size=32), top_k=2)
    assert res.val_acc[1] > res.val_acc[0]
    assert res.ranking == [1, 0] and sorted(res.ranking) == [0, 1] and res.spearman is None


def test_eight_arch_determinism(small_toy):
    train, test = small_toy
    space = search_space("W=8;D=1,2;N=instance,none;A=relu;P=avg,max", in_height=8, in_width=8, num_classes=4)
    assert len(space) == 8
    cfg = TrainConfig(epochs=3, batch_size=32)
    a = nas_search(space, train, test, cfg, top_k=8, ref_acc=list(range(8)), seed=1)
    b = nas_search(space, train, test, cfg, top_k=8, ref_acc=list(range(8)), seed=1)
    assert a.ranking == b.ranking and a.val_acc == b.val_acc
    assert sorted(a.ranking) == list(range(8))
    assert -1.0 <= a.spearman <= 1.0
    lines = a.to_csv().splitlines()
    assert lines[0] == "arch,val_acc,ref_acc,rank" and len(lines) == 9


def test_failed_architectures_are_unranked(small_toy, monkeypatch, caplog):
    import dcgm.evalharness as eh

    train, test = small_toy
    space = [ArchSpec(width=4, depth=1), ArchSpec(width=8, depth=1), ArchSpec(width=12, depth=1)]
    real_fit = eh.fit

    def flaky(train_set, spec, *a, **k):
        if spec.width == 8:
            raise TrainingDivergence("boom")
        return real_fit(train_set, spec, *a, **k)

    monkeypatch.setattr(eh, "fit", flaky)
    res = nas_search(space, train, test, TrainConfig(epochs=1), top_k=3, ref_acc=[0.1, 0.2, 0.3])
    assert 1 not in res.ranking and res.rank_of(1) is None and "boom" in res.failures[1]
    assert "left unranked" in caplog.text
    assert res.to_csv().splitlines()[2].endswith(",0.2,")


def test_cross_arch_smoke(small_toy, tmp_path):
    train, test = small_toy
    a, b = ArchSpec(width=8, depth=1), ArchSpec(kind="mlp", width=16, depth=1)
    cfg = CondenseConfig(ipc=1, K=2, real_batch=16)
    tcfg = TrainConfig(epochs=5)
    mat = cross_arch_matrix(train, test, [a, b], [a, b], cfg, n_sets=1, n_models=2, train=tcfg, seed=3)
    import csv

    rows = list(csv.reader(mat.to_csv().splitlines()))
    assert len(rows) == 3 and rows[0][1:] == [str(a), str(b)] and [r[0] for r in rows[1:]] == [str(a), str(b)]
    from dcgm.condense import condense, derive_seed

    syn = condense(train, a, cfg.replace(seed=derive_seed(3, 0)))[0].as_dataset()
    direct = evaluate_protocol(lambda s: syn, a, test, 1, 2, tcfg, 3)
    assert mat.cells[str(a), str(a)].accuracies == direct.accuracies
