import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jacmatch import bound as B
from jacmatch import nn


def line(*xs):
    return np.array(xs, dtype=np.float64)[:, None]


def test_hausdorff_identical_sets():
    A = np.random.default_rng(0).normal(size=(10, 3))
    assert B.asymmetric_hausdorff(A, A).value == 0.0


def test_hausdorff_line_example_and_asymmetry():
    h = B.asymmetric_hausdorff(line(0, 5), line(1))
    assert h.value == 4.0 and h.a_index == 1 and h.b_index == 0
    assert B.asymmetric_hausdorff(line(1), line(0, 5)).value == 1.0


def test_hausdorff_rejects_empty():
    with pytest.raises(ValueError, match="nonempty"):
        B.asymmetric_hausdorff(np.zeros((0, 2)), np.zeros((3, 2)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), na=st.integers(1, 30), nb=st.integers(1, 30))
def test_witness_reproduces_value(seed, na, nb):
    rng = np.random.default_rng(seed)
    A, Bs = rng.normal(size=(na, 4)), rng.normal(size=(nb, 4))
    h = B.asymmetric_hausdorff(A, Bs)
    assert B.PIXEL.distance(A[h.a_index], Bs[h.b_index]) == h.value


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_adding_a_point_never_increases(seed):
    rng = np.random.default_rng(seed)
    A, Bs = rng.normal(size=(15, 2)), rng.normal(size=(5, 2))
    before = B.asymmetric_hausdorff(A, Bs).value
    after = B.asymmetric_hausdorff(A, np.vstack([Bs, rng.normal(size=(1, 2))])).value
    assert after <= before


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), covered=st.booleans())
def test_zero_iff_covered(seed, covered):
    rng = np.random.default_rng(seed)
    Bs = rng.normal(size=(6, 2))
    A = Bs[rng.integers(0, 6, size=4)] if covered else rng.normal(size=(4, 2))
    within = all(np.min(np.linalg.norm(Bs - a, axis=1)) <= 1e-12 for a in A)
    assert (B.asymmetric_hausdorff(A, Bs).value == 0.0) == within


def test_parallel_rows_bit_identical():
    rng = np.random.default_rng(1)
    A, Bs = rng.normal(size=(1000, 3)), rng.normal(size=(50, 3))
    assert B.asymmetric_hausdorff(A, Bs) == B.asymmetric_hausdorff(A, Bs, jobs=3)


def test_lipschitz_examples():
    pairs = [(np.array([0.0]), np.array([1.0])), (np.array([2.0]), np.array([-1.0]))]
    assert B.empirical_lipschitz(lambda X: np.ones(len(X)), pairs).value == 0.0
    assert B.empirical_lipschitz(lambda X: 3 * X[:, 0], pairs).value == 3.0


def test_lipschitz_skips_identical_and_rejects_all_identical():
    same = [(np.array([1.0]), np.array([1.0]))]
    with pytest.raises(ValueError, match="identical"):
        B.empirical_lipschitz(lambda X: X[:, 0], same)
    res = B.empirical_lipschitz(lambda X: X[:, 0] ** 2, same + [(np.array([0.0]), np.array([1.0]))])
    assert res.skipped == 1 and res.value == 1.0


def test_lipschitz_subset_monotone():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(20, 2, 2))
    rho = lambda X: np.sin(X).sum(axis=1)
    full = B.empirical_lipschitz(rho, [(p[0], p[1]) for p in pts]).value
    sub = B.empirical_lipschitz(rho, [(p[0], p[1]) for p in pts[:7]]).value
    assert sub <= full


def test_bound_equal_sets_reduce_to_mean_max():
    t = nn.mlp([2, 4, 2]).init_params(0)
    s = nn.mlp([2, 3, 2]).init_params(1)
    X = np.random.default_rng(0).normal(size=(30, 2))
    rep = B.check_dataset_bound(t, s, X, X)
    assert rep.hausdorff == 0.0 and rep.holds
    assert rep.rhs == rep.max_term >= rep.lhs


def test_bound_teacher_equals_student_all_zero():
    t = nn.mlp([2, 4, 2]).init_params(0)
    X = np.random.default_rng(0).normal(size=(30, 2))
    rep = B.check_dataset_bound(t, t.copy(), X, X[:5] + 1.0)
    assert rep.lhs == rep.max_term == rep.lipschitz == 0.0 and rep.holds


def test_bound_random_instances():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        t = nn.mlp([2, 8, 3]).init_params(seed)
        s = nn.mlp([2, 5, 3]).init_params(seed + 1)
        rep = B.check_dataset_bound(t, s, rng.normal(size=(200, 2)), rng.normal(size=(20, 2)))
        assert rep.holds, rep.to_dict()


def test_bound_feature_metric_and_json():
    t = nn.mlp([2, 8, 3]).init_params(3)
    s = nn.mlp([2, 5, 3]).init_params(4)
    rng = np.random.default_rng(3)
    rep = B.check_dataset_bound(t, s, rng.normal(size=(40, 2)), rng.normal(size=(10, 2)),
                        metric=B.MetricSpace.from_network(t))
    d = json.loads(rep.to_json())
    assert d["metric"] == "features" and len(d["hausdorff_witness"]) == 2
    assert rep.holds


def test_metric_spot_check():
    net = nn.mlp([2, 6, 2]).init_params(0)
    X = np.random.default_rng(0).normal(size=(50, 2))
    B.PIXEL.spot_check(X)
    B.MetricSpace.from_network(net).spot_check(X)


def test_superset_examples():
    assert B.superset_monotonicity(line(0, 5), line(1), np.zeros((0, 1))) == (4.0, 4.0)
    assert B.superset_monotonicity(line(0, 5), line(1), line(4)) == (4.0, 1.0)


def test_superset_noise_copies():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        src, tgt = rng.normal(size=(50, 3)), rng.normal(size=(10, 3))
        before, after = B.superset_monotonicity(src, tgt, tgt + 0.3 * rng.normal(size=tgt.shape))
        assert after <= before


def test_pair_limit():
    with pytest.raises(ValueError, match="brute-force limit"):
        B.asymmetric_hausdorff(np.zeros((10 ** 4, 1)), np.zeros((10 ** 3 + 1, 1)))
