import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_shapley
from pcmask.errors import ShapeError, UsageError
from pcmask.evalattrib import (
    AttributionMatrix,
    background_sample,
    coalition_values,
    compare_masks,
    driver_recovery,
    jaccard,
    mean_abs_attribution,
    profile_report,
    r2,
    shapley_exact,
    shapley_sampled,
)
from pcmask.masks import BinaryMask
from pcmask.nncore import build_network, to_mask_mode


def nonlinear(X):
    X = np.atleast_2d(X)
    return np.tanh(X[:, 0] * X[:, 1]) + X[:, 2] ** 2 - 0.5 * X[:, 3] + np.sin(X[:, 0] + X[:, 3])


def test_r2_examples():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(100)
    assert r2(y, y).r2 == 1.0
    assert r2(np.full(100, y.mean()), y).r2 == pytest.approx(0.0, abs=1e-15)
    yc = y - y.mean()
    assert r2(-yc, yc).r2 == pytest.approx(-3.0, rel=1e-12)
    rep = r2(y + 1, y)
    assert rep.mse == pytest.approx(1.0) and rep.n == 100


def test_r2_undefined_and_errors():
    rep = r2([1.0, 2.0], [3.0, 3.0])
    assert rep.r2 is None and not rep.defined and rep.mse == 2.5
    with pytest.raises(UsageError):
        r2([1.0], [1.0])
    with pytest.raises(ShapeError):
        r2([1.0, 2.0], [1.0, 2.0, 3.0])


def test_shapley_linear_example():
    model = lambda X: 2 * np.atleast_2d(X)[:, 0] + 3 * np.atleast_2d(X)[:, 1]
    np.testing.assert_allclose(shapley_exact(model, [1.0, 1.0], np.zeros((1, 2))), [2.0, 3.0], rtol=1e-14)


def test_shapley_constant_and_symmetry():
    rng = np.random.default_rng(1)
    bg = rng.standard_normal((10, 3))
    assert np.all(shapley_exact(lambda X: np.full(len(X), 4.0), [1.0, 2.0, 3.0], bg) == 0)
    sym_bg = np.vstack([bg[:, [0, 1]], bg[:, [1, 0]]])
    phi = shapley_exact(lambda X: X[:, 0] + X[:, 1] + X[:, 0] * X[:, 1], [0.7, 0.7], sym_bg)
    assert phi[0] == pytest.approx(phi[1], rel=1e-12)


def test_shapley_exact_matches_permutation_oracle_and_efficiency():
    rng = np.random.default_rng(2)
    for _ in range(3):
        x, bg = rng.standard_normal(4), rng.standard_normal((7, 4))
        phi = shapley_exact(nonlinear, x, bg)
        np.testing.assert_allclose(phi, brute_force_shapley(nonlinear, x, bg), rtol=1e-10, atol=1e-12)
        assert abs(phi.sum() - (nonlinear(x)[0] - nonlinear(bg).mean())) < 1e-9


def test_coalition_values_chunking():
    rng = np.random.default_rng(3)
    x, bg = rng.standard_normal(4), rng.standard_normal((9, 4))
    v = coalition_values(nonlinear, x, bg)
    assert v[0] == pytest.approx(nonlinear(bg).mean(), rel=1e-12)
    assert v[-1] == pytest.approx(nonlinear(x)[0], rel=1e-12)


def test_shapley_exact_limits():
    with pytest.raises(UsageError, match="shapley_sampled"):
        shapley_exact(lambda X: X[:, 0], np.zeros(16), np.zeros((1, 16)))
    with pytest.raises(UsageError):
        shapley_exact(lambda X: X[:, 0], np.zeros(2), np.zeros((0, 2)))
    with pytest.raises(ShapeError):
        shapley_exact(lambda X: X[:, 0], np.zeros(2), np.zeros((3, 4)))


def test_sampled_agrees_with_exact():
    rng = np.random.default_rng(4)
    x, bg = rng.standard_normal(4), rng.standard_normal((5, 4))
    exact = shapley_exact(nonlinear, x, bg)
    est = shapley_sampled(nonlinear, x, bg, n_permutations=2000, seed=1)
    assert np.all(np.abs(est.values - exact) <= 3 * est.stderr + 1e-12)
    # every permutation telescopes, so efficiency holds for the estimate too
    assert abs(est.values.sum() - exact.sum()) < 1e-9


def test_sampled_seeded_and_validated():
    x, bg = np.ones(4), np.zeros((3, 4))
    a = shapley_sampled(nonlinear, x, bg, 10, seed=5)
    b = shapley_sampled(nonlinear, x, bg, 10, seed=5)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.stderr, b.stderr)
    assert np.all(np.isinf(shapley_sampled(nonlinear, x, bg, 1).stderr))
    with pytest.raises(UsageError):
        shapley_sampled(nonlinear, x, bg, 0)


def masked_net(d=6, bits=(1, 0, 1, 1, 0, 1)):
    net = build_network(d, (8, 8), seed=3, input_init="glorot")
    return to_mask_mode(net, BinaryMask(np.array(bits), 0.2))


def test_masked_features_get_exactly_zero():
    rng = np.random.default_rng(6)
    net = masked_net()
    x, bg = rng.standard_normal(6), rng.standard_normal((20, 6))
    est = shapley_sampled(net, x, bg, n_permutations=50, seed=2)
    assert est.values[1] == 0.0 and est.values[4] == 0.0
    assert est.stderr[1] == 0.0
    phi = shapley_exact(net, x, bg)
    assert phi[1] == 0.0 and phi[4] == 0.0
    row = mean_abs_attribution(net, rng.standard_normal((5, 6)), bg, n_permutations=8)
    assert row[1] == 0.0 and row[4] == 0.0 and np.all(row[[0, 2, 3, 5]] > 0)


def test_mean_abs_attribution_constant_model():
    rng = np.random.default_rng(7)
    row = mean_abs_attribution(lambda X: np.zeros(len(X)), rng.standard_normal((4, 3)), rng.standard_normal((5, 3)))
    assert np.all(row == 0)
    with pytest.raises(UsageError):
        mean_abs_attribution(nonlinear, np.zeros((0, 4)), np.zeros((1, 4)))
    with pytest.raises(UsageError):
        mean_abs_attribution(nonlinear, np.zeros((1, 4)), np.zeros((1, 4)), method="kernel")


def test_mean_abs_attribution_exact_is_mean_of_abs():
    rng = np.random.default_rng(8)
    S, bg = rng.standard_normal((3, 4)), rng.standard_normal((4, 4))
    expected = np.mean([np.abs(shapley_exact(nonlinear, s, bg)) for s in S], axis=0)
    np.testing.assert_allclose(mean_abs_attribution(nonlinear, S, bg, method="exact"), expected, rtol=1e-13)


def test_attribution_csv(tmp_path):
    m = AttributionMatrix(np.array([[0.5, 0.0, 1e-9]]), ("a", "b", "c"), ("y",), 10, "100 rows")
    m.write_csv(tmp_path / "a.csv")
    back = AttributionMatrix.read_csv(tmp_path / "a.csv")
    assert back.input_names == ("a", "b", "c") and back.output_names == ("y",)
    assert np.array_equal(back.values, m.values)


def test_background_sample():
    X = np.arange(1000.0).reshape(500, 2)
    a, b = background_sample(X, 100, seed=1), background_sample(X, 100, seed=1)
    assert a.shape == (100, 2) and np.array_equal(a, b)
    assert len(np.unique(a[:, 0])) == 100
    assert background_sample(X[:10], 100).shape == (10, 2)


def test_driver_recovery_examples():
    T = {1, 4, 7}
    assert (driver_recovery(BinaryMask([0, 1, 0, 0, 1, 0, 0, 1], 0.1), T).precision, driver_recovery(T, T).recall) == (1.0, 1.0)
    rep = driver_recovery({1, 4, 7, 2}, T)
    assert rep.precision == 0.75 and rep.recall == 1.0 and not rep.exact
    empty = driver_recovery(BinaryMask(np.zeros(8), 1.0), T)
    assert empty.precision is None and not empty.precision_defined and empty.recall == 0.0
    assert driver_recovery(set(), set()).recall is None
    assert driver_recovery(np.array([False, True, True]), {1, 2}).exact


def test_compare_masks_examples():
    a = BinaryMask([1, 1, 0, 0], 0.1)
    same = compare_masks(a, a)
    assert same.jaccard == 1.0 and same.both == {0, 1} and not same.only_a and not same.only_b
    disjoint = compare_masks(a, BinaryMask([0, 0, 1, 1], 0.1))
    assert disjoint.jaccard == 0.0
    with pytest.raises(ShapeError):
        compare_masks(a, BinaryMask([1, 0, 1], 0.1))
    assert compare_masks(BinaryMask(np.zeros(3), 1), BinaryMask(np.zeros(3), 1)).jaccard is None


def test_compare_masks_groups_and_csv(tmp_path):
    a, b = BinaryMask([1, 1, 0, 1, 0, 1], 0.1), BinaryMask([0, 1, 1, 1, 0, 0], 0.1)
    rep = compare_masks(a, b, level_map=[0, 1, 2, 0, 1, 2])
    by = {g.group: g for g in rep.groups}
    assert by[0].both == {3} and by[0].only_a == {0}
    assert by[1].both == {1} and by[2].only_a == {5} and by[2].only_b == {2}
    assert rep.jaccard == pytest.approx(2 / 5)
    rep.write_csv(tmp_path / "o.csv")
    rows = (tmp_path / "o.csv").read_text().splitlines()
    assert rows[0] == "group,only_a,only_b,both" and rows[-1] == "all,2,1,2"
    assert rep.to_dict()["both"] == [1, 3]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30), st.integers(1, 5))
def test_compare_masks_partition(pairs, n_groups):
    a = BinaryMask([p[0] for p in pairs], 0.1)
    b = BinaryMask([p[1] for p in pairs], 0.1)
    rep = compare_masks(a, b, [j % n_groups for j in range(len(pairs))])
    union = a.selected | b.selected
    parts = [s for g in rep.groups for s in (g.only_a, g.only_b, g.both)]
    assert sum(len(p) for p in parts) == len(union)
    assert frozenset().union(*parts) == union
    assert rep.jaccard == jaccard(a, b)


def test_profile_report():
    rng = np.random.default_rng(9)
    y, p = rng.standard_normal(50), rng.standard_normal(50)
    one = profile_report(p, y, np.zeros(50))
    assert one.rows[0].r2 == pytest.approx(r2(p, y).r2, rel=1e-14)
    same = profile_report([2.0, 2.0, 5.0], [1.0, 3.0, 5.0], [0, 0, 1])
    assert same.rows[0].mean_prediction == 2.0 and same.rows[1].r2 is None
    with pytest.raises(ShapeError):
        profile_report([1.0], [1.0, 2.0], [0, 0])
