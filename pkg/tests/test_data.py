import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcmask.data import (
    Dataset,
    DatasetSchema,
    Mechanism,
    ScalerStats,
    Split,
    SyntheticSpec,
    apply_scaler,
    batches,
    fit_scaler,
    generate_synthetic,
    invert_scaler,
    load_binary,
    load_csv,
    load_dataset,
    read_schema,
    read_truth,
    save_binary,
    save_csv,
    shuffle_and_split,
    synthetic_spec_from_section,
    translate_indices,
    write_schema,
    write_truth,
)
from pcmask.errors import DataError, FormatError, ParseError


def small(n=40, d=3, seed=0, groups=False):
    rng = np.random.default_rng(seed)
    schema = DatasetSchema.default(d, group_name="g" if groups else None)
    return Dataset(
        schema, rng.standard_normal((n, d)) * 3 + 1, rng.standard_normal(n),
        groups=rng.integers(0, 4, n) if groups else None,
    )


def test_sparse_linear_structural_equation():
    spec = SyntheticSpec(d=5, n_samples=200, driver_set=(0,), weights=(2.0,), noise_std=0.0)
    ds = generate_synthetic(spec)
    assert np.array_equal(ds.y, 2.0 * ds.X[:, 0])
    row = ds.X[0] / ds.X[0, 0]  # a row with x0 = 1
    assert 2.0 * row[0] == 2.0
    assert ds.truth_drivers == frozenset({0})


def test_spurious_correlation_level():
    spec = SyntheticSpec(d=6, n_samples=50_000, driver_set=(0, 3), spurious_corr=0.9, seed=1)
    ds = generate_synthetic(spec)
    # confounders are assigned round-robin: input 1 -> driver 0, input 2 -> driver 3
    assert abs(np.corrcoef(ds.X[:, 1], ds.X[:, 0])[0, 1] - 0.9) < 0.05
    assert abs(np.corrcoef(ds.X[:, 2], ds.X[:, 3])[0, 1] - 0.9) < 0.05


@pytest.mark.parametrize("noise,floor", [(0.5, 0.5), (0.05, 0.99), (0.0, 1.0)])
def test_generator_honesty(noise, floor):
    spec = SyntheticSpec(d=8, n_samples=5000, driver_set=(1, 4), weights=(1.5, -1.0), noise_std=noise, seed=2)
    ds = generate_synthetic(spec)
    fit = 1.5 * ds.X[:, 1] - 1.0 * ds.X[:, 4]
    r2 = 1 - np.sum((ds.y - fit) ** 2) / np.sum((ds.y - ds.y.mean()) ** 2)
    assert r2 >= floor - 1e-12


def test_shift_translates_truth():
    kw = dict(d=36, n_samples=100, driver_set=(0, 1, 5, 6, 7), mechanism=Mechanism.COLUMN_NONLINEAR, n_levels=12)
    base = generate_synthetic(SyntheticSpec(**kw))
    shifted = generate_synthetic(SyntheticSpec(shift=2, **kw))
    assert shifted.truth_drivers == translate_indices(base.truth_drivers, 2, 12, 3)
    assert len(base.truth_drivers) == 15


def test_spec_validation():
    with pytest.raises(DataError, match="driver_set"):
        SyntheticSpec(d=4, n_samples=10, driver_set=()).validate()
    with pytest.raises(DataError):
        SyntheticSpec(d=4, n_samples=10, driver_set=(4,)).validate()
    with pytest.raises(DataError):
        SyntheticSpec(d=4, n_samples=10, driver_set=(0,), spurious_corr=1.0).validate()
    with pytest.raises(DataError, match="n_levels"):
        SyntheticSpec(d=10, n_samples=10, driver_set=(0,), mechanism="column_nonlinear", n_levels=3).validate()
    with pytest.raises(DataError, match="unknown"):
        synthetic_spec_from_section({"d": "3", "n_samples": "5", "driver_set": "0", "colour": "red"})


def test_spec_from_section():
    spec = synthetic_spec_from_section(
        {"d": "20", "n_samples": "100", "driver_set": "0, 5,10 15", "spurious_corr": "0.8", "mechanism": "sparse_linear"}
    )
    assert spec.driver_set == (0, 5, 10, 15) and spec.spurious_corr == 0.8


def test_scaler_standardizes_train():
    train = small(500).replace(split=Split.TRAIN)
    out = apply_scaler(fit_scaler(train), train)
    assert np.all(np.abs(out.X.mean(axis=0)) < 1e-8)
    assert np.all(np.abs(out.X.std(axis=0) - 1) < 1e-6)


def test_scaler_shift_invariance():
    ds = small(100)
    shifted = ds.replace(X=ds.X + np.array([5.0, -2.0, 1e3]))
    a = apply_scaler(fit_scaler(ds), ds).X
    b = apply_scaler(fit_scaler(shifted), shifted).X
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_scaler_round_trip_and_output_constant():
    ds = small(200)
    ds = ds.replace(schema=DatasetSchema(ds.schema.input_names, "flux", output_norm_constant=1e-3))
    stats = fit_scaler(ds)
    scaled = apply_scaler(stats, ds)
    np.testing.assert_allclose(scaled.y, ds.y * 1e-3, rtol=1e-15)
    back = invert_scaler(stats, scaled)
    assert np.max(np.abs(back.X - ds.X)) <= 1e-12
    assert np.max(np.abs(back.y - ds.y)) <= 1e-12


def test_scaler_uses_stored_stats():
    train = small(300, seed=1)
    stats = fit_scaler(train)
    once = apply_scaler(stats, train)
    twice = apply_scaler(stats, once)
    np.testing.assert_allclose(twice.X, (once.X - stats.mean) / stats.std, rtol=1e-15)
    assert ScalerStats.from_json(stats.to_json()).mean.tolist() == stats.mean.tolist()


def test_zero_variance_column_named():
    ds = small(10)
    X = ds.X.copy()
    X[:, 1] = 4.0
    with pytest.raises(DataError, match="x1"):
        fit_scaler(ds.replace(X=X))


def test_scaler_rejects_non_train_split():
    with pytest.raises(DataError):
        fit_scaler(small().replace(split=Split.TEST))


def test_split_all_train_and_deterministic():
    ds = small(30)
    parts = shuffle_and_split(ds, (1, 0, 0), seed=5)
    assert parts[Split.TRAIN].n == 30 and parts[Split.VAL].n == 0 and parts[Split.TEST].n == 0
    a = shuffle_and_split(ds, (0.5, 0.3, 0.2), seed=5)
    b = shuffle_and_split(ds, (0.5, 0.3, 0.2), seed=5)
    for s in Split:
        assert np.array_equal(a[s].X, b[s].X)
    with pytest.raises(DataError):
        shuffle_and_split(small(2), (0.4, 0.3, 0.3), seed=0)
    with pytest.raises(DataError):
        shuffle_and_split(ds, (0.5, 0.5, 0.5), seed=0)


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(3, 200),
    a=st.floats(0.05, 0.9),
    b=st.floats(0.0, 1.0),
    seed=st.integers(0, 10_000),
)
def test_split_disjoint_exhaustive(n, a, b, seed):
    f = (a, (1 - a) * b, (1 - a) * (1 - b))
    f = (f[0], f[1], 1.0 - f[0] - f[1])
    ds = small(n).replace(X=np.arange(n, dtype=float)[:, None] * np.ones((1, 3)))
    try:
        parts = shuffle_and_split(ds, f, seed)
    except DataError:
        return  # a positive fraction rounded to an empty split
    ids = np.concatenate([parts[s].X[:, 0] for s in Split])
    assert sorted(ids.tolist()) == list(range(n))


def test_batches_sizes_and_cover():
    ds = small(10)
    sizes = [len(yb) for _, yb in batches(ds, 4, seed=1, epoch=0)]
    assert sizes == [4, 4, 2]
    seen = np.concatenate([yb for _, yb in batches(ds, 3, seed=1, epoch=2)])
    assert sorted(seen.tolist()) == sorted(ds.y.tolist())


def test_batches_reshuffle_per_epoch():
    ds = small(50)
    e0 = np.concatenate([yb for _, yb in batches(ds, 7, seed=1, epoch=0)])
    e1 = np.concatenate([yb for _, yb in batches(ds, 7, seed=1, epoch=1)])
    again = np.concatenate([yb for _, yb in batches(ds, 7, seed=1, epoch=1)])
    assert not np.array_equal(e0, e1)
    assert np.array_equal(e1, again)


def test_binary_round_trip_bit_identical(tmp_path):
    ds = small(25, groups=True).replace(split=Split.VAL, truth_drivers=frozenset({0, 2}))
    save_binary(tmp_path / "d.bin", ds)
    back = load_binary(tmp_path / "d.bin")
    assert back.X.tobytes() == ds.X.tobytes() and back.y.tobytes() == ds.y.tobytes()
    assert np.array_equal(back.groups, ds.groups)
    assert back.split is Split.VAL and back.truth_drivers == ds.truth_drivers
    assert load_dataset(tmp_path / "d.bin").n == 25
    data = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        load_binary(tmp_path / "cut.bin")


def test_csv_round_trip_and_column_order(tmp_path):
    ds = small(12, groups=True)
    save_csv(tmp_path / "a.csv", ds)
    back = load_csv(tmp_path / "a.csv", ds.schema)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    assert np.array_equal(back.groups, ds.groups)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    rows = [ln.split(",") for ln in lines]
    order = [4, 2, 0, 3, 1]
    (tmp_path / "b.csv").write_text("\n".join(",".join(r[k] for k in order) for r in rows) + "\n")
    other = load_csv(tmp_path / "b.csv", ds.schema)
    assert np.array_equal(other.X, ds.X) and np.array_equal(other.y, ds.y)


@pytest.mark.parametrize(
    "body,line,match",
    [
        ("x0,x1,y\n1,2,3\n1,NaN,3\n", 3, "not a finite number"),
        ("x0,x1,y\n1,2,3\n1,2\n", 3, "expected 3 cells"),
        ("x0,y\n1,2\n", 1, "missing column"),
        ("x0,x1,y\n1,2,3\n4,5,1e\n", 3, "not a finite number"),
        ("x0,x1,y\n1,2,inf\n", 2, "not a finite number"),
    ],
)
def test_csv_strictness(tmp_path, body, line, match):
    (tmp_path / "bad.csv").write_text(body)
    with pytest.raises(ParseError, match=match) as info:
        load_csv(tmp_path / "bad.csv", DatasetSchema.default(2))
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_schema_round_trip(tmp_path):
    schema = DatasetSchema(("T_1", "Q_1", "PS"), "FSNT", output_norm_constant=1e-3, input_scaling="none", group_name="lat")
    write_schema(tmp_path / "s.ini", schema)
    assert read_schema(tmp_path / "s.ini") == schema
    with pytest.raises(DataError):
        DatasetSchema(("a", "a"), "y")
    with pytest.raises(DataError):
        DatasetSchema(("a",), "y", output_norm_constant=0.0)


def test_truth_file(tmp_path):
    write_truth(tmp_path / "t.txt", {5, 0, 3})
    assert read_truth(tmp_path / "t.txt") == frozenset({0, 3, 5})
    (tmp_path / "bad.txt").write_text("0 x\n")
    with pytest.raises(FormatError):
        read_truth(tmp_path / "bad.txt")


def test_group_noise_scales():
    spec = SyntheticSpec(d=3, n_samples=20_000, driver_set=(0,), weights=(1.0,), noise_std=1.0, n_groups=3, seed=4)
    ds = generate_synthetic(spec)
    resid = ds.y - ds.X[:, 0]
    stds = [resid[ds.groups == g].std() for g in range(3)]
    np.testing.assert_allclose(stds, [0.5, 1.0, 1.5], rtol=0.05)
