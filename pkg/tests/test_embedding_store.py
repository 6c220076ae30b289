import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from shardsafe.embedding_store import (
    EmbeddingDataset,
    SyntheticSpec,
    generate_synthetic,
    import_csv,
    load_dataset,
    remove_samples,
    save_dataset,
    split_per_class,
)
from shardsafe.errors import (
    DataError,
    DuplicateIdError,
    FormatError,
    NonFiniteError,
    TruncatedError,
    UnknownIdError,
)


def _tiny(n=5, T=2, D=3, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingDataset(
        np.arange(n) * 7 + 3, np.zeros(n), np.arange(n) % 2,
        rng.standard_normal((n, T, D)).astype(np.float32), 2,
    )


def test_roundtrip_is_bit_exact(tmp_path, small_data):
    path = tmp_path / "d.semb"
    save_dataset(small_data, path)
    back = load_dataset(path)
    assert back.equals(small_data)
    assert back.tokens.tobytes() == small_data.tokens.tobytes()
    save_dataset(back, tmp_path / "again.semb")
    assert (tmp_path / "again.semb").read_bytes() == path.read_bytes()


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 12), T=st.integers(1, 3), D=st.integers(1, 5), seed=st.integers(0, 999))
def test_roundtrip_property(tmp_path_factory, n, T, D, seed):
    ds = _tiny(n, T, D, seed)
    path = tmp_path_factory.mktemp("p") / "x.semb"
    save_dataset(ds, path)
    assert load_dataset(path).equals(ds)


def test_format_errors(tmp_path, small_data):
    path = tmp_path / "d.semb"
    save_dataset(small_data, path)
    raw = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_dataset(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError, match="version"):
        load_dataset(tmp_path / "ver")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(TruncatedError):
        load_dataset(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_dataset(tmp_path / "long")
    (tmp_path / "tiny").write_bytes(raw[:6])
    with pytest.raises(TruncatedError):
        load_dataset(tmp_path / "tiny")


def test_validation_errors():
    ds = _tiny()
    with pytest.raises(DuplicateIdError):
        EmbeddingDataset(np.array([1, 1]), np.zeros(2), np.zeros(2), ds.tokens[:2], 2)
    bad = ds.tokens.copy()
    bad[1, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        EmbeddingDataset(ds.ids, ds.sources, ds.labels, bad, 2)
    with pytest.raises(DataError):
        EmbeddingDataset(ds.ids, ds.sources, ds.labels + 5, ds.tokens, 2)


def test_unknown_id_names_the_id():
    ds = _tiny()
    with pytest.raises(UnknownIdError, match="999"):
        ds.positions([3, 999])
    with pytest.raises(UnknownIdError, match="999"):
        remove_samples(ds, [999])


def test_sorted_and_read_only():
    ds = _tiny()
    shuffled = EmbeddingDataset(ds.ids[::-1], ds.sources, ds.labels[::-1], ds.tokens[::-1], 2)
    assert shuffled.equals(ds)
    with pytest.raises(ValueError):
        ds.tokens[0, 0, 0] = 1.0


def test_remove_samples_keeps_rest():
    ds = _tiny()
    out = remove_samples(ds, [10, 24])
    assert out.ids.tolist() == [3, 17, 31]
    assert np.array_equal(out.tokens, ds.tokens[[0, 2, 4]])
    assert 10 in ds and 10 not in out


def test_synthetic_deterministic_and_shaped():
    spec = SyntheticSpec(5, 7, token_count=3, dim=6, num_domains=2, seed=3)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.equals(b)
    assert len(a) == 5 * 7 * 2 and a.tokens.shape == (70, 3, 6)
    assert np.bincount(a.labels).tolist() == [14] * 5
    assert sorted(set(a.sources.tolist())) == [0, 1]
    assert not a.equals(generate_synthetic(SyntheticSpec(5, 7, 3, 6, num_domains=2, seed=4)))


def test_synthetic_is_linearly_separable():
    ds = generate_synthetic(SyntheticSpec(16, 30, cluster_scale=5.0, seed=0))
    train, test = split_per_class(ds, 10, 0)
    clf = LogisticRegression(max_iter=2000).fit(train.tokens.mean(1), train.labels)
    assert clf.score(test.tokens.mean(1), test.labels) >= 0.95


def test_split_is_stratified():
    ds = generate_synthetic(SyntheticSpec(4, 6, num_domains=2, seed=1))
    train, test = split_per_class(ds, 2, 0)
    assert len(test) == 4 * 2 * 2 and len(train) + len(test) == len(ds)
    assert set(train.ids.tolist()).isdisjoint(test.ids.tolist())
    for k in range(4):
        for s in range(2):
            assert ((test.labels == k) & (test.sources == s)).sum() == 2
    with pytest.raises(DataError):
        split_per_class(ds, 6, 0)


def test_import_csv(tmp_path):
    ds = _tiny(4, 2, 2)
    lines = ["id,source,label," + ",".join(f"v{i}" for i in range(4))]
    for i in range(4):
        vals = ",".join(repr(float(x)) for x in ds.tokens[i].ravel())
        lines.append(f"{ds.ids[i]},0,{ds.labels[i]},{vals}")
    (tmp_path / "e.csv").write_text("\n".join(lines) + "\n")
    back = import_csv(tmp_path / "e.csv", 2, 2, num_classes=2)
    assert back.equals(ds)
    (tmp_path / "bad.csv").write_text("id,label\n1,0\n")
    with pytest.raises(FormatError):
        import_csv(tmp_path / "bad.csv", 2, 2)
